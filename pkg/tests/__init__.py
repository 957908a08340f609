"""Test suite for transit-squeeze."""
