import sys

from transit_squeeze.cli import main

sys.exit(main())
