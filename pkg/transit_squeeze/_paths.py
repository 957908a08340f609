from pathlib import Path
from importlib.resources import files

from transit_squeeze._exceptions import ConfigError

PROFILE_SUFFIX: str = ".cfg"


def get_profiles_dir() -> Path:
    """Get the path to the bundled reproduction profiles."""
    return Path(str(files("transit_squeeze").joinpath("profiles")))


def list_profiles() -> list[str]:
    return sorted(p.stem for p in get_profiles_dir().glob(f"*{PROFILE_SUFFIX}"))


def get_profile_path(name: str) -> Path:
    """Get the path to a bundled profile, by name with or without the `.cfg` suffix."""
    stem: str = name.removesuffix(PROFILE_SUFFIX)
    output: Path = get_profiles_dir() / f"{stem}{PROFILE_SUFFIX}"
    if not output.exists():
        raise ConfigError(
            f"no bundled profile named {name!r}, available profiles: {', '.join(list_profiles())}"
        )
    return output
