import sys
from pathlib import Path


def resource_path(relative_path) -> Path:
    """Absolute path of a bundled file, for frozen builds and source checkouts alike."""
    if hasattr(sys, '_MEIPASS'):  # frozen executable
        base_path = Path(sys._MEIPASS)
    else:
        base_path = Path(__file__).resolve().parents[1]
    return base_path / relative_path


def data_path(name: str) -> Path:
    return resource_path(Path("data") / name)
