"""
Version management utilities for the simulator
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

try:
    import tomllib
except ImportError:
    # Python < 3.11 fallback
    try:
        import tomli as tomllib
    except ImportError:
        tomllib = None

logger = logging.getLogger(__name__)

__version__ = "1.0.0"  # Fallback version
__all__ = ["get_version", "get_version_info", "__version__"]


def _read_pyproject_toml() -> Optional[Dict[str, Any]]:
    """Read pyproject.toml from the project root (app/core/version.py -> root)"""
    pyproject_path = Path(__file__).parent.parent.parent / "pyproject.toml"
    if not pyproject_path.exists():
        return None
    try:
        if tomllib is None:
            for line in pyproject_path.read_text(encoding="utf-8").splitlines():
                if line.strip().startswith("version = "):
                    return {"project": {"version": line.split("=")[1].strip().strip("\"'")}}
            return None
        with open(pyproject_path, "rb") as f:
            return tomllib.load(f)
    except (OSError, ValueError) as e:
        logger.warning(f"Could not read pyproject.toml: {e}")
        return None


def get_version() -> str:
    """Project version from pyproject.toml, else the packaged constant"""
    data = _read_pyproject_toml()
    if data and "version" in data.get("project", {}):
        return data["project"]["version"]
    return __version__


def get_version_info() -> Dict[str, Any]:
    info = {
        "version": get_version(),
        "python_version": f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}",
        "platform": sys.platform,
    }
    data = _read_pyproject_toml()
    if data and "project" in data:
        info["name"] = data["project"].get("name", "fedcme-sim")
        info["description"] = data["project"].get("description", "")
    return info
