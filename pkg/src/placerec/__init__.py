"""Point-cloud place recognition on a numpy sparse-voxel engine."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("placerec")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
