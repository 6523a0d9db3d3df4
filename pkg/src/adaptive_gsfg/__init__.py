"""Adaptive generalized signal-flow graphs."""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("adaptive_gsfg")
except PackageNotFoundError:
    # If the package is not installed, use a development version
    __version__ = "0.0.0-dev"
