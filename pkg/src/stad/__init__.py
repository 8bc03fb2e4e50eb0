"""State-space trackers for drifting class prototypes in embedding space."""

from .errors import StadError

__version__ = "0.1.0"

__all__ = ["StadError", "__version__"]
