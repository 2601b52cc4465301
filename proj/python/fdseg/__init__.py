"""Feature-discrepancy segmentation kit (C++ core)."""

from ._fdseg import *  # noqa: F401,F403
from ._fdseg import __version__  # noqa: F401
