"""Self-supervised one-shot localization toolkit for 3D volumes.

Trains a projection network to regress physical offsets between patches
of the same volume, then locates landmarks and organ bounding boxes in
unseen volumes from a single annotated support volume.
"""

__version__ = "0.1.0"

from .volgrid import BBox3D, Patch, Volume  # noqa: F401
