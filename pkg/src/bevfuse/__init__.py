"""Camera/ultrasonic BEV fusion for near-field obstacle occupancy, at desk scale."""

from .errors import BevFuseError
from .geometry import BevGrid, GridSpec, Pose2D

__all__ = ["BevFuseError", "BevGrid", "GridSpec", "Pose2D"]
__version__ = "0.1.0"
