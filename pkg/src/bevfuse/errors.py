"""Exception types shared across the package.

Every error carries a ``domain`` used by the CLI to print
``ERROR <domain>: <message>`` lines.
"""

from __future__ import annotations


class BevFuseError(Exception):
    domain = "bevfuse"


class GeometryError(BevFuseError, ValueError):
    domain = "geometry"


class CameraModelError(BevFuseError, ValueError):
    domain = "fisheye"


class ConvergenceError(CameraModelError):
    """Newton inversion of the distortion polynomial did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class UltrasonicError(BevFuseError, ValueError):
    domain = "ultrasonic"


class SyncError(BevFuseError, ValueError):
    domain = "sync"


class NetworkError(BevFuseError, ValueError):
    domain = "nn"


class ShapeError(NetworkError):
    """Tensor shapes are incompatible with the requested operation."""


class MetricsError(BevFuseError, ValueError):
    domain = "metrics"


class SimulationError(BevFuseError):
    domain = "sim"


class ConfigError(BevFuseError, ValueError):
    domain = "config"


class FormatError(BevFuseError, ValueError):
    domain = "io"
