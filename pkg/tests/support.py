"""Shared seeded fixtures and independent reference computations for the tests."""

from __future__ import annotations

import math

import numpy as np

from bevfuse.errors import CameraModelError
from bevfuse.fisheye import FisheyeIntrinsics
from bevfuse.ultrasonic import EchoEnvelope, SensorLayout, UltrasonicFrame


def random_intrinsics(seed: int) -> FisheyeIntrinsics:
    """640x480 fisheye whose whole image lies inside the valid lens disc; all k nonzero."""
    rng = np.random.default_rng(seed)
    while True:
        f = rng.uniform(240.0, 320.0)
        k = (rng.uniform(0.01, 0.05) * rng.choice([-1, 1]),
             rng.uniform(0.002, 0.01) * rng.choice([-1, 1]),
             rng.uniform(2e-4, 1e-3) * rng.choice([-1, 1]),
             rng.uniform(2e-5, 1e-4) * rng.choice([-1, 1]))
        try:
            intr = FisheyeIntrinsics(f, f * rng.uniform(0.98, 1.02), 319.5 + rng.uniform(-4, 4),
                                     239.5 + rng.uniform(-4, 4), k, 640, 480)
        except CameraModelError:
            continue
        corners = [math.hypot((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy) for u in (0, 639) for v in (0, 479)]
        if max(corners) < intr.r_max:
            return intr


def polynomial(theta: float, k) -> float:
    """d(theta) evaluated term by term."""
    return theta + k[0] * theta ** 3 + k[1] * theta ** 5 + k[2] * theta ** 7 + k[3] * theta ** 9


def random_frame(layout: SensorLayout, rng: np.random.Generator, n: int = 450) -> UltrasonicFrame:
    envs = []
    for e, r in layout.signalways:
        amps = rng.random(n) * (rng.random(n) < 0.3)
        envs.append(EchoEnvelope(e, r, amps))
    return UltrasonicFrame(0.0, tuple(envs))


def impulse_envelope(e: int, r: int, round_trip: float, spacing: float = 0.02, n: int = 450) -> EchoEnvelope:
    amps = np.zeros(n)
    amps[int(round(round_trip / spacing))] = 1.0
    return EchoEnvelope(e, r, amps, spacing)


def deg(x: float) -> float:
    return math.radians(x)
