from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse.errors import UltrasonicError
from bevfuse.geometry import GridSpec, Pose2D
from bevfuse.ultrasonic import (
    EchoEnvelope,
    SensorLayout,
    UltrasonicFrame,
    UltrasonicSensor,
    attenuation_weight,
    default_rear_layout,
    effective_half_angle,
    fill_grid,
    fill_grid_oracle,
    sample_envelope,
    signalway_contribution,
)
from support import impulse_envelope, random_frame

SMALL = GridSpec(1.5, 1.5, 0.05)
REAR = Pose2D(0.0, 0.0, math.pi)


def single_sensor_layout() -> SensorLayout:
    return SensorLayout((UltrasonicSensor(0, REAR),), signalways=((0, 0),))


def test_attenuation_examples():
    h = math.radians(40)
    assert attenuation_weight(0.0, h) == 1.0
    assert attenuation_weight(h, h) == 0.0
    assert attenuation_weight(-h, h) == 0.0
    assert attenuation_weight(h / 2, h) == pytest.approx(0.75, abs=1e-15)
    assert attenuation_weight(1.2 * h, h) == 0.0


def test_attenuation_matches_scaled_beta_density():
    h = 0.7
    for a in np.linspace(-h, h, 21):
        x = 0.5 * (1 + a / h)
        beta22 = 6 * x * (1 - x)  # Beta(2,2) pdf
        assert attenuation_weight(a, h) == pytest.approx(beta22 / 1.5, abs=1e-12)


def test_attenuation_rejects_bad_half_angle():
    with pytest.raises(UltrasonicError):
        attenuation_weight(0.0, 0.0)


def test_sample_envelope_examples():
    env = EchoEnvelope(0, 0, np.array([0.0, 2.0, 4.0, 1.0]), 0.5)
    assert sample_envelope(env, 1.0) == 4.0
    assert sample_envelope(env, 1.5) == 1.0
    assert sample_envelope(env, 0.75) == pytest.approx(3.0)
    assert sample_envelope(env, 1.5001) == 0.0
    with pytest.raises(UltrasonicError):
        sample_envelope(env, -0.1)


def test_envelope_validation():
    with pytest.raises(UltrasonicError):
        EchoEnvelope(0, 0, np.array([1.0]))
    with pytest.raises(UltrasonicError):
        EchoEnvelope(0, 0, np.array([1.0, -1.0]))
    with pytest.raises(UltrasonicError):
        EchoEnvelope(0, 0, np.ones(1000), 0.02)


def test_effective_half_angle():
    lay = default_rear_layout()
    assert effective_half_angle(lay, 0.0) == pytest.approx(math.radians(65))
    assert effective_half_angle(lay, lay.max_range) == pytest.approx(math.radians(35))
    assert effective_half_angle(lay, lay.max_range / 2) == pytest.approx(math.radians(50))
    assert effective_half_angle(lay, 3 * lay.max_range) == pytest.approx(math.radians(35))


def test_default_layout_shape():
    lay = default_rear_layout()
    assert len(lay.sensors) == 6
    assert len(lay.signalways) == 8
    assert sum(a == b for a, b in lay.signalways) == 6


def test_layout_dict_round_trip():
    lay = default_rear_layout()
    assert SensorLayout.from_dict(lay.to_dict()) == lay


def test_zero_envelopes_give_zero_grid():
    lay = default_rear_layout()
    frame = UltrasonicFrame(0.0, tuple(EchoEnvelope(a, b, np.zeros(450)) for a, b in lay.signalways))
    assert not fill_grid(frame, lay, SMALL).data.any()
    assert not fill_grid_oracle(frame, lay, SMALL).data.any()


def test_unknown_sensor_id():
    lay = single_sensor_layout()
    frame = UltrasonicFrame(0.0, (impulse_envelope(0, 3, 2.0),))
    with pytest.raises(UltrasonicError):
        fill_grid(frame, lay, SMALL)
    with pytest.raises(UltrasonicError):
        fill_grid_oracle(frame, lay, SMALL)


def test_impulse_forms_arc_of_half_round_trip():
    spec = GridSpec(1.5, 1.5, 0.01)
    lay = single_sensor_layout()
    frame = UltrasonicFrame(0.0, (impulse_envelope(0, 0, 2.0),))
    g = fill_grid(frame, lay, spec).data[..., 0]
    centers = spec.cell_centers()
    r = np.hypot(centers[..., 0], centers[..., 1])
    hot = g > 0
    assert hot.any()
    assert np.all(np.abs(r[hot] - 1.0) < 0.01 + 1e-12)
    # The arc is brightest near the boresight (straight behind the sensor).
    alpha = np.abs(np.arctan2(centers[..., 1], -centers[..., 0]))
    assert g[alpha < math.radians(10)].max() > g[alpha > math.radians(30)].max()
    assert np.allclose(g, fill_grid_oracle(frame, lay, spec).data[..., 0], atol=1e-12)


def test_impulse_localisation_by_hand():
    # Sensor at the origin facing rearward; an echo at 1.2 m round trip sits 0.6 m behind it.
    spec = GridSpec(1.0, 1.0, 0.05)
    lay = single_sensor_layout()
    frame = UltrasonicFrame(0.0, (impulse_envelope(0, 0, 1.2, spacing=0.1, n=20),))
    g = fill_grid_oracle(frame, lay, spec).data[..., 0]
    # Cell (11, 19): centre 0.575 m behind, 0.025 m left.
    d = math.hypot(0.575, 0.025)
    tent = 1.0 - abs(2 * d - 1.2) / 0.1
    h = math.radians(65) - math.radians(30) * d / 4.5
    w = 1.0 - (math.atan2(0.025, 0.575) / h) ** 2
    assert g[11, 19] == pytest.approx(tent * w * w, abs=1e-12)
    # Columns 19 and 20 mirror each other about the boresight.
    assert g[11, 19] == pytest.approx(g[11, 20], abs=1e-12)
    assert g[0].max() == 0.0 and g[-1].max() == 0.0


def test_two_identical_signalways_double():
    lay = SensorLayout((UltrasonicSensor(0, REAR),), signalways=((0, 0), (0, 0)))
    env = impulse_envelope(0, 0, 1.5)
    one = fill_grid(UltrasonicFrame(0.0, (env,)), lay, SMALL).data
    two = fill_grid(UltrasonicFrame(0.0, (env, env)), lay, SMALL).data
    assert np.array_equal(two, 2 * one)


def test_locality_beyond_listening_window():
    lay = default_rear_layout()
    frame = random_frame(lay, np.random.default_rng(0), n=60)
    spec = GridSpec()
    g = fill_grid(frame, lay, spec).data[..., 0]
    centers = spec.cell_centers()
    reach = max(e.max_distance for e in frame.envelopes)
    far = np.ones(spec.shape, dtype=bool)
    for s in lay.sensors:
        d = np.hypot(centers[..., 0] - s.pose.x, centers[..., 1] - s.pose.y)
        far &= 2 * d > reach
    assert far.any()
    assert not g[far].any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_non_negative_and_bistatic_symmetric(seed):
    lay = default_rear_layout()
    rng = np.random.default_rng(seed)
    amps = rng.random(450)
    fwd = UltrasonicFrame(0.0, (EchoEnvelope(1, 2, amps),))
    rev = UltrasonicFrame(0.0, (EchoEnvelope(2, 1, amps),))
    a = fill_grid(fwd, lay, SMALL).data
    b = fill_grid(rev, lay, SMALL).data
    assert (a >= 0).all()
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.3, 4.0))
def test_attenuation_monotone_along_arc(rng_m):
    lay = single_sensor_layout()
    env = EchoEnvelope(0, 0, np.ones(450))
    alphas = np.linspace(0.0, math.radians(70), 60)
    pts = np.stack([-rng_m * np.cos(alphas), rng_m * np.sin(alphas)], axis=-1)
    vals = signalway_contribution(env, lay, pts)
    assert np.all(np.diff(vals) <= 1e-15)


def test_oracle_equivalence_few_frames():
    lay = default_rear_layout()
    rng = np.random.default_rng(42)
    spec = GridSpec(2.0, 2.0, 0.05)
    for _ in range(3):
        frame = random_frame(lay, rng)
        a = fill_grid(frame, lay, spec).data
        b = fill_grid_oracle(frame, lay, spec).data
        assert np.max(np.abs(a - b)) <= 1e-9
