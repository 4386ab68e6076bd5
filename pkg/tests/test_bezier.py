from __future__ import annotations

import numpy as np
import pytest

from app.bezier import BezierLatent, decode, encode, encode_batch, evaluate
from app.errors import OptiwingError
from app.geometry import Section, resample_section
from app.synthetic import naca4_section


def smooth_latent(n_control: int = 30) -> BezierLatent:
    t = np.linspace(0.0, 1.0, n_control)
    points = np.column_stack([0.5 + 0.5 * np.cos(2.0 * np.pi * t), 0.08 * np.sin(2.0 * np.pi * t)])
    return BezierLatent(control_points=points, weights=np.ones(n_control))


def test_latent_rejects_non_positive_weights() -> None:
    with pytest.raises(OptiwingError) as exc:
        BezierLatent(control_points=np.zeros((3, 2)), weights=np.array([1.0, 0.0, 1.0]))
    assert exc.value.code == "non_positive_weight"


def test_constant_curve() -> None:
    latent = BezierLatent(
        control_points=np.tile([0.3, -0.2], (30, 1)),
        weights=np.random.default_rng(0).uniform(0.5, 2.0, 30),
    )
    np.testing.assert_allclose(evaluate(latent, np.linspace(0.0, 1.0, 11)), [[0.3, -0.2]] * 11, atol=1e-15)


def test_endpoints_interpolated() -> None:
    latent = BezierLatent(
        control_points=np.random.default_rng(1).normal(size=(30, 2)),
        weights=np.random.default_rng(2).uniform(0.5, 2.0, 30),
    )
    np.testing.assert_allclose(evaluate(latent, 0.0), latent.control_points[0], atol=1e-14)
    np.testing.assert_allclose(evaluate(latent, 1.0), latent.control_points[-1], atol=1e-14)


def test_collinear_points_stay_on_segment() -> None:
    rng = np.random.default_rng(4)
    s = np.sort(rng.uniform(0.0, 1.0, 30))
    latent = BezierLatent(control_points=np.column_stack([s, 2.0 * s]), weights=np.ones(30))

    curve = evaluate(latent, np.linspace(0.0, 1.0, 50))

    np.testing.assert_allclose(curve[:, 1], 2.0 * curve[:, 0], atol=1e-12)


def test_evaluate_rejects_parameters_outside_unit_interval() -> None:
    with pytest.raises(OptiwingError) as exc:
        evaluate(smooth_latent(), np.array([0.5, 1.2]))
    assert exc.value.code == "parameter_out_of_range"


def test_fit_recovers_generating_curve() -> None:
    latent = smooth_latent()
    params = np.linspace(0.0, 1.0, 200)
    section = Section(evaluate(latent, params))

    fitted, report = encode(section, params=params)

    assert report.mse < 1e-12
    np.testing.assert_array_equal(report.params, params)
    np.testing.assert_allclose(evaluate(fitted, params), section.coords, atol=1e-5)


def test_fit_straight_line_exactly() -> None:
    x = np.sort(np.random.default_rng(5).uniform(0.0, 1.0, 60))
    x[0], x[-1] = 0.0, 1.0
    line = Section(np.column_stack([x, 0.1 - 0.3 * x]))

    _, report = encode(line)

    assert report.mse < 1e-14


def test_decode_at_fitting_stations_reproduces_fit_error() -> None:
    section = resample_section(naca4_section("2412", 129), 96)

    latent, report = encode(section)
    decoded = decode(latent, section.n_points, params=report.params)

    assert np.mean((decoded.coords - section.coords) ** 2) == pytest.approx(report.mse, rel=1e-9, abs=1e-18)
    assert report.mse < 1e-5


def test_decode_degenerate_latent() -> None:
    latent = BezierLatent(control_points=np.tile([0.4, 0.1], (30, 1)), weights=np.ones(30))
    decoded = decode(latent, 16)
    np.testing.assert_allclose(decoded.coords, np.tile([0.4, 0.1], (16, 1)), atol=1e-15)


def test_decode_nested_stations() -> None:
    latent = smooth_latent()
    coarse = decode(latent, 64)
    fine = decode(latent, 253)
    np.testing.assert_allclose(fine.coords[::4], coarse.coords, atol=1e-12)


def test_decode_rejects_low_resolution() -> None:
    with pytest.raises(OptiwingError) as exc:
        decode(smooth_latent(), 4)
    assert exc.value.code == "section_resolution_too_low"


def test_feature_record_maps_back_to_latent() -> None:
    latent = BezierLatent(
        control_points=np.random.default_rng(6).normal(size=(30, 2)),
        weights=np.random.default_rng(7).uniform(0.5, 2.0, 30),
    )
    features = latent.to_features()
    restored = BezierLatent.from_features(features)

    assert features.shape == (90,)
    np.testing.assert_allclose(restored.weights, latent.weights, rtol=1e-14)
    np.testing.assert_array_equal(BezierLatent.from_vector(latent.to_vector()).control_points, latent.control_points)


def test_fit_follows_translation() -> None:
    section = resample_section(naca4_section("2412", 129), 96)
    offset = np.array([0.4, -0.25])

    latent, report = encode(section)
    moved, moved_report = encode(section.offset(dx=offset[0], dy=offset[1]))

    np.testing.assert_allclose(decode(moved, 200).coords, decode(latent, 200).coords + offset, atol=1e-5)
    np.testing.assert_allclose(moved.control_points[[0, -1]], latent.control_points[[0, -1]] + offset, atol=1e-12)
    assert moved_report.mse == pytest.approx(report.mse, rel=0.05, abs=1e-10)


def test_encode_batch_matches_serial_fits() -> None:
    sections = [resample_section(naca4_section(code, 129), 64) for code in ("0012", "4412")]

    serial = encode_batch(sections)
    threaded = encode_batch(sections, workers=2)

    for (a, _), (b, _) in zip(serial, threaded):
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())
