from __future__ import annotations

import numpy as np
import pytest

from app.errors import OptiwingError
from app.geometry import thickness_distribution
from app.synthetic import DATASET_STATIONS, naca4_section, section_case, synthesize_cases


def test_naca_section_is_closed_with_nominal_thickness() -> None:
    section = naca4_section("0012", 129)

    assert section.n_points == 129
    assert section.is_closed()
    assert float(np.max(thickness_distribution(section))) == pytest.approx(0.12, rel=0.02)


def test_naca_section_rejects_bad_code() -> None:
    with pytest.raises(OptiwingError) as exc:
        naca4_section("24A2")
    assert exc.value.code == "invalid_airfoil_code"


def test_cases_are_seeded_and_valid() -> None:
    first = synthesize_cases(3, seed=4, n_points=65)
    again = synthesize_cases(3, seed=4, n_points=65)

    assert [case.case_id for case in first] == ["wing_0000", "wing_0001", "wing_0002"]
    for a, b in zip(first, again):
        assert a.condition == b.condition
        np.testing.assert_array_equal(a.optimized.slices[-1].coords, b.optimized.slices[-1].coords)
    for case in first:
        assert case.condition.in_bounds()
        assert 0.0 <= case.alpha_opt <= 10.0
        assert case.coefficients["optimized"].cl == case.condition.cl_con
        np.testing.assert_array_equal(case.initial.span_stations, DATASET_STATIONS)


def test_deformation_grows_toward_tip() -> None:
    case = synthesize_cases(1, seed=2, n_points=65)[0]
    root_change = np.abs(case.optimized.slices[0].coords - case.initial.slices[0].coords).max()
    tip_change = np.abs(case.optimized.slices[-1].coords - case.initial.slices[-1].coords).max()
    assert tip_change > root_change


def test_section_counterpart_keeps_airfoil_and_condition() -> None:
    case = synthesize_cases(1, seed=5, n_points=65)[0]

    airfoil = section_case(case, "airfoil_0000", np.random.default_rng(1))

    assert airfoil.initial.n_slices == 1
    assert airfoil.condition == case.condition
    assert airfoil.airfoil_id == case.airfoil_id
    np.testing.assert_allclose(airfoil.initial.slices[0].coords, case.initial.slices[0].coords)


def test_section_counterpart_is_deformed_in_2d() -> None:
    case = synthesize_cases(1, seed=5, n_points=65)[0]
    root = case.optimized.slices[0].coords

    airfoil = section_case(case, "airfoil_0000", np.random.default_rng(1))
    again = section_case(case, "airfoil_0000", np.random.default_rng(1))

    section = airfoil.optimized.slices[0]
    change = section.coords[:, 1] - root[:, 1]
    assert section.is_closed()
    assert np.abs(change).max() > 1e-3
    np.testing.assert_allclose(section.coords[:, 0], root[:, 0])
    np.testing.assert_allclose(change[[0, -1]], 0.0, atol=1e-12)
    np.testing.assert_array_equal(section.coords, again.optimized.slices[0].coords)


def test_case_count_must_be_positive() -> None:
    with pytest.raises(OptiwingError) as exc:
        synthesize_cases(0, seed=0)
    assert exc.value.code == "invalid_case_count"
