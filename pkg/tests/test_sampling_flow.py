from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from app.conditions import PARAMETER_BOUNDS
from app.errors import OptiwingError
from app.sampling_flow import (
    ParameterBounds,
    WallSpacingInputs,
    latin_hypercube,
    off_wall_distance,
    sample_conditions,
    skin_friction,
    sutherland_viscosity,
)


def test_lhs_single_sample_inside_bounds() -> None:
    bounds = ParameterBounds()
    sample = latin_hypercube(bounds, 1, seed=0)[0]
    assert np.all(sample >= np.array(bounds.lower))
    assert np.all(sample <= np.array(bounds.upper))


@pytest.mark.parametrize("n, seed", [(10, 0), (10, 7), (37, 3), (200, 11)])
def test_lhs_one_sample_per_stratum(n: int, seed: int) -> None:
    bounds = ParameterBounds()
    samples = latin_hypercube(bounds, n, seed)
    lower = np.array(bounds.lower)
    upper = np.array(bounds.upper)
    strata = np.floor((samples - lower) / (upper - lower) * n).astype(int)
    strata = np.clip(strata, 0, n - 1)
    for column in range(samples.shape[1]):
        assert sorted(strata[:, column].tolist()) == list(range(n))


def test_lhs_log_reynolds_stratifies_in_log_space() -> None:
    bounds = ParameterBounds(log_scale=frozenset({"reynolds"}))
    samples = latin_hypercube(bounds, 10, seed=2)
    strata = np.floor((np.log10(samples[:, 1]) - 6.0) * 10).astype(int)
    assert sorted(np.clip(strata, 0, 9).tolist()) == list(range(10))


def test_lhs_is_seeded() -> None:
    bounds = ParameterBounds()
    np.testing.assert_array_equal(latin_hypercube(bounds, 20, 5), latin_hypercube(bounds, 20, 5))
    assert not np.array_equal(latin_hypercube(bounds, 20, 5), latin_hypercube(bounds, 20, 6))


def test_sample_conditions_stay_in_table_bounds() -> None:
    for condition in sample_conditions(64, seed=1):
        assert condition.in_bounds()
    assert PARAMETER_BOUNDS["reynolds"] == (1.0e6, 1.0e7)


def test_lhs_rejects_empty_request() -> None:
    with pytest.raises(OptiwingError) as exc:
        latin_hypercube(ParameterBounds(), 0, seed=0)
    assert exc.value.code == "invalid_sample_count"


def test_bounds_validation() -> None:
    with pytest.raises(OptiwingError) as exc:
        ParameterBounds(names=("mach",), lower=(0.9,), upper=(0.4,))
    assert exc.value.code == "invalid_bounds"


def test_sutherland_reference_and_room_temperature() -> None:
    assert sutherland_viscosity(273.15) == pytest.approx(1.716e-5, rel=1e-12)
    assert sutherland_viscosity(300.0) == pytest.approx(1.84592e-5, rel=1e-5)


def test_sutherland_rejects_non_positive_temperature() -> None:
    with pytest.raises(OptiwingError) as exc:
        sutherland_viscosity(0.0)
    assert exc.value.code == "invalid_temperature"


def test_skin_friction_values() -> None:
    assert skin_friction(1e6) == pytest.approx((2.0 * 6.0 - 0.65) ** -2.3, rel=1e-12)
    assert skin_friction(1e6) == pytest.approx(3.7455e-3, rel=1e-4)
    assert skin_friction(1e8) == pytest.approx(1.869e-3, rel=1e-3)


def test_skin_friction_undefined_for_tiny_reynolds() -> None:
    with pytest.raises(OptiwingError) as exc:
        skin_friction(1.0)
    assert exc.value.code == "skin_friction_undefined"


def test_skin_friction_warns_outside_validity_range() -> None:
    with pytest.warns(RuntimeWarning, match="validity range"):
        skin_friction(1e4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        skin_friction(5e6)


def test_wall_spacing_reference_case() -> None:
    result = off_wall_distance(WallSpacingInputs(mach=0.5, reynolds=5e6, t_inf=300.0, l_ref=1.0, y_plus=1.0))

    assert result.a == pytest.approx(math.sqrt(1.4 * 287.0 * 300.0))
    assert result.u == pytest.approx(0.5 * result.a, rel=1e-15)
    assert result.delta == pytest.approx(5.28e-6, rel=5e-3)
    assert result.tau_w == pytest.approx(result.cf * 0.5 * result.rho * result.u**2, rel=1e-15)
    assert result.u_tau == pytest.approx(math.sqrt(result.tau_w / result.rho), rel=1e-15)


def test_wall_spacing_linear_in_y_plus() -> None:
    base = off_wall_distance(WallSpacingInputs(mach=0.7, reynolds=3e6, y_plus=1.0))
    double = off_wall_distance(WallSpacingInputs(mach=0.7, reynolds=3e6, y_plus=2.0))
    assert double.delta == pytest.approx(2.0 * base.delta, rel=1e-14)


def test_wall_spacing_shrinks_with_reynolds() -> None:
    deltas = [
        off_wall_distance(WallSpacingInputs(mach=0.6, reynolds=re)).delta
        for re in (1e6, 2e6, 5e6, 1e7)
    ]
    assert all(later < earlier for earlier, later in zip(deltas, deltas[1:]))


def test_wall_spacing_rejects_non_positive_inputs() -> None:
    with pytest.raises(OptiwingError) as exc:
        off_wall_distance(WallSpacingInputs(mach=0.0, reynolds=5e6))
    assert exc.value.code == "invalid_wall_spacing_input"
