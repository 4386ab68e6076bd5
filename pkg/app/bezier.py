from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from app.errors import OptiwingError
from app.ffd import bernstein
from app.geometry import MIN_SECTION_POINTS, Section


N_CONTROL = 30
MAX_ITERATIONS = 200
FIT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class BezierLatent:
    control_points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = np.array(self.control_points, dtype=float)
        weights = np.array(self.weights, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or weights.shape != (points.shape[0],):
            raise OptiwingError(
                "invalid_latent",
                f"Expected (n, 2) control points and n weights, got {points.shape} and {weights.shape}.",
            )
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0.0):
            raise OptiwingError("non_positive_weight", "Bezier weights must be positive.")
        object.__setattr__(self, "control_points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def n_control(self) -> int:
        return int(self.weights.shape[0])

    def to_vector(self) -> np.ndarray:
        """Flat record: all x, then all y, then all weights."""
        return np.concatenate([self.control_points[:, 0], self.control_points[:, 1], self.weights])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> BezierLatent:
        x, y, w = np.split(np.asarray(vector, dtype=float), 3)
        return cls(control_points=np.column_stack([x, y]), weights=w)

    def to_features(self) -> np.ndarray:
        """Like to_vector, with log weights so any real vector maps back to a valid latent."""
        return np.concatenate(
            [self.control_points[:, 0], self.control_points[:, 1], np.log(self.weights)]
        )

    @classmethod
    def from_features(cls, features: np.ndarray) -> BezierLatent:
        x, y, log_w = np.split(np.asarray(features, dtype=float), 3)
        return cls(control_points=np.column_stack([x, y]), weights=np.exp(log_w))


@dataclass(frozen=True)
class FitReport:
    mse: float
    iterations: int
    converged: bool
    params: np.ndarray


def _rational_terms(
    control_points: np.ndarray,
    weights: np.ndarray,
    basis: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    weighted = basis * weights
    denominator = weighted.sum(axis=1)
    curve = weighted @ control_points / denominator[:, None]
    return weighted, denominator, curve


def evaluate(latent: BezierLatent, t: float | np.ndarray) -> np.ndarray:
    """Rational Bezier point(s): sum(B_i w_i P_i) / sum(B_i w_i)."""
    scalar = np.ndim(t) == 0
    params = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(params < 0.0) or np.any(params > 1.0):
        raise OptiwingError("parameter_out_of_range", "Bezier parameters must lie in [0, 1].")
    _, _, curve = _rational_terms(
        latent.control_points, latent.weights, bernstein(latent.n_control, params)
    )
    return curve[0] if scalar else curve


def chord_length_params(points: np.ndarray) -> np.ndarray:
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    if arc[-1] == 0.0:
        return np.linspace(0.0, 1.0, points.shape[0])
    return arc / arc[-1]


def _jacobian_blocks(
    control_points: np.ndarray,
    weights: np.ndarray,
    basis: np.ndarray,
) -> np.ndarray:
    weighted, denominator, curve = _rational_terms(control_points, weights, basis)
    m, n = basis.shape
    share = weighted / denominator[:, None]
    d_points = np.zeros((m, 2, n - 2, 2))
    d_points[:, 0, :, 0] = share[:, 1:-1]
    d_points[:, 1, :, 1] = share[:, 1:-1]
    # d/d(log w_i) = w_i B_i (P_i - C) / D
    d_log_weights = share[:, None, :] * (control_points.T[None, :, :] - curve[:, :, None])
    return np.hstack([d_points.reshape(2 * m, 2 * (n - 2)), d_log_weights.reshape(2 * m, n)])


def encode(
    section: Section,
    n_control: int = N_CONTROL,
    params: np.ndarray | None = None,
    max_iterations: int = MAX_ITERATIONS,
    tolerance: float = FIT_TOLERANCE,
) -> tuple[BezierLatent, FitReport]:
    """Least-squares fit of a rational Bezier curve to section coordinates.

    End control points are pinned to the first and last section points; the interior
    control points and log-weights are fitted with Levenberg-Marquardt at fixed
    parameter stations (chord-length unless `params` is given).
    """
    anchor = section.coords[0].copy()
    points = section.coords - anchor
    m = points.shape[0]
    arc = chord_length_params(points)
    t = arc if params is None else np.asarray(params, dtype=float)
    if t.shape != (m,) or np.any(t < 0.0) or np.any(t > 1.0):
        raise OptiwingError(
            "invalid_parameters",
            "Parameter stations must be one value in [0, 1] per section point.",
        )
    basis = bernstein(n_control, t)

    first, last = points[0], points[-1]
    subsample = np.linspace(0.0, 1.0, n_control)
    initial = np.column_stack(
        [np.interp(subsample, arc, points[:, 0]), np.interp(subsample, arc, points[:, 1])]
    )
    # Unit weights make the control-point block linear: take its exact Gauss-Newton step.
    rhs = points - np.outer(basis[:, 0], first) - np.outer(basis[:, -1], last)
    interior, *_ = np.linalg.lstsq(basis[:, 1:-1], rhs, rcond=None)
    if np.all(np.isfinite(interior)):
        initial[1:-1] = interior

    def unpack(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        control = np.vstack([first, x[: 2 * (n_control - 2)].reshape(-1, 2), last])
        return control, np.exp(x[2 * (n_control - 2):])

    def residuals(x: np.ndarray) -> np.ndarray:
        control, weights = unpack(x)
        _, _, curve = _rational_terms(control, weights, basis)
        return (curve - points).ravel()

    def jacobian(x: np.ndarray) -> np.ndarray:
        control, weights = unpack(x)
        return _jacobian_blocks(control, weights, basis)

    x0 = np.concatenate([initial[1:-1].ravel(), np.zeros(n_control)])
    method = "lm" if 2 * m >= x0.size else "trf"
    result = least_squares(
        residuals,
        x0,
        jac=jacobian,
        method=method,
        ftol=tolerance,
        xtol=1e-15,
        gtol=1e-15,
        max_nfev=max_iterations,
    )
    control, weights = unpack(result.x)
    final = residuals(result.x)
    mse = float(np.mean(final**2))
    converged = bool(result.status > 0 and np.isfinite(mse))
    latent = BezierLatent(control_points=control + anchor, weights=weights)
    return latent, FitReport(mse=mse, iterations=int(result.nfev), converged=converged, params=t)


def decode(latent: BezierLatent, n: int, params: np.ndarray | None = None) -> Section:
    """Sample a latent at `params`, or at n uniform stations when none are given."""
    if n < MIN_SECTION_POINTS:
        raise OptiwingError(
            "section_resolution_too_low",
            f"Decoding needs at least {MIN_SECTION_POINTS} points, got {n}.",
        )
    t = np.linspace(0.0, 1.0, n) if params is None else np.asarray(params, dtype=float)
    if t.shape != (n,):
        raise OptiwingError("invalid_parameters", f"Expected {n} parameter stations.")
    return Section(evaluate(latent, t))


def encode_batch(
    sections: list[Section],
    workers: int = 1,
    **kwargs: object,
) -> list[tuple[BezierLatent, FitReport]]:
    if workers <= 1:
        return [encode(section, **kwargs) for section in sections]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda section: encode(section, **kwargs), sections))
