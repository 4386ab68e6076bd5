from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import eigvalsh
from scipy.spatial.distance import cdist
from scipy.special import entr
from scipy.stats import spearmanr

from app.errors import OptiwingError
from app.geometry import WingGeometry, wing_volume


DEFAULT_GAMMAS = (0.5, 25.0, 50.0, 100.0)
EIGENVALUE_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    unbiased: bool = False

    def __post_init__(self) -> None:
        gammas = tuple(float(gamma) for gamma in self.gammas)
        if not gammas or any(gamma <= 0.0 for gamma in gammas):
            raise OptiwingError("invalid_kernel_config", "Kernel bandwidths must be a non-empty list of positive values.")
        object.__setattr__(self, "gammas", gammas)


@dataclass(frozen=True)
class MetricValue:
    mean: float
    std: float

    @classmethod
    def from_passes(cls, values: Sequence[float]) -> MetricValue:
        array = np.asarray(values, dtype=float)
        # Population std so a single pass reports exactly 0.
        return cls(mean=float(array.mean()), std=float(array.std()))


@dataclass(frozen=True)
class MetricReport:
    split: str
    passes: int
    mse_shape: MetricValue
    mmd_shape_spanwise_avg: MetricValue
    mse_alpha: MetricValue
    mmd_alpha: MetricValue
    vendi_spanwise_avg: MetricValue
    vendi_normalized: MetricValue
    vol_constraint_pct: MetricValue
    profiles: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def rows(self) -> list[dict[str, Any]]:
        """One row per metric, for tabular export."""
        return [
            {"split": self.split, "metric": name, "mean": value.mean, "std": value.std, "passes": self.passes}
            for name, value in (
                ("mse_shape", self.mse_shape),
                ("mmd_shape_spanwise_avg", self.mmd_shape_spanwise_avg),
                ("mse_alpha", self.mse_alpha),
                ("mmd_alpha", self.mmd_alpha),
                ("vendi_spanwise_avg", self.vendi_spanwise_avg),
                ("vendi_normalized", self.vendi_normalized),
                ("vol_constraint_pct", self.vol_constraint_pct),
            )
        ]


@dataclass(frozen=True)
class SpanwiseResult:
    average: float
    profile: np.ndarray


@dataclass(frozen=True)
class SpearmanResult:
    rho: float | None
    p_value: float | None
    defined: bool
    n: int


def _as_samples(samples: Any) -> np.ndarray:
    array = np.asarray(samples, dtype=float)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array[:, None]
    elif array.ndim > 2:
        array = array.reshape(array.shape[0], -1)
    return array


def gaussian_kernel(x: Any, y: Any, gamma: float) -> np.ndarray | float:
    """exp(-gamma * ||x - y||^2); scalar for two points, matrix for two sample sets."""
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.ndim <= 1 and y_arr.ndim <= 1:
        if x_arr.shape != y_arr.shape:
            raise OptiwingError("dimension_mismatch", f"Cannot compare shapes {x_arr.shape} and {y_arr.shape}.")
        return float(np.exp(-gamma * np.sum((x_arr - y_arr) ** 2)))
    xs, ys = _as_samples(x_arr), _as_samples(y_arr)
    if xs.shape[1] != ys.shape[1]:
        raise OptiwingError("dimension_mismatch", f"Feature sizes differ: {xs.shape[1]} vs {ys.shape[1]}.")
    return np.exp(-gamma * cdist(xs, ys, "sqeuclidean"))


def mmd2(p: Any, q: Any, gamma: float, unbiased: bool = False) -> float:
    """Squared MMD. The default V-statistic keeps the i == j terms, so mmd2(P, P) is exactly 0."""
    xs, ys = _as_samples(p), _as_samples(q)
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise OptiwingError("empty_sample_set", "MMD needs non-empty sample sets.")
    if xs.shape[1] != ys.shape[1]:
        raise OptiwingError("dimension_mismatch", f"Feature sizes differ: {xs.shape[1]} vs {ys.shape[1]}.")
    k_xx = gaussian_kernel(xs, xs, gamma)
    k_yy = gaussian_kernel(ys, ys, gamma)
    k_xy = gaussian_kernel(xs, ys, gamma)
    if unbiased:
        m, n = xs.shape[0], ys.shape[0]
        if m < 2 or n < 2:
            raise OptiwingError("empty_sample_set", "The unbiased estimator needs two samples per set.")
        term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
        term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
        value = term_xx + term_yy - 2.0 * k_xy.mean()
    else:
        value = k_xx.mean() + k_yy.mean() - 2.0 * k_xy.mean()
    return max(float(value), 0.0)


def mmd_avg(p: Any, q: Any, cfg: KernelConfig | None = None) -> float:
    cfg = cfg or KernelConfig()
    return float(np.mean([mmd2(p, q, gamma, unbiased=cfg.unbiased) for gamma in cfg.gammas]))


def vendi(samples: Any, gamma: float) -> float:
    """Effective number of distinct samples under a Gaussian kernel."""
    xs = _as_samples(samples)
    n = xs.shape[0]
    if n == 0:
        raise OptiwingError("empty_sample_set", "Vendi score needs at least one sample.")
    kernel = gaussian_kernel(xs, xs, gamma)
    kernel = 0.5 * (kernel + kernel.T)
    eigenvalues = np.clip(eigvalsh(kernel / n), 0.0, None)
    eigenvalues[eigenvalues < EIGENVALUE_FLOOR] = 0.0
    return float(np.exp(entr(eigenvalues).sum()))


def vendi_avg(samples: Any, cfg: KernelConfig | None = None) -> float:
    cfg = cfg or KernelConfig()
    return float(np.mean([vendi(samples, gamma) for gamma in cfg.gammas]))


def vendi_normalized(generated: Any, truth: Any, cfg: KernelConfig | None = None) -> float:
    return vendi_avg(generated, cfg) / vendi_avg(truth, cfg)


def volume_satisfaction(
    generated: Sequence[WingGeometry],
    initial: Sequence[WingGeometry],
    vmins: Sequence[float],
) -> float:
    if not len(generated) == len(initial) == len(vmins):
        raise OptiwingError(
            "length_mismatch",
            f"Got {len(generated)} generated, {len(initial)} initial wings and {len(vmins)} volume limits.",
        )
    if not generated:
        raise OptiwingError("empty_sample_set", "Volume satisfaction needs at least one design.")
    satisfied = [
        wing_volume(gen) / wing_volume(init) >= vmin
        for gen, init, vmin in zip(generated, initial, vmins)
    ]
    return 100.0 * float(np.mean(satisfied))


def mse(truth: Any, pred: Any) -> float:
    truth_arr = np.asarray(truth, dtype=float)
    pred_arr = np.asarray(pred, dtype=float)
    if truth_arr.shape != pred_arr.shape:
        raise OptiwingError("length_mismatch", f"Shapes differ: {truth_arr.shape} vs {pred_arr.shape}.")
    if truth_arr.size == 0:
        raise OptiwingError("empty_sample_set", "MSE needs at least one element.")
    return float(np.mean((truth_arr - pred_arr) ** 2))


def slice_features(wing: WingGeometry) -> np.ndarray:
    """Per-slice flattened coordinates, shape (slices, 2 * points)."""
    return np.stack([section.coords.ravel() for section in wing.slices])


def spanwise_average(
    metric: Callable[[np.ndarray, np.ndarray], float],
    generated: Sequence[WingGeometry],
    truth: Sequence[WingGeometry],
) -> SpanwiseResult:
    """Evaluate `metric(gen_slices, truth_slices)` at each slice index and average over the span.

    Each call receives the per-slice feature matrices of all wings, shape (wings, features).
    """
    if not generated or not truth:
        raise OptiwingError("empty_sample_set", "Spanwise metrics need wings on both sides.")
    n_slices = {wing.n_slices for wing in (*generated, *truth)}
    if len(n_slices) != 1:
        raise OptiwingError("slice_mismatch", f"Wings disagree on slice count: {sorted(n_slices)}.")
    gen_features = np.stack([slice_features(wing) for wing in generated])
    truth_features = np.stack([slice_features(wing) for wing in truth])
    profile = np.array(
        [metric(gen_features[:, k], truth_features[:, k]) for k in range(gen_features.shape[1])]
    )
    return SpanwiseResult(average=float(profile.mean()), profile=profile)


def spearman(inputs: Sequence[float], errors: Sequence[float]) -> SpearmanResult:
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(errors, dtype=float)
    if x.shape != y.shape:
        raise OptiwingError("length_mismatch", f"Got {x.size} inputs and {y.size} errors.")
    if x.size < 3:
        raise OptiwingError("too_few_samples", "Spearman correlation needs at least 3 cases.")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return SpearmanResult(rho=None, p_value=None, defined=False, n=int(x.size))
    result = spearmanr(x, y)
    return SpearmanResult(
        rho=float(result.statistic),
        p_value=float(result.pvalue),
        defined=True,
        n=int(x.size),
    )
