from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde, skew

from app.conditions import PARAMETER_BOUNDS
from app.dataset_io import WingCase
from app.errors import OptiwingError
from app.geometry import (
    CANONICAL_SPAN_STATIONS,
    HALF_SPAN,
    Section,
    WingGeometry,
    cosine_spacing,
    extrude,
    interpolate_stack,
    unshift,
)


SPAN_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)
CHORD_STATIONS = 100
FEATURE_POINTS = 192
LD_BINS = 5
KDE_POINTS = 128


@dataclass(frozen=True)
class PcaResult:
    explained_variance_ratio: np.ndarray
    cumulative: np.ndarray

    def n_for(self, threshold: float) -> int:
        """Fewest components whose cumulative explained variance reaches `threshold`."""
        if not 0.0 < threshold <= 1.0:
            raise OptiwingError("invalid_threshold", "Variance threshold must lie in (0, 1].")
        index = int(np.searchsorted(self.cumulative, threshold - 1e-12))
        return min(index + 1, self.cumulative.size)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "component": np.arange(1, self.cumulative.size + 1),
                "explained_variance_ratio": self.explained_variance_ratio,
                "cumulative": self.cumulative,
            }
        )


@dataclass(frozen=True)
class DifferenceProfile:
    span_stations: np.ndarray
    chord_stations: np.ndarray
    mean_abs_diff: np.ndarray
    std: np.ndarray
    quantity: str = "shape"

    def table(self) -> pd.DataFrame:
        span, chord = np.meshgrid(self.span_stations, self.chord_stations, indexing="ij")
        return pd.DataFrame(
            {
                "span": span.ravel(),
                "chord": chord.ravel(),
                "mean_abs_diff": self.mean_abs_diff.ravel(),
                "std": self.std.ravel(),
            }
        )


@dataclass
class AblationCurve:
    train_sizes: list[int]
    means: dict[str, list[float]]
    stds: dict[str, list[float]]
    repeats: int
    passes: int
    failures: list[dict[str, Any]] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        rows = []
        for index, size in enumerate(self.train_sizes):
            row: dict[str, Any] = {"train_size": size}
            for metric in self.means:
                row[f"{metric}_mean"] = self.means[metric][index]
                row[f"{metric}_std"] = self.stds[metric][index]
            rows.append(row)
        return pd.DataFrame(rows)


def pca_cumulative(data: np.ndarray) -> PcaResult:
    matrix = np.asarray(data, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise OptiwingError("degenerate_pca", "PCA needs a (cases, features) matrix with at least 2 cases.")
    centered = matrix - matrix.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    variance = singular**2
    total = variance.sum()
    if total == 0.0:
        raise OptiwingError("degenerate_pca", "All cases are identical; no variance to explain.")
    ratio = variance / total
    return PcaResult(explained_variance_ratio=ratio, cumulative=np.cumsum(ratio))


def _stack(wing: WingGeometry, stations: np.ndarray | None, n_points: int) -> WingGeometry:
    if stations is None:
        stations = CANONICAL_SPAN_STATIONS if wing.n_slices > 1 else wing.span_stations
    return interpolate_stack(wing, stations, n_points)


def geometry_features(
    wings: Sequence[WingGeometry],
    stations: np.ndarray | None = None,
    n_points: int = FEATURE_POINTS,
) -> np.ndarray:
    """Concatenated resampled slice coordinates, one row per wing."""
    return np.stack(
        [np.concatenate([s.coords.ravel() for s in _stack(wing, stations, n_points).slices]) for wing in wings]
    )


def pressure_features(
    wings: Sequence[WingGeometry],
    stations: np.ndarray | None = None,
    n_points: int = FEATURE_POINTS,
) -> np.ndarray:
    rows = []
    for wing in wings:
        if wing.pressure is None:
            raise OptiwingError("pressure_missing", "Pressure features need surface Cp on every wing.", status_code=422)
        rows.append(np.concatenate(_stack(wing, stations, n_points).pressure))
    return np.stack(rows)


def _surface_samples(section: Section, values: np.ndarray, chord: np.ndarray) -> np.ndarray:
    """Values sampled on upper and lower surfaces at chord fractions, shape (2, len(chord))."""
    le = int(np.argmin(section.coords[:-1, 0]))
    x_le = float(section.coords[:, 0].min())
    x_te = float(section.coords[:, 0].max())
    x = x_le + chord * (x_te - x_le)
    upper_x = section.coords[: le + 1, 0][::-1]
    upper_v = values[: le + 1][::-1]
    lower_x = section.coords[le:, 0]
    lower_v = values[le:]
    return np.stack([np.interp(x, upper_x, upper_v), np.interp(x, lower_x, lower_v)])


def _wing_samples(wing: WingGeometry, quantity: str, chord: np.ndarray) -> np.ndarray:
    if quantity == "shape":
        fields = [section.coords[:, 1] for section in wing.slices]
    elif quantity == "pressure":
        if wing.pressure is None:
            raise OptiwingError("pressure_missing", "Pressure differences need surface Cp.", status_code=422)
        fields = list(wing.pressure)
    else:
        raise OptiwingError("invalid_quantity", f"Unknown quantity {quantity!r}; use shape or pressure.")
    return np.stack([_surface_samples(s, v, chord) for s, v in zip(wing.slices, fields)])


def default_span_stations(half_span: float = HALF_SPAN) -> np.ndarray:
    return np.asarray(SPAN_FRACTIONS) * half_span


def aggregate_difference(
    pairs: Sequence[tuple[WingGeometry, WingGeometry]],
    span_stations: np.ndarray | None = None,
    chord_stations: np.ndarray | None = None,
    quantity: str = "shape",
    n_points: int = FEATURE_POINTS,
) -> DifferenceProfile:
    """Mean and std over pairs of |delta y| (or |delta Cp|), averaged over both surfaces."""
    if not pairs:
        raise OptiwingError("empty_pairs", "Aggregate differences need at least one pair.")
    span = default_span_stations() if span_stations is None else np.asarray(span_stations, dtype=float)
    chord = cosine_spacing(CHORD_STATIONS) if chord_stations is None else np.asarray(chord_stations, dtype=float)
    differences = []
    for first, second in pairs:
        if not np.isclose(first.span_stations[-1], second.span_stations[-1]) or not np.isclose(
            first.span_stations[0], second.span_stations[0]
        ):
            raise OptiwingError("misaligned_pair", "Paired wings must cover the same span.")
        a = _wing_samples(interpolate_stack(first, span, n_points), quantity, chord)
        b = _wing_samples(interpolate_stack(second, span, n_points), quantity, chord)
        differences.append(np.abs(a - b).mean(axis=1))
    stacked = np.stack(differences)
    return DifferenceProfile(
        span_stations=span,
        chord_stations=chord,
        mean_abs_diff=stacked.mean(axis=0),
        std=stacked.std(axis=0),
        quantity=quantity,
    )


def compare_2d_3d(
    pairs: Sequence[tuple[WingCase, WingCase]],
    span_stations: np.ndarray | None = None,
    chord_stations: np.ndarray | None = None,
) -> DifferenceProfile:
    """Each 2D optimized section extruded along its partner 3D wing, against that wing without dihedral."""
    wing_pairs = []
    for case2d, case3d in pairs:
        wing3d, _ = unshift(case3d.optimized)
        wing2d = extrude(case2d.optimized.slices[0], wing3d.span_stations, wing3d.half_span)
        wing_pairs.append((wing2d, wing3d))
    return aggregate_difference(wing_pairs, span_stations, chord_stations)


def ld_distribution(
    cases: Sequence[WingCase],
    axis: str,
    bins: Sequence[float] | int = LD_BINS,
) -> pd.DataFrame:
    """Per-bin L/D statistics for initial and optimized wings, binned along mach or reynolds."""
    if axis not in ("mach", "reynolds"):
        raise OptiwingError("invalid_axis", f"Bin axis must be mach or reynolds, got {axis!r}.")
    kept = [case for case in cases if case.has_initial_sim]
    if not kept:
        raise OptiwingError("no_cases", "No cases left after excluding failed initial simulations.")
    rows = []
    for case in kept:
        for role in ("initial", "optimized"):
            rows.append(
                {
                    "case_id": case.case_id,
                    "set": role,
                    axis: getattr(case.condition, axis),
                    "l_over_d": case.coefficients[role].l_over_d,
                }
            )
    frame = pd.DataFrame(rows)
    if isinstance(bins, int):
        low, high = PARAMETER_BOUNDS[axis]
        low = min(low, float(frame[axis].min()))
        high = max(high, float(frame[axis].max()))
        edges = np.linspace(low, high, bins + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    frame["bin"] = pd.cut(frame[axis], edges, include_lowest=True)
    summary = (
        frame.dropna(subset=["bin"])
        .groupby(["bin", "set"], observed=True)["l_over_d"]
        .agg(
            count="count",
            mean="mean",
            q25=lambda values: values.quantile(0.25),
            median="median",
            q75=lambda values: values.quantile(0.75),
        )
        .reset_index()
    )
    summary.insert(0, "bin_high", [float(interval.right) for interval in summary["bin"]])
    summary.insert(0, "bin_low", [float(interval.left) for interval in summary["bin"]])
    return summary.drop(columns="bin")


def run_ablation(
    sizes: Sequence[int],
    train_fn: Callable[[int, int], Any],
    eval_fn: Callable[[Any, int], dict[str, float]],
    repeats: int = 2,
    passes: int = 10,
    max_size: int | None = None,
) -> AblationCurve:
    """Train `repeats` models per size and average `passes` evaluations of each.

    A failed training run is recorded and skipped; the sweep goes on.
    """
    sizes = [int(size) for size in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise OptiwingError("invalid_sizes", "Ablation sizes must be non-empty and strictly increasing.")
    if max_size is not None and sizes[-1] > max_size:
        raise OptiwingError(
            "ablation_size_too_large",
            f"Largest size {sizes[-1]} exceeds the {max_size} available training cases.",
        )
    if repeats < 1 or passes < 1:
        raise OptiwingError("invalid_ablation", "Repeats and passes must be positive.")
    samples: list[dict[str, list[float]]] = []
    failures = []
    for size in sizes:
        collected: dict[str, list[float]] = {}
        for repeat in range(repeats):
            try:
                model = train_fn(size, repeat)
            except Exception as exc:  # noqa: BLE001
                failures.append({"train_size": size, "repeat": repeat, "error": f"{type(exc).__name__}: {exc}"})
                continue
            for pass_index in range(passes):
                for metric, value in eval_fn(model, pass_index).items():
                    collected.setdefault(metric, []).append(float(value))
        samples.append(collected)
    metrics = sorted({metric for collected in samples for metric in collected})
    means = {m: [float(np.mean(s[m])) if s.get(m) else float("nan") for s in samples] for m in metrics}
    stds = {m: [float(np.std(s[m])) if s.get(m) else float("nan") for s in samples] for m in metrics}
    return AblationCurve(
        train_sizes=sizes,
        means=means,
        stds=stds,
        repeats=repeats,
        passes=passes,
        failures=failures,
    )


def marginal_improvement_rate(curve: AblationCurve, metric: str) -> np.ndarray:
    """Percent improvement per added sample between consecutive sizes, relative to the smallest size."""
    if len(curve.train_sizes) < 2:
        raise OptiwingError("too_few_sizes", "Improvement rates need at least two sizes.")
    if metric not in curve.means:
        raise OptiwingError("unknown_metric", f"Curve has no metric {metric!r}.", status_code=404)
    values = np.asarray(curve.means[metric], dtype=float)
    baseline = values[0]
    if baseline == 0.0:
        raise OptiwingError("zero_baseline", "Smallest-size metric value is zero.")
    sizes = np.asarray(curve.train_sizes, dtype=float)
    return 100.0 * (values[:-1] - values[1:]) / (baseline * np.diff(sizes))


def fit_error_summary(mses: Sequence[float]) -> dict[str, Any]:
    """Distribution of per-section fit errors: quantiles, skewness and a log10-space density."""
    values = np.asarray(mses, dtype=float)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise OptiwingError("no_finite_fits", "No finite fit errors to summarize.", status_code=500)
    summary: dict[str, Any] = {
        "count": int(finite.size),
        "non_finite": int(values.size - finite.size),
        "mean": float(finite.mean()),
        "min": float(finite.min()),
        "max": float(finite.max()),
    }
    for label, q in (("q25", 0.25), ("median", 0.5), ("q75", 0.75), ("q95", 0.95)):
        summary[label] = float(np.quantile(finite, q))
    summary["skewness"] = float(skew(finite)) if finite.size > 2 and np.ptp(finite) > 0.0 else 0.0
    positive = finite[finite > 0.0]
    logs = np.log10(positive)
    if logs.size > 1 and np.ptp(logs) > 0.0:
        grid = np.linspace(logs.min(), logs.max(), KDE_POINTS)
        summary["log10_density"] = {"log10_mse": grid.tolist(), "density": gaussian_kde(logs)(grid).tolist()}
    else:
        summary["log10_density"] = {"log10_mse": [], "density": []}
    return summary
