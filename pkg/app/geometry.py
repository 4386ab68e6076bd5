from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import interp1d

from app.conditions import ALPHA_BOUNDS, FlowCondition
from app.errors import OptiwingError


CHORD = 1.0
HALF_SPAN = 2.5
CANONICAL_SLICES = 9
# Root included, tip excluded.
CANONICAL_SPAN_STATIONS = np.linspace(0.0, HALF_SPAN, CANONICAL_SLICES + 1)[:-1]
MIN_SECTION_POINTS = 8
CLOSURE_TOLERANCE = 1e-9
THICKNESS_STATIONS = 200
VOLUME_FRACTION_MAX = 1.2
THICKNESS_FRACTION_BOUNDS = (0.15, 3.0)
SHEAR_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Section:
    """Closed airfoil loop, counter-clockwise from the trailing edge, upper surface first."""

    coords: np.ndarray

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise OptiwingError(
                "invalid_section",
                f"Section coordinates must have shape (n, 2), got {coords.shape}.",
            )
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n_points(self) -> int:
        return int(self.coords.shape[0])

    def is_closed(self, tol: float = CLOSURE_TOLERANCE) -> bool:
        return bool(np.all(np.abs(self.coords[0] - self.coords[-1]) <= tol))

    def offset(self, dx: float = 0.0, dy: float = 0.0) -> Section:
        return Section(self.coords + np.array([dx, dy]))


@dataclass(frozen=True)
class WingGeometry:
    slices: tuple[Section, ...]
    span_stations: np.ndarray
    half_span: float = HALF_SPAN
    pressure: tuple[np.ndarray, ...] | None = None

    def __post_init__(self) -> None:
        stations = np.array(self.span_stations, dtype=float)
        slices = tuple(self.slices)
        if len(slices) != stations.shape[0]:
            raise OptiwingError(
                "span_station_mismatch",
                f"{len(slices)} slices but {stations.shape[0]} span stations.",
            )
        if stations.size > 1 and np.any(np.diff(stations) <= 0):
            raise OptiwingError(
                "span_stations_not_increasing",
                "Span stations must be strictly increasing.",
            )
        if stations.size and (stations[0] < 0.0 or stations[-1] > self.half_span + 1e-12):
            raise OptiwingError(
                "span_station_out_of_range",
                f"Span stations must lie in [0, {self.half_span}].",
            )
        if self.pressure is not None:
            pressure = tuple(np.array(values, dtype=float) for values in self.pressure)
            if len(pressure) != len(slices) or any(
                values.shape[0] != section.n_points for values, section in zip(pressure, slices)
            ):
                raise OptiwingError(
                    "pressure_shape_mismatch",
                    "Pressure must provide one value per slice point.",
                )
            object.__setattr__(self, "pressure", pressure)
        stations.setflags(write=False)
        object.__setattr__(self, "span_stations", stations)
        object.__setattr__(self, "slices", slices)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def points(self) -> np.ndarray:
        """All slice points as (x, y, eta) rows."""
        rows = [
            np.column_stack([section.coords, np.full(section.n_points, eta)])
            for section, eta in zip(self.slices, self.span_stations)
        ]
        return np.vstack(rows)

    def with_slices(self, slices: list[Section] | tuple[Section, ...]) -> WingGeometry:
        return WingGeometry(
            slices=tuple(slices),
            span_stations=self.span_stations,
            half_span=self.half_span,
            pressure=self.pressure,
        )


@dataclass(frozen=True)
class ConstraintReport:
    volume_fraction: float
    thickness_fractions: np.ndarray
    alpha: float
    te_shear_residual: np.ndarray | None = None
    le_shear_residual: np.ndarray | None = None
    satisfied: dict[str, bool | None] = field(default_factory=dict)

    def all_satisfied(self) -> bool:
        return all(flag for flag in self.satisfied.values() if flag is not None)


def cosine_spacing(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(np.pi * np.linspace(0.0, 1.0, n)))


def _open_loop(section: Section) -> np.ndarray:
    return section.coords[:-1] if section.is_closed() else section.coords


def _leading_edge_index(section: Section) -> int:
    return int(np.argmin(_open_loop(section)[:, 0]))


def split_surfaces(section: Section) -> tuple[np.ndarray, np.ndarray]:
    """Upper and lower surfaces, each ordered by increasing x and sharing the leading edge."""
    le = _leading_edge_index(section)
    upper = section.coords[: le + 1][::-1]
    lower = section.coords[le:]
    return upper, lower


def _redistribute(
    path: np.ndarray,
    m: int,
    values: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    segments = np.linalg.norm(np.diff(path, axis=0), axis=1)
    keep = np.concatenate([[True], segments > 0.0])
    path = path[keep]
    arc = np.concatenate([[0.0], np.cumsum(segments[segments > 0.0])])
    if values is not None:
        values = values[keep]
    if arc[-1] == 0.0:
        points = np.repeat(path[:1], m, axis=0)
        field_values = None if values is None else np.repeat(values[:1], m)
        return points, field_values
    targets = arc[-1] * cosine_spacing(m)
    points = np.column_stack(
        [np.interp(targets, arc, path[:, 0]), np.interp(targets, arc, path[:, 1])]
    )
    field_values = None if values is None else np.interp(targets, arc, values)
    return points, field_values


def resample_field(
    raw: Section,
    values: np.ndarray | None,
    n: int,
    smoothing: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[Section, np.ndarray | None]:
    """Resample a section, carrying a per-point field (e.g. Cp) along the same arc-length map."""
    if raw.n_points < 4:
        raise OptiwingError(
            "section_too_short",
            f"Resampling needs at least 4 points, got {raw.n_points}.",
        )
    if n < MIN_SECTION_POINTS:
        raise OptiwingError(
            "section_resolution_too_low",
            f"Resampled sections need at least {MIN_SECTION_POINTS} points, got {n}.",
        )
    coords = raw.coords
    perimeter = float(np.sum(np.linalg.norm(np.diff(coords, axis=0), axis=1)))
    if perimeter == 0.0:
        raise OptiwingError("degenerate_section", "Section has zero perimeter.")

    field_values = None if values is None else np.asarray(values, dtype=float)
    le = _leading_edge_index(raw)
    n_upper = n // 2 + 1
    n_lower = n - n_upper + 1
    upper, upper_field = _redistribute(
        coords[: le + 1], n_upper, None if field_values is None else field_values[: le + 1]
    )
    lower, lower_field = _redistribute(
        coords[le:], n_lower, None if field_values is None else field_values[le:]
    )
    resampled = np.vstack([upper, lower[1:]])
    if smoothing is not None:
        resampled = smoothing(resampled)
    if raw.is_closed():
        resampled[-1] = resampled[0]
    out_field = None
    if field_values is not None:
        out_field = np.concatenate([upper_field, lower_field[1:]])
    return Section(resampled), out_field


def resample_section(
    raw: Section,
    n: int,
    smoothing: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Section:
    """Cosine redistribution in arc length per surface.

    `smoothing` is applied to the redistributed points; None leaves them untouched.
    """
    section, _ = resample_field(raw, None, n, smoothing=smoothing)
    return section


def section_area(section: Section) -> float:
    if not section.is_closed():
        raise OptiwingError("open_section", "Area needs a closed section loop.")
    x = section.coords[:, 0]
    y = section.coords[:, 1]
    return float(0.5 * abs(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1])))


def wing_volume(wing: WingGeometry) -> float:
    if wing.n_slices < 2:
        raise OptiwingError(
            "too_few_slices",
            f"Volume integration needs at least 2 slices, got {wing.n_slices}.",
        )
    areas = np.array([section_area(section) for section in wing.slices])
    return float(trapezoid(areas, wing.span_stations))


def thickness_stations(n_stations: int = THICKNESS_STATIONS) -> np.ndarray:
    """Chord fractions cosine-spaced over [0.01, 0.99]."""
    return 0.01 + 0.98 * cosine_spacing(n_stations)


def thickness_distribution(
    section: Section,
    n_stations: int = THICKNESS_STATIONS,
    stations: np.ndarray | None = None,
) -> np.ndarray:
    """Upper minus lower y at chord fractions of the LE-TE extent; each surface is sorted by x first."""
    fractions = thickness_stations(n_stations) if stations is None else np.asarray(stations, dtype=float)
    if np.any(fractions < 0.0) or np.any(fractions > 1.0):
        raise OptiwingError(
            "station_outside_chord",
            "Thickness stations must be chord fractions in [0, 1].",
        )
    upper, lower = split_surfaces(section)
    x_le = float(np.min(section.coords[:, 0]))
    x_te = float(np.max(section.coords[:, 0]))
    x = x_le + fractions * (x_te - x_le)
    upper = upper[np.argsort(upper[:, 0], kind="stable")]
    lower = lower[np.argsort(lower[:, 0], kind="stable")]
    return np.interp(x, upper[:, 0], upper[:, 1]) - np.interp(x, lower[:, 0], lower[:, 1])


def _ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    ratio = np.full(numerator.shape, np.inf)
    nonzero = denominator != 0.0
    ratio[nonzero] = numerator[nonzero] / denominator[nonzero]
    ratio[~nonzero & (numerator == 0.0)] = 1.0
    return ratio


def check_constraints(
    initial: WingGeometry,
    candidate: WingGeometry,
    alpha: float,
    cond: FlowCondition,
    shear_residuals: tuple[np.ndarray, np.ndarray] | None = None,
    deformation_within_bounds: bool | None = None,
) -> ConstraintReport:
    """Evaluate the optimization constraints of a candidate against its initial wing.

    Shear residuals come from the FFD deformation when one is known; otherwise the
    shear constraints are reported as not applicable (None).
    """
    if initial.n_slices != candidate.n_slices:
        raise OptiwingError(
            "slice_mismatch",
            f"Initial has {initial.n_slices} slices, candidate has {candidate.n_slices}.",
        )
    volume_fraction = wing_volume(candidate) / wing_volume(initial)
    t_init = np.array([thickness_distribution(section) for section in initial.slices])
    t_candidate = np.array([thickness_distribution(section) for section in candidate.slices])
    fractions = _ratio(t_candidate, t_init)

    lower, upper = THICKNESS_FRACTION_BOUNDS
    satisfied: dict[str, bool | None] = {
        "volume": bool(cond.vmin_frac <= volume_fraction <= VOLUME_FRACTION_MAX),
        "thickness": bool(np.all((fractions >= lower) & (fractions <= upper))),
        "alpha": bool(ALPHA_BOUNDS[0] <= alpha <= ALPHA_BOUNDS[1]),
        "te_shear": None,
        "le_shear": None,
        "ffd_bounds": deformation_within_bounds,
    }
    te = le = None
    if shear_residuals is not None:
        te, le = (np.asarray(values, dtype=float) for values in shear_residuals)
        satisfied["te_shear"] = bool(np.all(np.abs(te) <= SHEAR_TOLERANCE))
        satisfied["le_shear"] = bool(np.all(np.abs(le) <= SHEAR_TOLERANCE))
    return ConstraintReport(
        volume_fraction=float(volume_fraction),
        thickness_fractions=fractions,
        alpha=float(alpha),
        te_shear_residual=te,
        le_shear_residual=le,
        satisfied=satisfied,
    )


def extrude(
    section: Section,
    span_stations: np.ndarray = CANONICAL_SPAN_STATIONS,
    half_span: float = HALF_SPAN,
) -> WingGeometry:
    stations = np.asarray(span_stations, dtype=float)
    return WingGeometry(
        slices=tuple(section for _ in stations),
        span_stations=stations,
        half_span=half_span,
    )


def interpolate_stack(
    wing: WingGeometry,
    stations: np.ndarray = CANONICAL_SPAN_STATIONS,
    n_points: int = 192,
) -> WingGeometry:
    """Resample every slice, then blend neighbouring slices linearly onto `stations`."""
    stations = np.asarray(stations, dtype=float)
    if stations.size and (
        stations[0] < wing.span_stations[0] - 1e-12 or stations[-1] > wing.span_stations[-1] + 1e-12
    ):
        raise OptiwingError(
            "station_outside_span",
            "Requested stations fall outside the wing's sliced span.",
        )
    resampled = [
        resample_field(
            section,
            None if wing.pressure is None else wing.pressure[index],
            n_points,
        )
        for index, section in enumerate(wing.slices)
    ]
    coords = np.stack([section.coords for section, _ in resampled])
    if wing.n_slices == 1:
        blended = np.repeat(coords, stations.size, axis=0)
    else:
        blended = interp1d(wing.span_stations, coords, axis=0, assume_sorted=True)(
            np.clip(stations, wing.span_stations[0], wing.span_stations[-1])
        )
    pressure = None
    if wing.pressure is not None:
        fields = np.stack([values for _, values in resampled])
        if wing.n_slices == 1:
            pressure = tuple(np.repeat(fields, stations.size, axis=0))
        else:
            pressure = tuple(
                interp1d(wing.span_stations, fields, axis=0, assume_sorted=True)(
                    np.clip(stations, wing.span_stations[0], wing.span_stations[-1])
                )
            )
    return WingGeometry(
        slices=tuple(Section(points) for points in blended),
        span_stations=stations,
        half_span=wing.half_span,
        pressure=pressure,
    )


def dihedral_offsets(wing: WingGeometry) -> np.ndarray:
    """Per-slice spanwise y offset, read at the trailing-edge point."""
    return np.array([section.coords[0, 1] for section in wing.slices])


def offset_slices(wing: WingGeometry, offsets: np.ndarray) -> WingGeometry:
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape[0] != wing.n_slices:
        raise OptiwingError(
            "offset_count_mismatch",
            f"{offsets.shape[0]} offsets for {wing.n_slices} slices.",
        )
    return wing.with_slices(
        [section.offset(dy=float(dy)) for section, dy in zip(wing.slices, offsets)]
    )


def unshift(wing: WingGeometry) -> tuple[WingGeometry, np.ndarray]:
    eta_y = dihedral_offsets(wing)
    return offset_slices(wing, -eta_y), eta_y
