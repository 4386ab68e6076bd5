from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import comb

from app.errors import OptiwingError
from app.geometry import Section, WingGeometry


CAGE_DIMS = (10, 2, 8)
MAX_DELTA_Y = 0.025
SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FFDCage:
    """Axis-aligned lattice of (x, y, eta) control points, indexed [i, j, k].

    i runs chordwise (0 = leading edge), j is lower (0) / upper (1), k runs spanwise.
    """

    control_points: np.ndarray
    dims: tuple[int, int, int]
    origin: np.ndarray
    extent: np.ndarray

    @property
    def n_variables(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def to_dict(self) -> dict[str, Any]:
        return {
            "dims": list(self.dims),
            "origin": self.origin.tolist(),
            "extent": self.extent.tolist(),
            "control_points": self.control_points.reshape(-1, 3).tolist(),
        }


@dataclass(frozen=True)
class Deformation:
    delta_y: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta_y", np.asarray(self.delta_y, dtype=float).ravel())

    def bound_violations(self, limit: float = MAX_DELTA_Y) -> np.ndarray:
        """Indices of control points whose displacement exceeds the allowed bound."""
        return np.flatnonzero(np.abs(self.delta_y) > limit)

    def within_bounds(self, limit: float = MAX_DELTA_Y) -> bool:
        return self.bound_violations(limit).size == 0

    def lattice(self, dims: tuple[int, int, int]) -> np.ndarray:
        return self.delta_y.reshape(dims)


@dataclass(frozen=True)
class EmbeddedPoints:
    points: np.ndarray
    params: np.ndarray
    dims: tuple[int, int, int]
    basis: tuple[np.ndarray, np.ndarray, np.ndarray]


def bernstein(n_control: int, u: np.ndarray) -> np.ndarray:
    """Bernstein basis of degree n_control - 1 evaluated at u, shape (len(u), n_control)."""
    u = np.asarray(u, dtype=float)[:, None]
    degree = n_control - 1
    k = np.arange(n_control)[None, :]
    return comb(degree, k) * u**k * (1.0 - u) ** (degree - k)


def _as_points(geometry: WingGeometry | np.ndarray) -> np.ndarray:
    if isinstance(geometry, WingGeometry):
        return geometry.points()
    points = np.asarray(geometry, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise OptiwingError(
            "invalid_points",
            f"Points must have shape (n, 3), got {points.shape}.",
        )
    return points


def build_cage(
    geometry: WingGeometry | np.ndarray,
    dims: tuple[int, int, int] = CAGE_DIMS,
    margin: float = 0.0,
) -> FFDCage:
    points = _as_points(geometry)
    lower = points.min(axis=0)
    upper = points.max(axis=0)
    extent = upper - lower
    if np.any(extent <= 0.0):
        raise OptiwingError(
            "degenerate_bounding_box",
            "Geometry bounding box has zero extent along at least one axis.",
        )
    if any(d < 2 for d in dims):
        raise OptiwingError("invalid_cage_dims", f"Cage needs at least 2 points per axis, got {dims}.")
    origin = lower - margin * extent
    extent = extent * (1.0 + 2.0 * margin)
    axes = [np.linspace(0.0, 1.0, d) for d in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    control_points = origin + grid * extent
    return FFDCage(
        control_points=control_points,
        dims=tuple(int(d) for d in dims),
        origin=origin,
        extent=extent,
    )


def embed(points: WingGeometry | np.ndarray, cage: FFDCage) -> EmbeddedPoints:
    """Parametric coordinates of points inside a uniform cage.

    A uniformly spaced lattice has linear precision, so the Bernstein map is affine and
    inverts in closed form.
    """
    points = _as_points(points)
    params = (points - cage.origin) / cage.extent
    tolerance = SNAP_TOLERANCE / cage.extent
    outside = np.any((params < -tolerance) | (params > 1.0 + tolerance), axis=1)
    if np.any(outside):
        raise OptiwingError(
            "point_outside_cage",
            f"{int(outside.sum())} points lie outside the FFD cage.",
            details={"first_index": int(np.flatnonzero(outside)[0])},
        )
    params = np.clip(params, 0.0, 1.0)
    basis = tuple(bernstein(d, params[:, axis]) for axis, d in enumerate(cage.dims))
    return EmbeddedPoints(points=points, params=params, dims=cage.dims, basis=basis)


def deform(embedded: EmbeddedPoints, cage: FFDCage, d: Deformation) -> np.ndarray:
    """Displace embedded points in y only; x and eta are returned untouched."""
    if d.delta_y.size != cage.n_variables or embedded.dims != cage.dims:
        raise OptiwingError(
            "deformation_dimension_mismatch",
            f"Expected {cage.n_variables} displacements for cage {cage.dims}, got {d.delta_y.size}.",
        )
    bu, bv, bw = embedded.basis
    displacement = np.einsum("ni,nj,nk,ijk->n", bu, bv, bw, d.lattice(cage.dims))
    deformed = embedded.points.copy()
    deformed[:, 1] = embedded.points[:, 1] + displacement
    return deformed


def shear_twist_residuals(d: Deformation, cage: FFDCage) -> tuple[np.ndarray, np.ndarray]:
    """Upper plus lower displacement at the TE and LE lattice columns, one value per span station.

    Zero means the column pair shears antisymmetrically.
    """
    lattice = d.lattice(cage.dims)
    te = lattice[-1, 1, :] + lattice[-1, 0, :]
    le = lattice[0, 1, :] + lattice[0, 0, :]
    return te, le


def deform_wing(wing: WingGeometry, cage: FFDCage, d: Deformation) -> WingGeometry:
    """Apply a y-only deformation to every slice of a wing."""
    deformed = deform(embed(wing, cage), cage, d)
    slices = []
    start = 0
    for section in wing.slices:
        stop = start + section.n_points
        slices.append(Section(deformed[start:stop, :2]))
        start = stop
    return wing.with_slices(slices)
