from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from app.conditions import ALPHA_BOUNDS, ALPHA_INIT, FlowCondition
from app.dataset_io import AeroCoefficients, DatasetIndex, WingCase, write_dataset
from app.errors import OptiwingError
from app.ffd import CAGE_DIMS, MAX_DELTA_Y, Deformation, bernstein, build_cage, deform_wing
from app.geometry import HALF_SPAN, Section, WingGeometry, cosine_spacing, extrude, offset_slices, unshift
from app.sampling_flow import sample_conditions


DATASET_STATIONS = np.linspace(0.0, HALF_SPAN, 10)
AIRFOIL_POOL = ("0012", "2412", "4412", "2410", "0010", "4415", "6409", "1408", "2415", "0015")
ASPECT_RATIO = 2.0 * HALF_SPAN
SECTION_POINTS = 129
MAX_DIHEDRAL = 0.05
SECTION_CONTROLS = 6


def _naca_params(code: str) -> tuple[float, float, float]:
    if len(code) != 4 or not code.isdigit():
        raise OptiwingError("invalid_airfoil_code", f"Expected a 4-digit NACA code, got {code!r}.")
    return int(code[0]) / 100.0, int(code[1]) / 10.0, int(code[2:]) / 100.0


def naca4_section(code: str | tuple[float, float, float], n: int = SECTION_POINTS) -> Section:
    """Closed NACA 4-digit section with a sharp trailing edge.

    Runs from the trailing edge over the upper surface to the leading edge and back
    along the lower surface, with cosine-clustered x.
    """
    m, p, t = _naca_params(code) if isinstance(code, str) else code
    n_upper = n // 2 + 1
    n_lower = n - n_upper + 1
    x_upper = cosine_spacing(n_upper)[::-1]
    x_lower = cosine_spacing(n_lower)

    def surface(x: np.ndarray, sign: float) -> np.ndarray:
        yt = 5.0 * t * (
            0.2969 * np.sqrt(x) - 0.1260 * x - 0.3516 * x**2 + 0.2843 * x**3 - 0.1036 * x**4
        )
        if m > 0.0 and p > 0.0:
            fore = x < p
            yc = np.where(fore, m / p**2 * (2 * p * x - x**2), m / (1 - p) ** 2 * (1 - 2 * p + 2 * p * x - x**2))
            slope = np.where(fore, 2 * m / p**2 * (p - x), 2 * m / (1 - p) ** 2 * (p - x))
        else:
            yc = np.zeros_like(x)
            slope = np.zeros_like(x)
        theta = np.arctan(slope)
        return np.column_stack([x - sign * yt * np.sin(theta), yc + sign * yt * np.cos(theta)])

    coords = np.vstack([surface(x_upper, 1.0), surface(x_lower, -1.0)[1:]])
    # Sharp TE: both surfaces end on the camber line at x = 1.
    coords[-1] = coords[0]
    return Section(coords)


def _lift_slope(mach: float) -> float:
    """Per-radian finite-wing lift slope with Prandtl-Glauert compressibility."""
    section_slope = 2.0 * math.pi / math.sqrt(1.0 - min(mach, 0.95) ** 2)
    return section_slope * ASPECT_RATIO / (ASPECT_RATIO + 2.0)


def _zero_lift_alpha(code: str) -> float:
    camber, _, _ = _naca_params(code)
    return -100.0 * camber


def _drag(cl: float, mach: float, thickness: float, rng: np.random.Generator) -> float:
    induced = cl**2 / (math.pi * 0.85 * ASPECT_RATIO)
    critical = 0.87 - thickness - 0.1 * cl
    wave = 20.0 * max(mach - critical, 0.0) ** 4
    return 0.008 + induced + wave + rng.uniform(0.0, 0.001)


def _surface_pressure(wing: WingGeometry, cl: float, mach: float) -> tuple[np.ndarray, ...]:
    compressibility = 1.0 / math.sqrt(1.0 - min(mach, 0.95) ** 2)
    fields = []
    for section, eta in zip(wing.slices, wing.span_stations):
        loading = cl * math.sqrt(max(1.0 - (eta / (1.02 * HALF_SPAN)) ** 2, 0.0))
        x = np.clip(section.coords[:, 0], 0.0, 1.0)
        le = int(np.argmin(section.coords[:, 0]))
        sign = np.where(np.arange(section.n_points) <= le, -1.0, 0.5)
        fields.append(compressibility * sign * loading * np.sqrt((1.0 - x) / (x + 0.01)))
    return tuple(fields)


def _deformation(rng: np.random.Generator, dims: tuple[int, int, int]) -> Deformation:
    nx, ny, nz = dims
    growth = (np.arange(nz) / (nz - 1)) ** 1.5
    lattice = rng.uniform(-1.0, 1.0, size=dims) * MAX_DELTA_Y * growth[None, None, :]
    # Zero residual at the TE and LE columns: upper moves opposite to lower.
    lattice[-1, 1, :] = -lattice[-1, 0, :]
    lattice[0, 1, :] = -lattice[0, 0, :]
    return Deformation(lattice.ravel())


def synthesize_case(
    case_id: str,
    condition: FlowCondition,
    airfoil: str,
    rng: np.random.Generator,
    n_points: int = SECTION_POINTS,
    stations: np.ndarray = DATASET_STATIONS,
) -> WingCase:
    section = naca4_section(airfoil, n_points)
    _, _, thickness = _naca_params(airfoil)
    initial = extrude(section, stations)
    cage = build_cage(initial, CAGE_DIMS)
    optimized = deform_wing(initial, cage, _deformation(rng, CAGE_DIMS))
    dihedral = rng.uniform(0.0, MAX_DIHEDRAL) * (np.asarray(stations) / HALF_SPAN) ** 2
    optimized = offset_slices(optimized, dihedral)

    slope = _lift_slope(condition.mach)
    alpha_zero = _zero_lift_alpha(airfoil)
    low, high = ALPHA_BOUNDS
    alpha_opt = float(np.clip(math.degrees(condition.cl_con / slope) + alpha_zero, low, high))
    cl_initial = slope * math.radians(ALPHA_INIT - alpha_zero)
    cd_initial = _drag(cl_initial, condition.mach, thickness, rng)
    cd_optimized = _drag(condition.cl_con, condition.mach, thickness, rng) * rng.uniform(0.8, 0.95)

    return WingCase(
        case_id=case_id,
        condition=condition,
        initial=WingGeometry(
            slices=initial.slices,
            span_stations=initial.span_stations,
            pressure=_surface_pressure(initial, cl_initial, condition.mach),
        ),
        optimized=WingGeometry(
            slices=optimized.slices,
            span_stations=optimized.span_stations,
            pressure=_surface_pressure(optimized, condition.cl_con, condition.mach),
        ),
        coefficients={
            "initial": AeroCoefficients(cl=cl_initial, cd=cd_initial),
            "optimized": AeroCoefficients(cl=condition.cl_con, cd=cd_optimized),
        },
        alpha_opt=alpha_opt,
        has_initial_sim=bool(rng.random() > 0.05),
        airfoil_id=f"naca{airfoil}",
    )


def _section_deformation(section: Section, rng: np.random.Generator) -> Section:
    """Smooth camber and thickness change of a closed section; LE and TE stay put."""
    coords = section.coords
    le = int(np.argmin(coords[:, 0]))
    chord = np.clip((coords[:, 0] - coords[le, 0]) / (coords[0, 0] - coords[le, 0]), 0.0, 1.0)
    basis = bernstein(SECTION_CONTROLS, chord)
    camber = rng.uniform(-1.0, 1.0, SECTION_CONTROLS) * MAX_DELTA_Y
    thickness = rng.uniform(-1.0, 1.0, SECTION_CONTROLS) * 0.25 * MAX_DELTA_Y
    camber[[0, -1]] = 0.0
    thickness[[0, -1]] = 0.0
    side = np.where(np.arange(len(coords)) <= le, 1.0, -1.0)
    moved = coords.copy()
    moved[:, 1] += basis @ camber + side * (basis @ thickness)
    return Section(moved)


def section_case(case: WingCase, case_id: str, rng: np.random.Generator) -> WingCase:
    """2D counterpart of a 3D case: root slices, dihedral removed, at z = 0.

    The optimized section gets its own 2D deformation of the root airfoil.
    """
    root_initial, _ = unshift(_root(case.initial))
    root_optimized, _ = unshift(_root(case.optimized))
    root_optimized = WingGeometry(
        slices=(_section_deformation(root_optimized.slices[0], rng),),
        span_stations=root_optimized.span_stations,
        pressure=root_optimized.pressure,
    )
    return WingCase(
        case_id=case_id,
        condition=case.condition,
        initial=root_initial,
        optimized=root_optimized,
        coefficients=case.coefficients,
        alpha_opt=case.alpha_opt,
        has_initial_sim=case.has_initial_sim,
        airfoil_id=case.airfoil_id,
    )


def _root(wing: WingGeometry) -> WingGeometry:
    return WingGeometry(
        slices=wing.slices[:1],
        span_stations=wing.span_stations[:1],
        pressure=None if wing.pressure is None else wing.pressure[:1],
    )


def synthesize_cases(
    n_cases: int,
    seed: int,
    n_points: int = SECTION_POINTS,
    airfoils: tuple[str, ...] = AIRFOIL_POOL,
) -> list[WingCase]:
    if n_cases < 1:
        raise OptiwingError("invalid_case_count", "A synthetic dataset needs at least one case.")
    conditions = sample_conditions(n_cases, seed)
    cases = []
    for number, condition in enumerate(conditions):
        rng = np.random.default_rng(np.random.SeedSequence([seed, number]))
        airfoil = airfoils[int(rng.integers(len(airfoils)))]
        cases.append(synthesize_case(f"wing_{number:04d}", condition, airfoil, rng, n_points))
    return cases


def write_synthetic_dataset(
    root: Path | str,
    n_cases: int,
    seed: int,
    dimensionality: str = "3D",
    n_points: int = SECTION_POINTS,
) -> DatasetIndex:
    """Write a desk-scale dataset; 2D and 3D variants from one seed share airfoils and conditions."""
    cases = synthesize_cases(n_cases, seed, n_points)
    if dimensionality == "2D":
        cases = [
            section_case(
                case,
                case.case_id.replace("wing_", "airfoil_"),
                np.random.default_rng(np.random.SeedSequence([seed, number, 2])),
            )
            for number, case in enumerate(cases)
        ]
    return write_dataset(Path(root), cases, dimensionality)
