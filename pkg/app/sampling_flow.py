from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from app.conditions import PARAMETER_BOUNDS, T_INF, FlowCondition
from app.errors import OptiwingError


GAS_CONSTANT = 287.0
HEAT_RATIO = 1.4
SUTHERLAND_MU0 = 1.716e-5
SUTHERLAND_T0 = 273.15
SUTHERLAND_S = 110.4
SKIN_FRICTION_VALID_RE = (1.0e5, 1.0e9)


@dataclass(frozen=True)
class ParameterBounds:
    names: tuple[str, ...] = tuple(PARAMETER_BOUNDS)
    lower: tuple[float, ...] = tuple(bounds[0] for bounds in PARAMETER_BOUNDS.values())
    upper: tuple[float, ...] = tuple(bounds[1] for bounds in PARAMETER_BOUNDS.values())
    log_scale: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not len(self.names) == len(self.lower) == len(self.upper):
            raise OptiwingError("invalid_bounds", "Names, lower and upper bounds must align.")
        for name, low, high in zip(self.names, self.lower, self.upper):
            if not low < high:
                raise OptiwingError("invalid_bounds", f"Lower bound of {name} must be below its upper bound.")
            if name in self.log_scale and low <= 0.0:
                raise OptiwingError("invalid_bounds", f"Log-uniform {name} needs a positive lower bound.")


@dataclass(frozen=True)
class WallSpacingInputs:
    mach: float
    reynolds: float
    t_inf: float = T_INF
    l_ref: float = 1.0
    y_plus: float = 1.0
    gas_constant: float = GAS_CONSTANT
    heat_ratio: float = HEAT_RATIO
    mu0: float = SUTHERLAND_MU0
    t0: float = SUTHERLAND_T0
    sutherland: float = SUTHERLAND_S


@dataclass(frozen=True)
class WallSpacingResult:
    a: float
    u: float
    mu: float
    rho: float
    cf: float
    tau_w: float
    u_tau: float
    delta: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def latin_hypercube(bounds: ParameterBounds, n: int, seed: int) -> np.ndarray:
    """One sample per equal-width stratum of every marginal, placed uniformly inside it.

    Parameters listed in `bounds.log_scale` are stratified in log10 space.
    """
    if n < 1:
        raise OptiwingError("invalid_sample_count", "Latin hypercube needs at least one sample.")
    sampler = qmc.LatinHypercube(d=len(bounds.names), scramble=True, seed=seed)
    unit = sampler.random(n)
    lower = np.array(bounds.lower, dtype=float)
    upper = np.array(bounds.upper, dtype=float)
    log_axes = np.array([name in bounds.log_scale for name in bounds.names])
    lower[log_axes] = np.log10(lower[log_axes])
    upper[log_axes] = np.log10(upper[log_axes])
    samples = qmc.scale(unit, lower, upper)
    samples[:, log_axes] = 10.0 ** samples[:, log_axes]
    return samples


def sample_conditions(n: int, seed: int, log_reynolds: bool = False) -> list[FlowCondition]:
    bounds = ParameterBounds(log_scale=frozenset({"reynolds"}) if log_reynolds else frozenset())
    return [
        FlowCondition(mach=row[0], reynolds=row[1], cl_con=row[2], vmin_frac=row[3])
        for row in latin_hypercube(bounds, n, seed).tolist()
    ]


def sutherland_viscosity(t: float, mu0: float = SUTHERLAND_MU0, t0: float = SUTHERLAND_T0, s: float = SUTHERLAND_S) -> float:
    if t <= 0.0:
        raise OptiwingError("invalid_temperature", "Temperature must be positive.")
    return mu0 * (t / t0) ** 1.5 * (t0 + s) / (t + s)


def skin_friction(re: float) -> float:
    """Prandtl-Schlichting turbulent flat-plate estimate."""
    base = 2.0 * math.log10(re) - 0.65 if re > 0.0 else -math.inf
    if base <= 0.0:
        raise OptiwingError(
            "skin_friction_undefined",
            "Reynolds number too low for the Prandtl-Schlichting correlation.",
        )
    low, high = SKIN_FRICTION_VALID_RE
    if not low <= re <= high:
        warnings.warn(
            f"Reynolds number {re:g} is outside the correlation's validity range [{low:g}, {high:g}].",
            RuntimeWarning,
            stacklevel=2,
        )
    return base**-2.3


def off_wall_distance(inputs: WallSpacingInputs) -> WallSpacingResult:
    """First-cell height reaching the target y+ for the given freestream."""
    for name in ("mach", "reynolds", "t_inf", "l_ref", "y_plus"):
        if getattr(inputs, name) <= 0.0:
            raise OptiwingError("invalid_wall_spacing_input", f"{name} must be positive.")
    a = math.sqrt(inputs.heat_ratio * inputs.gas_constant * inputs.t_inf)
    u = inputs.mach * a
    mu = sutherland_viscosity(inputs.t_inf, inputs.mu0, inputs.t0, inputs.sutherland)
    # Density closes Re = rho u L / mu.
    rho = inputs.reynolds * mu / (u * inputs.l_ref)
    cf = skin_friction(inputs.reynolds)
    tau_w = cf * 0.5 * rho * u**2
    u_tau = math.sqrt(tau_w / rho)
    delta = inputs.y_plus * mu / (rho * u_tau)
    return WallSpacingResult(a=a, u=u, mu=mu, rho=rho, cf=cf, tau_w=tau_w, u_tau=u_tau, delta=delta)
