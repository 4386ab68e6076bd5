from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from app.errors import OptiwingError


PARAMETER_BOUNDS: dict[str, tuple[float, float]] = {
    "mach": (0.4, 0.9),
    "reynolds": (1.0e6, 1.0e7),
    "cl_con": (0.5, 1.2),
    "vmin_frac": (0.75, 1.0),
}

ALPHA_BOUNDS = (0.0, 10.0)
ALPHA_INIT = 2.5
T_INF = 300.0


@dataclass(frozen=True)
class FlowCondition:
    mach: float
    reynolds: float
    cl_con: float
    vmin_frac: float

    def as_array(self) -> list[float]:
        return [self.mach, self.reynolds, self.cl_con, self.vmin_frac]

    def bounds_violations(self) -> list[str]:
        violations = []
        for name, (lower, upper) in PARAMETER_BOUNDS.items():
            value = getattr(self, name)
            if not lower <= value <= upper:
                violations.append(name)
        return violations

    def in_bounds(self) -> bool:
        return not self.bounds_violations()

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def condition_from_dict(payload: dict[str, Any]) -> FlowCondition:
    try:
        return FlowCondition(
            mach=float(payload["mach"]),
            reynolds=float(payload["reynolds"]),
            cl_con=float(payload["cl_con"]),
            vmin_frac=float(payload["vmin_frac"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise OptiwingError(
            "invalid_condition",
            "mach, reynolds, cl_con and vmin_frac are required numbers.",
        ) from exc
