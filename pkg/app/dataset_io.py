from __future__ import annotations

import json
import warnings
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from app.conditions import ALPHA_BOUNDS, FlowCondition, condition_from_dict
from app.errors import OptiwingError
from app.geometry import HALF_SPAN, Section, WingGeometry


SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
CASES_DIR = "cases"
SLICE_COLUMNS = ("slice", "x", "y", "z", "cp")
FLOAT_FORMAT = "%.17g"
DIMENSIONALITIES = ("2D", "3D")


@dataclass(frozen=True)
class AeroCoefficients:
    cl: float
    cd: float

    def __post_init__(self) -> None:
        if not self.cd > 0.0:
            raise OptiwingError("invalid_coefficients", f"Drag coefficient must be positive, got {self.cd}.")

    @property
    def l_over_d(self) -> float:
        return self.cl / self.cd

    def to_dict(self) -> dict[str, float]:
        return {"cl": self.cl, "cd": self.cd, "l_over_d": self.l_over_d}


@dataclass(frozen=True)
class CaseDescriptor:
    case_id: str
    dimensionality: str
    condition: FlowCondition
    has_initial_sim: bool
    airfoil_id: str
    alpha_opt: float
    coefficients: dict[str, AeroCoefficients]
    files: dict[str, str]
    bounds_violations: tuple[str, ...] = ()

    @property
    def in_bounds(self) -> bool:
        return not self.bounds_violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "dimensionality": self.dimensionality,
            "airfoil_id": self.airfoil_id,
            "condition": self.condition.to_dict(),
            "alpha_opt": self.alpha_opt,
            "has_initial_sim": self.has_initial_sim,
            "coefficients": {
                name: {"cl": coeffs.cl, "cd": coeffs.cd} for name, coeffs in self.coefficients.items()
            },
            "files": dict(self.files),
        }


@dataclass(frozen=True)
class SkipRecord:
    case_id: str
    reason: str


@dataclass(frozen=True)
class DatasetIndex:
    root_path: Path
    cases: tuple[CaseDescriptor, ...]
    skipped: tuple[SkipRecord, ...] = ()
    dimensionality: str = "3D"

    def ids(self) -> list[str]:
        return [case.case_id for case in self.cases]

    def get(self, case_id: str) -> CaseDescriptor:
        for case in self.cases:
            if case.case_id == case_id:
                return case
        raise OptiwingError("case_not_found", f"Case {case_id!r} is not in the index.", status_code=404)

    def report(self) -> dict[str, Any]:
        return {
            "root": str(self.root_path),
            "dimensionality": self.dimensionality,
            "n_cases": len(self.cases),
            "n_skipped": len(self.skipped),
            "skipped": [asdict(record) for record in self.skipped],
            "out_of_bounds": {
                case.case_id: list(case.bounds_violations) for case in self.cases if case.bounds_violations
            },
        }


@dataclass(frozen=True)
class WingCase:
    case_id: str
    condition: FlowCondition
    initial: WingGeometry
    optimized: WingGeometry
    coefficients: dict[str, AeroCoefficients]
    alpha_opt: float
    has_initial_sim: bool = True
    airfoil_id: str = ""

    def __post_init__(self) -> None:
        if self.initial.n_slices != self.optimized.n_slices or not np.array_equal(
            self.initial.span_stations, self.optimized.span_stations
        ):
            raise OptiwingError(
                "case_geometry_mismatch",
                f"Case {self.case_id}: initial and optimized wings must share span stations.",
                status_code=422,
            )
        low, high = ALPHA_BOUNDS
        if not low <= self.alpha_opt <= high:
            raise OptiwingError(
                "alpha_out_of_range",
                f"Case {self.case_id}: alpha {self.alpha_opt} outside [{low}, {high}] degrees.",
                status_code=422,
            )


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def ids_for(self, split: str) -> tuple[str, ...]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[split]
        except KeyError as exc:
            raise OptiwingError("unknown_split", f"Unknown split {split!r}.", status_code=404) from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> SplitAssignment:
        try:
            return cls(
                train_ids=tuple(payload["train"]),
                val_ids=tuple(payload["val"]),
                test_ids=tuple(payload["test"]),
                seed=int(payload["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise OptiwingError("split_corrupt", "Split file cannot be parsed.", status_code=422) from exc


@dataclass(frozen=True)
class UnmatchedCase:
    case_id: str
    dimensionality: str
    reason: str


@dataclass(frozen=True)
class PairingResult:
    pairs: tuple[tuple[str, str], ...]
    unmatched: tuple[UnmatchedCase, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pairs": [list(pair) for pair in self.pairs],
            "unmatched": [asdict(record) for record in self.unmatched],
        }


def _read_manifest(root: Path) -> dict[str, Any] | None:
    path = root / MANIFEST_NAME
    if not path.exists():
        return None
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        version = data["schema_version"]
        entries = data["cases"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise OptiwingError(
            "manifest_unreadable",
            f"Manifest {path} cannot be parsed.",
            status_code=422,
        ) from exc
    if version != SCHEMA_VERSION or not isinstance(entries, list):
        raise OptiwingError(
            "manifest_unreadable",
            f"Manifest schema version {version!r} is not supported.",
            status_code=422,
        )
    return data


def read_slices(path: Path, half_span: float = HALF_SPAN) -> WingGeometry:
    """Parse a columnar slice file into a wing; slices keep their file order."""
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [column for column in ("slice", "x", "y", "z") if column not in frame.columns]
    if missing:
        raise ValueError(f"missing columns {missing}")
    if frame.empty:
        raise ValueError("no slice rows")
    if not np.isfinite(frame[["x", "y", "z"]].to_numpy(dtype=float)).all():
        raise ValueError("non-finite coordinates")
    slices = []
    stations = []
    pressure = []
    has_pressure = "cp" in frame.columns and frame["cp"].notna().all()
    for _, group in frame.groupby("slice", sort=True):
        slices.append(Section(group[["x", "y"]].to_numpy(dtype=float)))
        stations.append(float(group["z"].iloc[0]))
        if has_pressure:
            pressure.append(group["cp"].to_numpy(dtype=float))
    return WingGeometry(
        slices=tuple(slices),
        span_stations=np.asarray(stations),
        half_span=half_span,
        pressure=tuple(pressure) if has_pressure else None,
    )


def write_slices(path: Path, wing: WingGeometry) -> None:
    frames = []
    for index, (section, station) in enumerate(zip(wing.slices, wing.span_stations)):
        frames.append(
            pd.DataFrame(
                {
                    "slice": index,
                    "x": section.coords[:, 0],
                    "y": section.coords[:, 1],
                    "z": station,
                    "cp": np.nan if wing.pressure is None else wing.pressure[index],
                }
            )
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _parse_entry(entry: dict[str, Any], dimensionality: str) -> CaseDescriptor:
    coefficients = {
        name: AeroCoefficients(cl=float(values["cl"]), cd=float(values["cd"]))
        for name, values in entry.get("coefficients", {}).items()
    }
    condition = condition_from_dict(entry["condition"])
    return CaseDescriptor(
        case_id=str(entry["case_id"]),
        dimensionality=str(entry.get("dimensionality", dimensionality)),
        condition=condition,
        has_initial_sim=bool(entry.get("has_initial_sim", True)),
        airfoil_id=str(entry.get("airfoil_id", "")),
        alpha_opt=float(entry["alpha_opt"]),
        coefficients=coefficients,
        files={str(name): str(value) for name, value in entry["files"].items()},
        bounds_violations=tuple(condition.bounds_violations()),
    )


def _check_entry(root: Path, entry: Any, dimensionality: str) -> CaseDescriptor | SkipRecord:
    case_id = str(entry.get("case_id", "<unknown>")) if isinstance(entry, dict) else "<unknown>"
    try:
        descriptor = _parse_entry(entry, dimensionality)
        for role in ("initial", "optimized"):
            if role not in descriptor.files:
                raise ValueError(f"no {role} geometry file listed")
        _build_case(root, descriptor)
    except OptiwingError as exc:
        return SkipRecord(case_id=case_id, reason=exc.message)
    except (KeyError, TypeError, ValueError, OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        return SkipRecord(case_id=case_id, reason=f"{type(exc).__name__}: {exc}")
    return descriptor


def load_manifest(root: Path | str, workers: int = 1) -> DatasetIndex:
    """Index every parseable case under `root`; malformed cases are listed in `skipped`."""
    root = Path(root)
    if not root.is_dir():
        raise OptiwingError("data_root_not_found", f"Data root {root} does not exist.", status_code=404)
    data = _read_manifest(root)
    if data is None:
        return DatasetIndex(root_path=root, cases=())
    dimensionality = str(data.get("dimensionality", "3D"))
    entries = data["cases"]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda entry: _check_entry(root, entry, dimensionality), entries))
    else:
        results = [_check_entry(root, entry, dimensionality) for entry in entries]

    cases: list[CaseDescriptor] = []
    skipped: list[SkipRecord] = []
    seen: set[str] = set()
    for result in results:
        if isinstance(result, SkipRecord):
            skipped.append(result)
        elif result.case_id in seen:
            skipped.append(SkipRecord(case_id=result.case_id, reason="duplicate case_id"))
        else:
            seen.add(result.case_id)
            cases.append(result)
    flagged = [case.case_id for case in cases if case.bounds_violations]
    if flagged:
        warnings.warn(
            f"{len(flagged)} cases have conditions outside the sampled bounds: {', '.join(flagged[:5])}",
            RuntimeWarning,
            stacklevel=2,
        )
    return DatasetIndex(
        root_path=root,
        cases=tuple(cases),
        skipped=tuple(skipped),
        dimensionality=dimensionality,
    )


def _build_case(root: Path, descriptor: CaseDescriptor) -> WingCase:
    half_span = 0.0 if descriptor.dimensionality == "2D" else HALF_SPAN
    return WingCase(
        case_id=descriptor.case_id,
        condition=descriptor.condition,
        initial=read_slices(root / descriptor.files["initial"], half_span),
        optimized=read_slices(root / descriptor.files["optimized"], half_span),
        coefficients=descriptor.coefficients,
        alpha_opt=descriptor.alpha_opt,
        has_initial_sim=descriptor.has_initial_sim,
        airfoil_id=descriptor.airfoil_id,
    )


def load_case(index: DatasetIndex, case_id: str) -> WingCase:
    descriptor = index.get(case_id)
    try:
        return _build_case(index.root_path, descriptor)
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise OptiwingError(
            "case_unreadable",
            f"Case {case_id} cannot be read: {exc}",
            status_code=422,
        ) from exc


def load_cases(index: DatasetIndex, case_ids: Iterable[str] | None = None, workers: int = 1) -> list[WingCase]:
    ids = list(index.ids() if case_ids is None else case_ids)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda case_id: load_case(index, case_id), ids))
    return [load_case(index, case_id) for case_id in ids]


def write_case(root: Path, case: WingCase, dimensionality: str = "3D") -> dict[str, Any]:
    """Write a case's slice files and return its manifest entry."""
    files = {role: f"{CASES_DIR}/{case.case_id}_{role}.csv" for role in ("initial", "optimized")}
    write_slices(root / files["initial"], case.initial)
    write_slices(root / files["optimized"], case.optimized)
    return {
        "case_id": case.case_id,
        "dimensionality": dimensionality,
        "airfoil_id": case.airfoil_id,
        "condition": case.condition.to_dict(),
        "alpha_opt": case.alpha_opt,
        "has_initial_sim": case.has_initial_sim,
        "coefficients": {name: {"cl": c.cl, "cd": c.cd} for name, c in case.coefficients.items()},
        "files": files,
    }


def write_manifest(root: Path, entries: list[dict[str, Any]], dimensionality: str = "3D") -> Path:
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    payload = {"schema_version": SCHEMA_VERSION, "dimensionality": dimensionality, "cases": entries}
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def write_dataset(root: Path, cases: Iterable[WingCase], dimensionality: str = "3D") -> DatasetIndex:
    if dimensionality not in DIMENSIONALITIES:
        raise OptiwingError("invalid_dimensionality", f"Dimensionality must be one of {DIMENSIONALITIES}.")
    entries = [write_case(root, case, dimensionality) for case in cases]
    write_manifest(root, entries, dimensionality)
    return load_manifest(root)


def split_dataset(index: DatasetIndex, seed: int, counts: tuple[int, int, int]) -> SplitAssignment:
    """Uniform seeded shuffle of the sorted case ids, cut into (train, val, test)."""
    if len(counts) != 3 or any(count < 0 for count in counts):
        raise OptiwingError("invalid_split_counts", "Split counts must be three non-negative integers.")
    ids = sorted(index.ids())
    if sum(counts) > len(ids):
        raise OptiwingError(
            "split_counts_exceed_cases",
            f"Requested {sum(counts)} cases but the index holds {len(ids)}.",
            details={"counts": list(counts), "available": len(ids)},
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, n_test = counts
    return SplitAssignment(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val : n_train + n_val + n_test]),
        seed=seed,
    )


def _pairing_key(case: CaseDescriptor) -> tuple[str, tuple[float, ...]]:
    return case.airfoil_id or case.case_id, tuple(case.condition.as_array())


def pair_2d_3d(index2d: DatasetIndex, index3d: DatasetIndex) -> PairingResult:
    """Pair cases sharing the initial airfoil and an identical flow condition."""
    by_key: dict[tuple[str, tuple[float, ...]], str] = {}
    for case in index2d.cases:
        by_key.setdefault(_pairing_key(case), case.case_id)
    pairs = []
    matched_2d: set[str] = set()
    unmatched = []
    for case in index3d.cases:
        partner = by_key.get(_pairing_key(case))
        if partner is None or partner in matched_2d:
            unmatched.append(UnmatchedCase(case.case_id, "3D", "no 2D case with the same airfoil and condition"))
            continue
        matched_2d.add(partner)
        pairs.append((partner, case.case_id))
    for case in index2d.cases:
        if case.case_id not in matched_2d:
            unmatched.append(UnmatchedCase(case.case_id, "2D", "no 3D case with the same airfoil and condition"))
    return PairingResult(pairs=tuple(pairs), unmatched=tuple(unmatched))


def _release_wing(path: Path) -> WingGeometry:
    frame = pd.read_csv(path, float_precision="round_trip")
    if "slice" not in frame.columns:
        frame["slice"] = frame.groupby("z", sort=True).ngroup()
    cp = frame["cp"] if "cp" in frame.columns else np.nan
    canonical = pd.DataFrame({"slice": frame["slice"], "x": frame["x"], "y": frame["y"], "z": frame["z"], "cp": cp})
    slices = []
    stations = []
    pressure = []
    for _, group in canonical.groupby("slice", sort=True):
        slices.append(Section(group[["x", "y"]].to_numpy(dtype=float)))
        stations.append(float(group["z"].iloc[0]))
        pressure.append(group["cp"].to_numpy(dtype=float))
    has_pressure = all(np.isfinite(values).all() for values in pressure)
    return WingGeometry(
        slices=tuple(slices),
        span_stations=np.asarray(stations),
        pressure=tuple(pressure) if has_pressure else None,
    )


def import_release(src: Path | str, dst: Path | str) -> DatasetIndex:
    """Translate the release layout into the canonical format.

    Expected layout: `cases.csv` with one row per case (case_id, airfoil_id, mach,
    reynolds, cl_con, vmin_frac, alpha_opt, cl_init, cd_init, cl_opt, cd_opt,
    initial_failed) and `slices/<case_id>_{initial,optimized}.csv` holding x, y, z
    and optionally cp, one slice per distinct z.
    """
    src, dst = Path(src), Path(dst)
    table_path = src / "cases.csv"
    if not table_path.exists():
        raise OptiwingError("release_not_found", f"No cases.csv under {src}.", status_code=404)
    try:
        table = pd.read_csv(table_path, dtype={"case_id": str, "airfoil_id": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise OptiwingError("release_unreadable", f"{table_path} cannot be parsed.", status_code=422) from exc
    entries = []
    rejected: list[SkipRecord] = []
    for row in table.itertuples(index=False):
        case_id = str(row.case_id)
        failed_flag = getattr(row, "initial_failed", 0)
        try:
            case = WingCase(
                case_id=case_id,
                condition=FlowCondition(
                    mach=float(row.mach),
                    reynolds=float(row.reynolds),
                    cl_con=float(row.cl_con),
                    vmin_frac=float(row.vmin_frac),
                ),
                initial=_release_wing(src / "slices" / f"{case_id}_initial.csv"),
                optimized=_release_wing(src / "slices" / f"{case_id}_optimized.csv"),
                coefficients={
                    "initial": AeroCoefficients(cl=float(row.cl_init), cd=float(row.cd_init)),
                    "optimized": AeroCoefficients(cl=float(row.cl_opt), cd=float(row.cd_opt)),
                },
                alpha_opt=float(row.alpha_opt),
                has_initial_sim=not (pd.notna(failed_flag) and bool(failed_flag)),
                airfoil_id=str(getattr(row, "airfoil_id", "")),
            )
        except (OptiwingError, OSError, KeyError, ValueError, AttributeError, pd.errors.ParserError) as exc:
            reason = exc.message if isinstance(exc, OptiwingError) else f"{type(exc).__name__}: {exc}"
            rejected.append(SkipRecord(case_id=case_id, reason=reason))
            warnings.warn(f"Skipping release case {case_id}: {reason}", RuntimeWarning, stacklevel=2)
            continue
        entries.append(write_case(dst, case))
    write_manifest(dst, entries)
    index = load_manifest(dst)
    return replace(index, skipped=(*rejected, *index.skipped))
