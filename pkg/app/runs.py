from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any
from uuid import uuid4

import numpy as np
import pandas as pd
import torch

import app
from app.analysis import (
    DifferenceProfile,
    aggregate_difference,
    compare_2d_3d,
    fit_error_summary,
    geometry_features,
    ld_distribution,
    marginal_improvement_rate,
    pca_cumulative,
    pressure_features,
    run_ablation,
)
from app.audit import audited_step, record_event
from app.bezier import BezierLatent, encode, encode_batch
from app.conditions import FlowCondition, condition_from_dict
from app.config import RunConfig, resolve_split_counts
from app.dataset_io import (
    MANIFEST_NAME,
    DatasetIndex,
    SplitAssignment,
    WingCase,
    import_release,
    load_cases,
    load_manifest,
    pair_2d_3d,
    split_dataset,
    write_slices,
)
from app.denoiser import build_denoiser, count_parameters
from app.diffusion import (
    Checkpoint,
    Conditioning,
    DesignState,
    LossWeights,
    Normalizer,
    assemble_wing,
    condition_features,
    fit_denoiser,
    load_checkpoint,
    make_condition_grid,
    make_schedules,
    sample,
    save_checkpoint,
    schedule_hash,
    seeded_generator,
)
from app.errors import OptiwingError
from app.geometry import (
    CANONICAL_SLICES,
    CANONICAL_SPAN_STATIONS,
    Section,
    WingGeometry,
    extrude,
    interpolate_stack,
    resample_section,
    unshift,
    wing_volume,
)
from app.metrics import (
    KernelConfig,
    MetricReport,
    MetricValue,
    mmd_avg,
    mse,
    spanwise_average,
    spearman,
    vendi_avg,
    vendi_normalized,
    volume_satisfaction,
)
from app.sampling_flow import ParameterBounds, WallSpacingInputs, latin_hypercube, off_wall_distance
from app.synthetic import naca4_section, write_synthetic_dataset


FLOAT_FORMAT = "%.17g"
SAMPLE_CHUNK = 64
METRIC_NAMES = (
    "mse_shape",
    "mmd_shape_spanwise_avg",
    "mse_alpha",
    "mmd_alpha",
    "vendi_spanwise_avg",
    "vendi_normalized",
    "vol_constraint_pct",
)
PROFILE_NAMES = ("mse_shape", "mmd_shape", "vendi")
CONDITION_NAMES = ("mach", "reynolds", "cl_con", "vmin_frac")


def _ok(data: dict[str, Any]) -> dict[str, Any]:
    return {"status": "ok", "data": data}


def _new_run_id() -> str:
    return uuid4().hex[:12]


def write_run_manifest(out: Path, command: str, config: RunConfig, inputs: dict[str, Any]) -> Path:
    """Config, seed and code version next to a command's outputs; no timestamps."""
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "version": app.__version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": {key: str(value) if isinstance(value, Path) else value for key, value in inputs.items()},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_json(payload: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_plot_spec(
    out: Path,
    name: str,
    kind: str,
    source: str,
    x: str,
    y: str | list[str],
    series: str | None = None,
    title: str | None = None,
) -> Path:
    """Declarative plot description for an external renderer."""
    spec = {
        "kind": kind,
        "source": source,
        "x": x,
        "y": y if isinstance(y, list) else [y],
        "series": series,
        "title": title or name.replace("_", " "),
    }
    return write_json(spec, out / f"{name}.plot.json")


def _data_root(config: RunConfig, root: Path | str | None, second: bool = False) -> Path:
    value = root if root is not None else (config.data_root_2d if second else config.data_root)
    if value is None:
        variable = "OPTIWING_DATA_ROOT_2D" if second else "OPTIWING_DATA_ROOT"
        raise OptiwingError("data_root_missing", f"Pass --data-root or set {variable}.")
    return Path(value)


def _load_index(config: RunConfig, root: Path | str | None) -> DatasetIndex:
    index = load_manifest(_data_root(config, root), workers=config.workers)
    if not index.cases:
        raise OptiwingError("no_valid_cases", f"No valid cases under {index.root_path}.", status_code=422)
    return index


def _load_split(path: Path) -> SplitAssignment:
    if not path.exists():
        raise OptiwingError("split_not_found", f"Split file {path} does not exist.", status_code=404)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise OptiwingError("split_corrupt", f"Split file {path} is not valid JSON.", status_code=422) from exc
    return SplitAssignment.from_dict(payload)


def _resolve_split(config: RunConfig, index: DatasetIndex, split_path: Path | None) -> SplitAssignment:
    if split_path is not None:
        return _load_split(split_path)
    return split_dataset(index, config.seed, resolve_split_counts(config, len(index.cases)))


def _kernel(config: RunConfig) -> KernelConfig:
    return KernelConfig(gammas=config.gammas, unbiased=config.unbiased_mmd)


@dataclass
class EncodedSet:
    """Latent training records: per case 9 unshifted slice latents, dihedral shifts, alpha and conditioning."""

    case_ids: list[str]
    shape: np.ndarray
    eta: np.ndarray
    alpha: np.ndarray
    z_a0: np.ndarray
    conditions: np.ndarray
    fit_mse: np.ndarray
    converged: np.ndarray

    def subset(self, case_ids: Sequence[str]) -> EncodedSet:
        position = {case_id: i for i, case_id in enumerate(self.case_ids)}
        missing = [case_id for case_id in case_ids if case_id not in position]
        if missing:
            raise OptiwingError(
                "latents_missing_cases",
                f"Latent file lacks {len(missing)} requested cases, e.g. {missing[0]}.",
                status_code=404,
            )
        rows = [position[case_id] for case_id in case_ids]
        return EncodedSet(
            case_ids=list(case_ids),
            shape=self.shape[rows],
            eta=self.eta[rows],
            alpha=self.alpha[rows],
            z_a0=self.z_a0[rows],
            conditions=self.conditions[rows],
            fit_mse=self.fit_mse[rows],
            converged=self.converged[rows],
        )

    def design_state(self) -> DesignState:
        return DesignState(
            shape=torch.as_tensor(self.shape, dtype=torch.float32),
            eta=torch.as_tensor(self.eta, dtype=torch.float32),
            alpha=torch.as_tensor(self.alpha, dtype=torch.float32).reshape(-1, 1),
        )

    def conditionings(self) -> list[Conditioning]:
        return [
            Conditioning(FlowCondition(*row.tolist()), BezierLatent.from_features(z))
            for row, z in zip(self.conditions, self.z_a0)
        ]


def canonical_design(case: WingCase, section_points: int) -> tuple[list[Section], np.ndarray, Section]:
    """Unshifted canonical slices, their dihedral shifts and the initial root section."""
    stacked = interpolate_stack(case.optimized, CANONICAL_SPAN_STATIONS, section_points)
    unshifted, eta = unshift(stacked)
    initial = interpolate_stack(case.initial, CANONICAL_SPAN_STATIONS[:1], section_points).slices[0]
    return list(unshifted.slices), eta, initial


def encode_cases(cases: Sequence[WingCase], config: RunConfig) -> EncodedSet:
    designs = [canonical_design(case, config.section_points) for case in cases]
    sections = [section for slices, _, initial in designs for section in (*slices, initial)]
    fits = encode_batch(sections, workers=config.workers, n_control=config.n_control)
    per_case = CANONICAL_SLICES + 1
    shape, z_a0, fit_mse, converged = [], [], [], []
    for number in range(len(cases)):
        chunk = fits[number * per_case : (number + 1) * per_case]
        shape.append([latent.to_features() for latent, _ in chunk[:-1]])
        z_a0.append(chunk[-1][0].to_features())
        fit_mse.append([report.mse for _, report in chunk])
        converged.append([report.converged for _, report in chunk])
    width = 3 * config.n_control
    return EncodedSet(
        case_ids=[case.case_id for case in cases],
        shape=np.asarray(shape, dtype=float).reshape(len(cases), CANONICAL_SLICES, width),
        eta=np.asarray([eta for _, eta, _ in designs], dtype=float).reshape(len(cases), CANONICAL_SLICES),
        alpha=np.asarray([case.alpha_opt for case in cases], dtype=float),
        z_a0=np.asarray(z_a0, dtype=float).reshape(len(cases), width),
        conditions=np.asarray([case.condition.as_array() for case in cases], dtype=float).reshape(len(cases), 4),
        fit_mse=np.asarray(fit_mse, dtype=float).reshape(len(cases), per_case),
        converged=np.asarray(converged, dtype=bool).reshape(len(cases), per_case),
    )


def write_latents(encoded: EncodedSet, path: Path) -> Path:
    """Long table: one row per (case, role, slice) with the flat latent record."""
    width = encoded.shape.shape[-1]
    rows = []
    for i, case_id in enumerate(encoded.case_ids):
        condition = dict(zip(CONDITION_NAMES, encoded.conditions[i].tolist()))
        for k in range(CANONICAL_SLICES + 1):
            optimized = k < CANONICAL_SLICES
            features = encoded.shape[i, k] if optimized else encoded.z_a0[i]
            rows.append(
                {
                    "case_id": case_id,
                    "role": "optimized" if optimized else "initial",
                    "slice": k if optimized else 0,
                    "eta": encoded.eta[i, k] if optimized else 0.0,
                    "alpha": encoded.alpha[i],
                    **condition,
                    "mse": encoded.fit_mse[i, k],
                    "converged": bool(encoded.converged[i, k]),
                    **{f"f{j}": features[j] for j in range(width)},
                }
            )
    return write_table(pd.DataFrame(rows), path)


def read_latents(path: Path) -> EncodedSet:
    if not path.exists():
        raise OptiwingError("latents_not_found", f"Latent file {path} does not exist.", status_code=404)
    try:
        frame = pd.read_csv(path, dtype={"case_id": str}, float_precision="round_trip")
        feature_columns = [column for column in frame.columns if column.startswith("f") and column[1:].isdigit()]
        case_ids = list(dict.fromkeys(frame["case_id"]))
        shape, eta, alpha, z_a0, conditions, fit_mse, converged = [], [], [], [], [], [], []
        for case_id in case_ids:
            group = frame[frame["case_id"] == case_id]
            optimized = group[group["role"] == "optimized"].sort_values("slice")
            initial = group[group["role"] == "initial"]
            if len(optimized) != CANONICAL_SLICES or len(initial) != 1:
                raise ValueError(f"case {case_id} has an incomplete latent record")
            shape.append(optimized[feature_columns].to_numpy(dtype=float))
            eta.append(optimized["eta"].to_numpy(dtype=float))
            alpha.append(float(optimized["alpha"].iloc[0]))
            z_a0.append(initial[feature_columns].to_numpy(dtype=float)[0])
            conditions.append(optimized[list(CONDITION_NAMES)].to_numpy(dtype=float)[0])
            fit_mse.append(np.concatenate([optimized["mse"].to_numpy(dtype=float), initial["mse"].to_numpy(dtype=float)]))
            converged.append(
                np.concatenate([optimized["converged"].to_numpy(dtype=bool), initial["converged"].to_numpy(dtype=bool)])
            )
    except (KeyError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise OptiwingError("latents_corrupt", f"Latent file {path} cannot be parsed: {exc}", status_code=422) from exc
    return EncodedSet(
        case_ids=case_ids,
        shape=np.asarray(shape),
        eta=np.asarray(eta),
        alpha=np.asarray(alpha),
        z_a0=np.asarray(z_a0),
        conditions=np.asarray(conditions),
        fit_mse=np.asarray(fit_mse),
        converged=np.asarray(converged),
    )


def _encoded_for(
    config: RunConfig,
    index: DatasetIndex,
    case_ids: Sequence[str],
    latents_path: Path | None,
) -> EncodedSet:
    if latents_path is not None:
        return read_latents(latents_path).subset(case_ids)
    return encode_cases(load_cases(index, case_ids, config.workers), config)


def ingest(config: RunConfig, out: Path, root: Path | str | None = None) -> dict[str, Any]:
    run_id = _new_run_id()
    source = _data_root(config, root)
    with audited_step("dataset.ingest", run_id) as warned:
        if source.is_dir() and not (source / MANIFEST_NAME).exists() and (source / "cases.csv").exists():
            index = import_release(source, out / "dataset")
        else:
            index = load_manifest(source, workers=config.workers)
    report = index.report()
    write_run_manifest(out, "ingest", config, {"root": source})
    write_json(report, out / "ingest_report.json")
    write_table(
        pd.DataFrame(
            [
                {
                    "case_id": case.case_id,
                    "airfoil_id": case.airfoil_id,
                    **case.condition.to_dict(),
                    "alpha_opt": case.alpha_opt,
                    "has_initial_sim": case.has_initial_sim,
                    "in_bounds": case.in_bounds,
                }
                for case in index.cases
            ],
            columns=["case_id", "airfoil_id", *CONDITION_NAMES, "alpha_opt", "has_initial_sim", "in_bounds"],
        ),
        out / "cases.csv",
    )
    record_event("dataset.ingest", "ok" if index.cases else "failed", report, run_id)
    if not index.cases:
        raise OptiwingError(
            "no_valid_cases",
            f"No valid cases under {source}.",
            status_code=422,
            details={"skipped": len(index.skipped)},
        )
    return _ok({"run_id": run_id, "manifest": str(index.root_path / MANIFEST_NAME), **report, "warnings": warned})


def split(config: RunConfig, out: Path, root: Path | str | None = None) -> dict[str, Any]:
    index = _load_index(config, root)
    counts = resolve_split_counts(config, len(index.cases))
    assignment = split_dataset(index, config.seed, counts)
    write_run_manifest(out, "split", config, {"root": index.root_path, "counts": list(counts)})
    path = write_json(assignment.to_dict(), out / "split.json")
    record_event("dataset.split", "ok", {"counts": list(counts), "seed": config.seed})
    return _ok({"split": str(path), "counts": list(counts), "seed": config.seed})


def fit_bezier(
    config: RunConfig,
    out: Path,
    root: Path | str | None = None,
    case_ids: Sequence[str] | None = None,
) -> dict[str, Any]:
    run_id = _new_run_id()
    index = _load_index(config, root)
    ids = list(case_ids) if case_ids else index.ids()
    with audited_step("bezier.fit", run_id) as warned:
        encoded = encode_cases(load_cases(index, ids, config.workers), config)
    write_run_manifest(out, "fit-bezier", config, {"root": index.root_path, "cases": len(ids)})
    write_latents(encoded, out / "latents.csv")
    report = pd.DataFrame(
        [
            {
                "case_id": case_id,
                "role": "optimized" if k < CANONICAL_SLICES else "initial",
                "slice": k if k < CANONICAL_SLICES else 0,
                "mse": encoded.fit_mse[i, k],
                "converged": bool(encoded.converged[i, k]),
            }
            for i, case_id in enumerate(encoded.case_ids)
            for k in range(CANONICAL_SLICES + 1)
        ]
    )
    write_table(report, out / "fit_report.csv")
    summary = fit_error_summary(encoded.fit_mse[:, :CANONICAL_SLICES].ravel())
    write_json(summary, out / "fit_error_summary.json")
    density = summary["log10_density"]
    write_table(pd.DataFrame(density), out / "fit_error_density.csv")
    write_plot_spec(out, "fit_errors", "line", "fit_error_density.csv", "log10_mse", "density")
    not_converged = int((~encoded.converged).sum())
    record_event(
        "bezier.fit",
        "ok",
        {"sections": int(encoded.fit_mse.size), "median_mse": summary["median"], "not_converged": not_converged},
        run_id,
    )
    return _ok(
        {
            "run_id": run_id,
            "cases": len(ids),
            "median_mse": summary["median"],
            "not_converged": not_converged,
            "warnings": warned,
        }
    )


def _hyperparameters(config: RunConfig) -> dict[str, Any]:
    training = config.training
    return {
        "preset": training.network,
        "n_slices": CANONICAL_SLICES,
        "n_control": config.n_control,
        "n_steps": training.n_steps,
        "beta_starts": dict(training.beta_starts),
        "beta_end": training.beta_end,
        "loss_weights": dict(training.loss_weights),
        "learning_rate": training.learning_rate,
        "batch_size": training.batch_size,
        "section_points": config.section_points,
        "eval_points": config.eval_points,
        "seed": config.seed,
    }


def _to_device(state: DesignState, device: torch.device) -> DesignState:
    return state.map(lambda _, value: value.to(device))


def train_model(
    encoded: EncodedSet,
    config: RunConfig,
    seed: int,
    resume: Checkpoint | None = None,
    epochs: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Fit (or continue fitting) a denoiser on encoded designs and return it as a checkpoint."""
    training = config.training
    schedules = make_schedules(training.n_steps, training.beta_starts, training.beta_end)
    states = encoded.design_state()
    cond = condition_features(encoded.conditionings())
    if resume is not None:
        model, normalizer, start = resume.model, resume.normalizer, resume.epoch
        hyperparameters = resume.hyperparameters
        history, optimizer_state = list(resume.losses), resume.optimizer_state
    else:
        model = build_denoiser(training.network, n_slices=CANONICAL_SLICES, n_control=config.n_control)
        normalizer = Normalizer.fit(states, cond)
        start, history, optimizer_state = 0, [], None
        hyperparameters = _hyperparameters(config)
    device = torch.device(config.device)
    model.to(device)
    result = fit_denoiser(
        model,
        _to_device(normalizer.normalize(states), device),
        normalizer.normalize_conditions(cond).to(device),
        schedules,
        epochs=training.epochs if epochs is None else epochs,
        batch_size=training.batch_size,
        learning_rate=training.learning_rate,
        weights=LossWeights(**training.loss_weights),
        seed=seed,
        start_epoch=start,
        optimizer_state=optimizer_state,
        on_epoch=on_epoch,
    )
    model.to("cpu")
    return Checkpoint(
        model=model,
        normalizer=normalizer,
        schedules=schedules,
        epoch=result.epoch,
        hyperparameters=hyperparameters,
        optimizer_state=result.optimizer_state,
        losses=history + result.losses,
    )


def train(
    config: RunConfig,
    out: Path,
    root: Path | str | None = None,
    split_path: Path | None = None,
    latents_path: Path | None = None,
    resume: Path | None = None,
) -> dict[str, Any]:
    run_id = _new_run_id()
    index = _load_index(config, root)
    assignment = _resolve_split(config, index, split_path)
    if not assignment.train_ids:
        raise OptiwingError("empty_training_set", "The training split is empty.")
    training = config.training
    previous = None
    if resume is not None:
        schedules = make_schedules(training.n_steps, training.beta_starts, training.beta_end)
        previous = load_checkpoint(resume, expected_hash=schedule_hash(schedules))
    log_every = max(1, training.epochs // 20)
    last_epoch = (previous.epoch if previous else 0) + training.epochs - 1

    def on_epoch(epoch: int, loss: float) -> None:
        if (epoch + 1) % log_every == 0 or epoch == last_epoch:
            record_event("diffusion.train.epoch", "ok", {"epoch": epoch, "loss": loss}, run_id)

    record_event("diffusion.train", "started", {"epochs": training.epochs, "resumed": previous is not None}, run_id)
    with audited_step("diffusion.train", run_id) as warned:
        encoded = _encoded_for(config, index, assignment.train_ids, latents_path)
        checkpoint = train_model(encoded, config, config.seed, resume=previous, on_epoch=on_epoch)

    write_run_manifest(
        out,
        "train",
        config,
        {"root": index.root_path, "resume": str(resume) if resume else None, "train_cases": len(encoded.case_ids)},
    )
    checkpoint_path = out / "checkpoint.pt"
    save_checkpoint(checkpoint_path, checkpoint)
    log = pd.DataFrame({"epoch": np.arange(len(checkpoint.losses)), "loss": checkpoint.losses})
    write_table(log, out / "training_log.csv")
    write_plot_spec(out, "training_loss", "line", "training_log.csv", "epoch", "loss")
    return _ok(
        {
            "run_id": run_id,
            "checkpoint": str(checkpoint_path),
            "epoch": checkpoint.epoch,
            "final_loss": checkpoint.losses[-1] if checkpoint.losses else None,
            "n_parameters": count_parameters(checkpoint.model),
            "n_steps": training.n_steps,
            "loss_weights": dict(training.loss_weights),
            "schedule_hash": checkpoint.schedule_hash,
            "warnings": warned,
        }
    )


def sample_designs(
    checkpoint: Checkpoint,
    conditionings: Sequence[Conditioning],
    seed: int,
    counter: Sequence[int] = (),
) -> DesignState:
    """Denormalized designs, one per conditioning; row i draws from its own seeded generator."""
    n_control = checkpoint.hyperparameters["n_control"]
    n_slices = checkpoint.hyperparameters["n_slices"]
    cond = checkpoint.normalizer.normalize_conditions(condition_features(conditionings))
    chunks = []
    for start in range(0, len(conditionings), SAMPLE_CHUNK):
        rows = range(start, min(start + SAMPLE_CHUNK, len(conditionings)))
        chunks.append(
            sample(
                cond[start : rows.stop],
                checkpoint.model,
                checkpoint.schedules,
                [seeded_generator(seed, *counter, row) for row in rows],
                n_slices=n_slices,
                n_control=n_control,
                normalizer=checkpoint.normalizer,
            )
        )
    return DesignState.stack(chunks)


def _initial_section(row: dict[str, Any], index: DatasetIndex | None, points: int) -> Section:
    if isinstance(row.get("initial_path"), str) and row["initial_path"]:
        path = Path(row["initial_path"])
        if not path.exists():
            raise OptiwingError("initial_section_not_found", f"Initial section {path} does not exist.", status_code=404)
        frame = pd.read_csv(path, float_precision="round_trip")
        section = Section(frame[["x", "y"]].to_numpy(dtype=float))
    elif isinstance(row.get("airfoil"), str) and row["airfoil"]:
        section = naca4_section(row["airfoil"].lower().removeprefix("naca"), 2 * points + 1)
    elif isinstance(row.get("case_id"), str) and row["case_id"]:
        if index is None:
            raise OptiwingError("data_root_missing", "Rows naming a case_id need --data-root.")
        case = load_cases(index, [row["case_id"]])[0]
        section = interpolate_stack(case.initial, CANONICAL_SPAN_STATIONS[:1], points).slices[0]
    else:
        raise OptiwingError(
            "missing_initial_section",
            "Each condition row needs an airfoil, initial_path or case_id column.",
        )
    return resample_section(section, points)


def read_condition_rows(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        raise OptiwingError("conditions_not_found", f"Conditions file {path} does not exist.", status_code=404)
    try:
        frame = pd.read_csv(path, dtype={"case_id": str, "airfoil": str, "initial_path": str})
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as exc:
        raise OptiwingError("conditions_unreadable", f"{path} cannot be parsed.", status_code=422) from exc
    frame = frame.astype(object).where(frame.notna(), None)
    return frame.to_dict(orient="records")


def generate(
    config: RunConfig,
    checkpoint_path: Path,
    conditions_path: Path,
    out: Path,
    seed: int | None = None,
    grid: tuple[Sequence[float], Sequence[float]] | None = None,
    root: Path | str | None = None,
) -> dict[str, Any]:
    run_id = _new_run_id()
    seed = config.seed if seed is None else seed
    checkpoint = load_checkpoint(checkpoint_path)
    points = checkpoint.hyperparameters.get("section_points", config.section_points)
    eval_points = checkpoint.hyperparameters.get("eval_points", config.eval_points)
    rows = read_condition_rows(conditions_path)
    if grid is not None and rows:
        base_row = rows[0]
        machs, cl_cons = grid
        rows = [
            {**base_row, **condition.to_dict(), "row_id": f"grid_{i:03d}"}
            for i, condition in enumerate(make_condition_grid(condition_from_dict(base_row), machs, cl_cons))
        ]
    index = None
    if any(row.get("case_id") and not row.get("airfoil") and not row.get("initial_path") for row in rows):
        index = _load_index(config, root)

    write_run_manifest(
        out,
        "generate",
        replace(config, seed=seed),
        {"checkpoint": checkpoint_path, "conditions": conditions_path, "rows": len(rows), "grid": grid},
    )
    columns = ["row_id", *CONDITION_NAMES, "alpha", "volume_fraction", "volume_satisfied", "design_path"]
    if not rows:
        write_table(pd.DataFrame(columns=columns), out / "generated.csv")
        return _ok({"run_id": run_id, "generated": 0, "table": str(out / "generated.csv")})

    with audited_step("diffusion.sample", run_id) as warned:
        initials = [_initial_section(row, index, points) for row in rows]
        conditionings = []
        for row, initial in zip(rows, initials):
            latent, _ = encode(initial, n_control=checkpoint.hyperparameters["n_control"])
            conditionings.append(Conditioning(condition_from_dict(row), latent))
        designs = sample_designs(checkpoint, conditionings, seed)

    records = []
    for i, (row, initial) in enumerate(zip(rows, initials)):
        row_id = str(row.get("row_id") or row.get("case_id") or f"row_{i:03d}")
        wing, alpha = assemble_wing(designs, i, n_points=eval_points)
        design_path = out / "designs" / f"{row_id}.csv"
        write_slices(design_path, wing)
        fraction = wing_volume(wing) / wing_volume(extrude(initial, CANONICAL_SPAN_STATIONS))
        condition = conditionings[i].condition
        records.append(
            {
                "row_id": row_id,
                **condition.to_dict(),
                "alpha": alpha,
                "volume_fraction": fraction,
                "volume_satisfied": bool(fraction >= condition.vmin_frac),
                "design_path": str(design_path.relative_to(out)),
            }
        )
    table = write_table(pd.DataFrame(records, columns=columns), out / "generated.csv")
    record_event("diffusion.sample", "ok", {"rows": len(records), "seed": seed}, run_id)
    return _ok({"run_id": run_id, "generated": len(records), "table": str(table), "warnings": warned})


@dataclass
class EvaluationTarget:
    """Everything a pass needs about one split: dataset wings, alphas, initial wings and conditionings."""

    case_ids: list[str]
    truth_wings: list[WingGeometry]
    truth_alpha: np.ndarray
    initial_wings: list[WingGeometry]
    vmins: np.ndarray
    conditionings: list[Conditioning]
    conditions: np.ndarray


def on_evaluation_grid(wing: WingGeometry, n_points: int) -> WingGeometry:
    """Canonical span stations with every slice resampled to n_points, so point i matches across wings."""
    return interpolate_stack(wing, CANONICAL_SPAN_STATIONS, n_points)


def evaluation_target(
    config: RunConfig,
    index: DatasetIndex,
    case_ids: Sequence[str],
    latents_path: Path | None = None,
) -> EvaluationTarget:
    """Truth is the dataset's optimized geometry, so shape metrics include the Bezier fitting error."""
    cases = load_cases(index, case_ids, config.workers)
    encoded = _encoded_for(config, index, case_ids, latents_path)
    return EvaluationTarget(
        case_ids=list(case_ids),
        truth_wings=[on_evaluation_grid(case.optimized, config.eval_points) for case in cases],
        truth_alpha=np.asarray([case.alpha_opt for case in cases], dtype=float),
        initial_wings=[on_evaluation_grid(case.initial, config.eval_points) for case in cases],
        vmins=np.asarray([case.condition.vmin_frac for case in cases], dtype=float),
        conditionings=encoded.conditionings(),
        conditions=np.asarray([case.condition.as_array() for case in cases], dtype=float),
    )


def evaluate_pass(
    checkpoint: Checkpoint,
    target: EvaluationTarget,
    kernel: KernelConfig,
    seed: int,
    pass_index: int,
    eval_points: int,
) -> tuple[dict[str, float], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One sampling pass over a split: metric values, spanwise profiles and per-case shape and alpha errors."""
    designs = sample_designs(checkpoint, target.conditionings, seed, counter=(pass_index,))
    assembled = [assemble_wing(designs, i, n_points=eval_points) for i in range(len(target.case_ids))]
    wings = [on_evaluation_grid(wing, eval_points) for wing, _ in assembled]
    alphas = np.array([alpha for _, alpha in assembled])

    shape_mse = spanwise_average(mse, wings, target.truth_wings)
    shape_mmd = spanwise_average(lambda g, t: mmd_avg(g, t, kernel), wings, target.truth_wings)
    diversity = spanwise_average(lambda g, _: vendi_avg(g, kernel), wings, target.truth_wings)
    flat_gen = np.stack([np.concatenate([s.coords.ravel() for s in w.slices]) for w in wings])
    flat_truth = np.stack([np.concatenate([s.coords.ravel() for s in w.slices]) for w in target.truth_wings])
    values = {
        "mse_shape": shape_mse.average,
        "mmd_shape_spanwise_avg": shape_mmd.average,
        "mse_alpha": mse(target.truth_alpha, alphas),
        "mmd_alpha": mmd_avg(alphas, target.truth_alpha, kernel),
        "vendi_spanwise_avg": diversity.average,
        "vendi_normalized": vendi_normalized(flat_gen, flat_truth, kernel),
        "vol_constraint_pct": volume_satisfaction(wings, target.initial_wings, target.vmins),
    }
    profiles = {"mse_shape": shape_mse.profile, "mmd_shape": shape_mmd.profile, "vendi": diversity.profile}
    case_errors = {
        "shape_error": np.mean((flat_gen - flat_truth) ** 2, axis=1),
        "alpha_error": (alphas - target.truth_alpha) ** 2,
    }
    return values, profiles, case_errors


def _spearman_table(conditions: np.ndarray, errors: dict[str, np.ndarray]) -> dict[str, Any]:
    """Rank correlation of each per-case error against each flow condition."""
    table: dict[str, Any] = {}
    for error_name, values in errors.items():
        rows = {}
        for column, name in enumerate(CONDITION_NAMES):
            try:
                result = spearman(conditions[:, column], values)
            except OptiwingError as exc:
                rows[name] = {"defined": False, "reason": exc.message}
                continue
            rows[name] = {"rho": result.rho, "p_value": result.p_value, "defined": result.defined, "n": result.n}
        table[error_name] = rows
    return table


def evaluate(
    config: RunConfig,
    checkpoint_path: Path,
    split_name: str,
    out: Path,
    passes: int | None = None,
    root: Path | str | None = None,
    split_path: Path | None = None,
    latents_path: Path | None = None,
) -> dict[str, Any]:
    run_id = _new_run_id()
    passes = config.passes if passes is None else passes
    if passes < 1:
        raise OptiwingError("invalid_passes", "Evaluation needs at least one pass.")
    checkpoint = load_checkpoint(checkpoint_path)
    index = _load_index(config, root)
    case_ids = _resolve_split(config, index, split_path).ids_for(split_name)
    if not case_ids:
        raise OptiwingError("split_empty", f"Split {split_name!r} has no cases.", status_code=404)
    kernel = _kernel(config)
    eval_points = checkpoint.hyperparameters.get("eval_points", config.eval_points)
    config = replace(config, eval_points=eval_points)

    with audited_step("metrics.evaluate", run_id) as warned:
        target = evaluation_target(config, index, case_ids, latents_path)
        pass_values: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
        pass_profiles: dict[str, list[np.ndarray]] = {name: [] for name in PROFILE_NAMES}
        case_errors: dict[str, list[np.ndarray]] = {"shape_error": [], "alpha_error": []}
        for pass_index in range(passes):
            values, profiles, errors = evaluate_pass(checkpoint, target, kernel, config.seed, pass_index, eval_points)
            for name in METRIC_NAMES:
                pass_values[name].append(values[name])
            for name in PROFILE_NAMES:
                pass_profiles[name].append(profiles[name])
            for name, values_per_case in errors.items():
                case_errors[name].append(values_per_case)
            record_event("metrics.evaluate.pass", "ok", {"split": split_name, "pass": pass_index, **values}, run_id)

    stacked_profiles = {name: np.stack(pass_profiles[name]) for name in PROFILE_NAMES}
    report = MetricReport(
        split=split_name,
        passes=passes,
        **{name: MetricValue.from_passes(pass_values[name]) for name in METRIC_NAMES},
        profiles={name: stacked_profiles[name].mean(axis=0).tolist() for name in PROFILE_NAMES},
    )
    mean_errors = {name: np.mean(values, axis=0) for name, values in case_errors.items()}
    correlations = _spearman_table(target.conditions, mean_errors)

    write_run_manifest(
        out,
        "evaluate",
        config,
        {"checkpoint": checkpoint_path, "split": split_name, "passes": passes, "cases": len(case_ids)},
    )
    write_json({**report.to_dict(), "spearman": correlations}, out / f"metrics_{split_name}.json")
    case_frame = pd.DataFrame(target.conditions, columns=list(CONDITION_NAMES))
    case_frame.insert(0, "case_id", target.case_ids)
    for name, values in mean_errors.items():
        case_frame[name] = values
    write_table(case_frame, out / f"case_errors_{split_name}.csv")
    write_table(pd.DataFrame(report.rows()), out / f"metrics_{split_name}.csv")
    profile_frame = pd.DataFrame({"slice": np.arange(CANONICAL_SLICES), "span": CANONICAL_SPAN_STATIONS})
    for name in PROFILE_NAMES:
        profile_frame[f"{name}_mean"] = stacked_profiles[name].mean(axis=0)
        profile_frame[f"{name}_std"] = stacked_profiles[name].std(axis=0)
    write_table(profile_frame, out / f"profiles_{split_name}.csv")
    write_plot_spec(
        out,
        f"profiles_{split_name}",
        "line",
        f"profiles_{split_name}.csv",
        "span",
        [f"{name}_mean" for name in PROFILE_NAMES],
    )
    record_event("metrics.evaluate", "ok", {"split": split_name, "passes": passes}, run_id)
    return _ok({"run_id": run_id, "report": report.to_dict(), "spearman": correlations, "warnings": warned})


def _write_pca(out: Path, name: str, features: np.ndarray) -> dict[str, Any]:
    result = pca_cumulative(features)
    write_table(result.table(), out / f"pca_{name}.csv")
    write_plot_spec(out, f"pca_{name}", "line", f"pca_{name}.csv", "component", "cumulative")
    return {"n_for_99": result.n_for(0.99), "components": int(result.cumulative.size)}


def _write_difference(out: Path, name: str, profile: DifferenceProfile) -> dict[str, Any]:
    write_table(profile.table(), out / f"diff_{name}.csv")
    write_plot_spec(out, f"diff_{name}", "heatmap", f"diff_{name}.csv", "chord", "mean_abs_diff", series="span")
    span_means = profile.mean_abs_diff.mean(axis=1)
    return {
        "span_stations": profile.span_stations.tolist(),
        "span_mean_abs_diff": span_means.tolist(),
        "peak_span": float(profile.span_stations[int(np.argmax(span_means))]),
    }


def analyze(
    config: RunConfig,
    kind: str,
    out: Path,
    root: Path | str | None = None,
    root_2d: Path | str | None = None,
) -> dict[str, Any]:
    if kind not in ("pca", "diff", "ld"):
        raise OptiwingError("unknown_analysis", f"Unknown analysis {kind!r}; use pca, diff or ld.")
    run_id = _new_run_id()
    index = _load_index(config, root)
    has_2d = root_2d is not None or config.data_root_2d is not None
    index_2d = _load_index(config, _data_root(config, root_2d, second=True)) if has_2d else None
    results: dict[str, Any] = {}
    with audited_step(f"analysis.{kind}", run_id) as warned:
        cases = load_cases(index, workers=config.workers)
        cases_2d = load_cases(index_2d, workers=config.workers) if index_2d else []
        if kind == "pca":
            optimized = [case.optimized for case in cases]
            results["geometry_3d"] = _write_pca(out, "geometry_3d", geometry_features(optimized))
            if all(wing.pressure is not None for wing in optimized):
                results["pressure_3d"] = _write_pca(out, "pressure_3d", pressure_features(optimized))
            if cases_2d:
                sections = [case.optimized for case in cases_2d]
                results["geometry_2d"] = _write_pca(out, "geometry_2d", geometry_features(sections))
        elif kind == "diff":
            pairs = [(case.initial, case.optimized) for case in cases]
            results["shape"] = _write_difference(out, "shape", aggregate_difference(pairs))
            if all(a.pressure is not None and b.pressure is not None for a, b in pairs):
                results["pressure"] = _write_difference(
                    out, "pressure", aggregate_difference(pairs, quantity="pressure")
                )
            if index_2d:
                pairing = pair_2d_3d(index_2d, index)
                write_json(pairing.to_dict(), out / "pairing_2d_3d.json")
                by_id_2d = {case.case_id: case for case in cases_2d}
                by_id_3d = {case.case_id: case for case in cases}
                matched = [(by_id_2d[a], by_id_3d[b]) for a, b in pairing.pairs]
                if matched:
                    results["2d_3d"] = _write_difference(out, "2d_3d", compare_2d_3d(matched))
                results["unmatched"] = len(pairing.unmatched)
        else:
            for axis in ("mach", "reynolds"):
                table = ld_distribution(cases, axis)
                write_table(table, out / f"ld_{axis}.csv")
                write_plot_spec(out, f"ld_{axis}", "box", f"ld_{axis}.csv", "bin_low", "median", series="set")
                results[axis] = {"bins": int(table["bin_low"].nunique())}
    write_run_manifest(out, f"analyze-{kind}", config, {"root": index.root_path, "root_2d": root_2d})
    record_event(f"analysis.{kind}", "ok", results, run_id)
    return _ok({"run_id": run_id, "kind": kind, "results": results, "warnings": warned})


def ablate(
    config: RunConfig,
    out: Path,
    sizes: Sequence[int],
    repeats: int = 2,
    passes: int | None = None,
    root: Path | str | None = None,
    split_path: Path | None = None,
    train_fn: Callable[[int, int], Any] | None = None,
    eval_fn: Callable[[Any, int], dict[str, float]] | None = None,
) -> dict[str, Any]:
    """Data ablation; `train_fn` / `eval_fn` replace the default diffusion train and test-split pass."""
    run_id = _new_run_id()
    passes = config.passes if passes is None else passes
    max_size = None
    with audited_step("analysis.ablate", run_id) as warned:
        if train_fn is None or eval_fn is None:
            index = _load_index(config, root)
            assignment = _resolve_split(config, index, split_path)
            max_size = len(assignment.train_ids)
            if not assignment.test_ids:
                raise OptiwingError("split_empty", "Ablation evaluates on the test split, which is empty.", status_code=404)
            encoded = encode_cases(load_cases(index, assignment.train_ids, config.workers), config)
            target = evaluation_target(config, index, assignment.test_ids)
            kernel = _kernel(config)

            def default_train(size: int, repeat: int) -> Checkpoint:
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, size, repeat]))
                chosen = sorted(rng.choice(len(encoded.case_ids), size=size, replace=False).tolist())
                subset = encoded.subset([encoded.case_ids[i] for i in chosen])
                return train_model(subset, config, seed=config.seed + 1000 * repeat + size)

            def default_eval(checkpoint: Checkpoint, pass_index: int) -> dict[str, float]:
                values, _, _ = evaluate_pass(checkpoint, target, kernel, config.seed, pass_index, config.eval_points)
                return values

            train_fn = train_fn or default_train
            eval_fn = eval_fn or default_eval
        curve = run_ablation(sizes, train_fn, eval_fn, repeats=repeats, passes=passes, max_size=max_size)

    write_run_manifest(out, "ablate", config, {"sizes": list(sizes), "repeats": repeats, "passes": passes})
    write_table(curve.table(), out / "ablation.csv")
    rates = []
    for metric in curve.means:
        try:
            values = marginal_improvement_rate(curve, metric)
        except OptiwingError:
            continue
        for start, stop, rate in zip(curve.train_sizes, curve.train_sizes[1:], values):
            rates.append({"metric": metric, "from_size": start, "to_size": stop, "rate_pct_per_sample": rate})
    write_table(
        pd.DataFrame(rates, columns=["metric", "from_size", "to_size", "rate_pct_per_sample"]),
        out / "improvement_rates.csv",
    )
    write_plot_spec(out, "ablation", "line", "ablation.csv", "train_size", [f"{m}_mean" for m in curve.means])
    record_event("analysis.ablate", "ok", {"sizes": list(sizes), "failures": len(curve.failures)}, run_id)
    return _ok(
        {
            "run_id": run_id,
            "sizes": curve.train_sizes,
            "failures": curve.failures,
            "table": str(out / "ablation.csv"),
            "warnings": warned,
        }
    )


def ywall(mach: float, reynolds: float, t_inf: float = 300.0, l_ref: float = 1.0, y_plus: float = 1.0) -> dict[str, Any]:
    inputs = WallSpacingInputs(mach=mach, reynolds=reynolds, t_inf=t_inf, l_ref=l_ref, y_plus=y_plus)
    with audited_step("sampling.ywall") as warned:
        result = off_wall_distance(inputs)
    return _ok(
        {
            "inputs": {"mach": mach, "reynolds": reynolds, "t_inf": t_inf, "l_ref": l_ref, "y_plus": y_plus},
            "result": result.to_dict(),
            "warnings": warned,
        }
    )


def lhs(n: int, seed: int, log_reynolds: bool = False) -> dict[str, Any]:
    bounds = ParameterBounds(log_scale=frozenset({"reynolds"}) if log_reynolds else frozenset())
    samples = latin_hypercube(bounds, n, seed)
    rows = [dict(zip(bounds.names, row)) for row in samples.tolist()]
    return _ok({"seed": seed, "log_reynolds": log_reynolds, "conditions": rows})


def synth(config: RunConfig, out: Path, n_cases: int, with_2d: bool = True) -> dict[str, Any]:
    run_id = _new_run_id()
    index = write_synthetic_dataset(out / "3d", n_cases, config.seed)
    data = {"run_id": run_id, "root_3d": str(index.root_path), "cases_3d": len(index.cases)}
    if with_2d:
        index_2d = write_synthetic_dataset(out / "2d", n_cases, config.seed, dimensionality="2D")
        data.update({"root_2d": str(index_2d.root_path), "cases_2d": len(index_2d.cases)})
    write_run_manifest(out, "synth", config, {"n_cases": n_cases, "with_2d": with_2d})
    record_event("dataset.synth", "ok", data, run_id)
    return _ok(data)
