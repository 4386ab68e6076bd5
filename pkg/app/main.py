from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from fastapi import FastAPI

import app as package
from app import runs
from app.audit import configure_audit_store, list_events as list_audit_events, record_event
from app.config import RunConfig, get_settings, load_run_config
from app.errors import OptiwingError
from app.metrics import DEFAULT_GAMMAS, KernelConfig, mmd_avg, vendi_avg

app = FastAPI(title="OptiWing3D API", version=package.__version__)


@app.on_event("startup")
def configure_stores() -> None:
    settings = get_settings()
    audit_path = Path(settings.audit_store_path) if settings.audit_store_path else None
    configure_audit_store(audit_path)


def _required(payload: dict[str, object], key: str) -> object:
    value = payload.get(key)
    if value is None:
        raise OptiwingError("missing_field", f"{key} is required.")
    return value


def _number(payload: dict[str, object], key: str, default: float | None = None) -> float:
    value = payload.get(key, default)
    if value is None:
        raise OptiwingError("missing_field", f"{key} is required.")
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise OptiwingError("invalid_field", f"{key} must be a number.") from exc


def _kernel(payload: dict[str, object]) -> KernelConfig:
    gammas = payload.get("gammas") or DEFAULT_GAMMAS
    try:
        return KernelConfig(gammas=tuple(float(gamma) for gamma in gammas), unbiased=payload.get("unbiased") is True)
    except (TypeError, ValueError) as exc:
        raise OptiwingError("invalid_field", "gammas must be a list of numbers.") from exc


def _run_config(payload: dict[str, object]) -> RunConfig:
    config = load_run_config(payload.get("config"), preset=str(payload.get("preset", "desk")))
    if payload.get("seed") is not None:
        config = replace(config, seed=int(_number(payload, "seed")))
    return config


def _out_dir(payload: dict[str, object], config: RunConfig, command: str) -> Path:
    return Path(str(payload.get("out") or Path(config.output_dir) / command))


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok", "version": package.__version__}


@app.post("/tools/ywall")
def tools_ywall(payload: dict[str, object]) -> dict[str, object]:
    result = runs.ywall(
        mach=_number(payload, "mach"),
        reynolds=_number(payload, "reynolds"),
        t_inf=_number(payload, "t_inf", 300.0),
        l_ref=_number(payload, "l_ref", 1.0),
        y_plus=_number(payload, "y_plus", 1.0),
    )
    record_event("sampling.ywall", "ok", payload)
    return result


@app.post("/tools/lhs")
def tools_lhs(payload: dict[str, object]) -> dict[str, object]:
    result = runs.lhs(
        n=int(_number(payload, "n")),
        seed=int(_number(payload, "seed", 0)),
        log_reynolds=payload.get("log_reynolds") is True,
    )
    record_event("sampling.lhs", "ok", payload)
    return result


@app.post("/tools/metrics/mmd")
def tools_mmd(payload: dict[str, object]) -> dict[str, object]:
    kernel = _kernel(payload)
    value = mmd_avg(_required(payload, "p"), _required(payload, "q"), kernel)
    record_event("metrics.mmd", "ok", {"gammas": list(kernel.gammas), "unbiased": kernel.unbiased})
    return {"status": "ok", "data": {"mmd": value, "gammas": list(kernel.gammas)}}


@app.post("/tools/metrics/vendi")
def tools_vendi(payload: dict[str, object]) -> dict[str, object]:
    kernel = _kernel(payload)
    value = vendi_avg(_required(payload, "samples"), kernel)
    record_event("metrics.vendi", "ok", {"gammas": list(kernel.gammas)})
    return {"status": "ok", "data": {"vendi": value, "gammas": list(kernel.gammas)}}


@app.post("/runs/ingest")
def runs_ingest(payload: dict[str, object]) -> dict[str, object]:
    config = _run_config(payload)
    return runs.ingest(config, _out_dir(payload, config, "ingest"), root=payload.get("data_root"))


@app.post("/runs/split")
def runs_split(payload: dict[str, object]) -> dict[str, object]:
    config = _run_config(payload)
    return runs.split(config, _out_dir(payload, config, "split"), root=payload.get("data_root"))


@app.post("/runs/analyze")
def runs_analyze(payload: dict[str, object]) -> dict[str, object]:
    config = _run_config(payload)
    kind = str(_required(payload, "kind"))
    return runs.analyze(
        config,
        kind,
        _out_dir(payload, config, f"analyze_{kind}"),
        root=payload.get("data_root"),
        root_2d=payload.get("data_root_2d"),
    )


@app.get("/audit")
def audit_list(
    step: str | None = None,
    run_id: str | None = None,
    status: str | None = None,
    since: str | None = None,
    limit: int | None = None,
) -> dict[str, object]:
    return list_audit_events({"step": step, "run_id": run_id, "status": status, "since": since, "limit": limit})
