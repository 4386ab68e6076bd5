from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from app.errors import OptiwingError


CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Settings:
    data_root: str | None
    data_root_2d: str | None
    output_dir: str
    audit_store_path: str | None
    device: str
    workers: int
    seed: int


def get_settings() -> Settings:
    return Settings(
        data_root=os.getenv("OPTIWING_DATA_ROOT"),
        data_root_2d=os.getenv("OPTIWING_DATA_ROOT_2D"),
        output_dir=os.getenv("OPTIWING_OUTPUT_DIR", "./runs"),
        audit_store_path=os.getenv("OPTIWING_AUDIT_PATH"),
        device=os.getenv("OPTIWING_DEVICE", "cpu"),
        workers=int(os.getenv("OPTIWING_WORKERS", "1")),
        seed=int(os.getenv("OPTIWING_SEED", "0")),
    )


@dataclass(frozen=True)
class TrainingConfig:
    network: str = "desk"
    n_steps: int = 1000
    beta_end: float = 0.02
    beta_starts: dict[str, float] = field(
        default_factory=lambda: {"shape": 1e-6, "alpha": 1e-4, "eta": 1e-4}
    )
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {"shape": 500.0, "alpha": 1.0, "eta": 9.0}
    )
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    data_root: str | None = None
    data_root_2d: str | None = None
    output_dir: str = "./runs"
    seed: int = 0
    split_counts: tuple[int, int, int] | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    gammas: tuple[float, ...] = (0.5, 25.0, 50.0, 100.0)
    unbiased_mmd: bool = False
    n_control: int = 30
    section_points: int = 192
    eval_points: int = 192
    passes: int = 10
    workers: int = 1
    device: str = "cpu"
    schema_version: int = CONFIG_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["split_counts"] = list(self.split_counts) if self.split_counts else None
        payload["gammas"] = list(self.gammas)
        return payload


PRESETS: dict[str, RunConfig] = {
    "full": RunConfig(
        preset="full",
        training=TrainingConfig(network="full", epochs=20000, batch_size=64, learning_rate=1e-4),
    ),
    "desk": RunConfig(preset="desk"),
    "tiny": RunConfig(
        preset="tiny",
        training=TrainingConfig(network="tiny", n_steps=50, epochs=5, batch_size=8, learning_rate=1e-3),
        section_points=64,
        eval_points=64,
        passes=2,
    ),
}


def preset_config(name: str, settings: Settings | None = None) -> RunConfig:
    if name not in PRESETS:
        raise OptiwingError("unknown_preset", f"Unknown preset {name!r}; choose one of {sorted(PRESETS)}.")
    config = PRESETS[name]
    if settings is None:
        return config
    return replace(
        config,
        data_root=settings.data_root,
        data_root_2d=settings.data_root_2d,
        output_dir=settings.output_dir,
        seed=settings.seed,
        workers=settings.workers,
        device=settings.device,
    )


def _merge_training(base: TrainingConfig, payload: dict[str, Any]) -> TrainingConfig:
    known = {item.name for item in fields(TrainingConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise OptiwingError("unknown_config_key", f"Unknown training keys: {', '.join(unknown)}.")
    merged = dict(payload)
    for key in ("beta_starts", "loss_weights"):
        if key in merged:
            merged[key] = {**getattr(base, key), **merged[key]}
    return replace(base, **merged)


def config_from_dict(payload: dict[str, Any], settings: Settings | None = None) -> RunConfig:
    version = payload.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise OptiwingError(
            "config_schema_unsupported",
            f"Config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}.",
        )
    base = preset_config(str(payload.get("preset", "desk")), settings)
    known = {item.name for item in fields(RunConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise OptiwingError("unknown_config_key", f"Unknown config keys: {', '.join(unknown)}.")
    overrides = {key: value for key, value in payload.items() if key not in ("training", "preset")}
    if "split_counts" in overrides and overrides["split_counts"] is not None:
        counts = tuple(int(count) for count in overrides["split_counts"])
        if len(counts) != 3:
            raise OptiwingError("invalid_split_counts", "split_counts needs three integers.")
        overrides["split_counts"] = counts
    if "gammas" in overrides:
        overrides["gammas"] = tuple(float(gamma) for gamma in overrides["gammas"])
    try:
        config = replace(base, **overrides)
        if "training" in payload:
            config = replace(config, training=_merge_training(base.training, payload["training"]))
    except TypeError as exc:
        raise OptiwingError("invalid_config", f"Config cannot be applied: {exc}") from exc
    return config


def load_run_config(path: Path | str | None, settings: Settings | None = None, preset: str = "desk") -> RunConfig:
    """Resolve a run config: preset defaults, then environment settings, then the JSON file."""
    settings = settings or get_settings()
    if path is None:
        return preset_config(preset, settings)
    path = Path(path)
    if not path.exists():
        raise OptiwingError("config_not_found", f"Config file {path} does not exist.", status_code=404)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise OptiwingError("config_unreadable", f"Config file {path} is not valid JSON.", status_code=422) from exc
    if not isinstance(payload, dict):
        raise OptiwingError("config_unreadable", "Config file must hold a JSON object.", status_code=422)
    payload.setdefault("preset", preset)
    return config_from_dict(payload, settings)


def resolve_split_counts(config: RunConfig, n_cases: int) -> tuple[int, int, int]:
    """Configured counts, or the 661/38/77-of-776 proportions scaled to `n_cases`."""
    if config.split_counts is not None:
        return config.split_counts
    n_train = n_cases * 661 // 776
    n_val = n_cases * 38 // 776
    return n_train, n_val, n_cases - n_train - n_val
