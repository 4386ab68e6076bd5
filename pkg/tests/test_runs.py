from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch

from app import runs
from app.audit import configure_audit_store
from app.config import RunConfig, preset_config
from app.dataset_io import load_manifest, write_dataset
from app.diffusion import load_checkpoint
from app.errors import OptiwingError
from app.metrics import KernelConfig
from app.synthetic import section_case, synthesize_cases, write_synthetic_dataset


CONDITIONS = pd.DataFrame(
    {
        "row_id": ["a", "b"],
        "mach": [0.6, 0.75],
        "reynolds": [5e6, 2e6],
        "cl_con": [0.8, 1.0],
        "vmin_frac": [0.85, 0.9],
        "airfoil": ["naca2412", "0012"],
    }
)


def tiny_config(root: Path, root_2d: Path | None = None) -> RunConfig:
    base = preset_config("tiny")
    return replace(
        base,
        data_root=str(root),
        data_root_2d=str(root_2d) if root_2d else None,
        split_counts=(4, 1, 1),
        training=replace(base.training, epochs=2, n_steps=20),
    )


@pytest.fixture(autouse=True)
def memory_audit_store() -> None:
    configure_audit_store(None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    base = tmp_path_factory.mktemp("wings")
    write_synthetic_dataset(base / "3d", 6, seed=0, n_points=65)
    write_synthetic_dataset(base / "2d", 6, seed=0, dimensionality="2D", n_points=65)
    return base / "3d", base / "2d"


@pytest.fixture(scope="module")
def trained(dataset: tuple[Path, Path], tmp_path_factory: pytest.TempPathFactory) -> tuple[RunConfig, Path, Path]:
    configure_audit_store(None)
    out = tmp_path_factory.mktemp("runs")
    config = tiny_config(dataset[0])
    runs.fit_bezier(config, out / "fit")
    runs.train(config, out / "train", latents_path=out / "fit" / "latents.csv")
    return config, out / "train" / "checkpoint.pt", out / "fit" / "latents.csv"


def test_ingest_writes_report(dataset: tuple[Path, Path], tmp_path: Path) -> None:
    result = runs.ingest(tiny_config(dataset[0]), tmp_path)

    assert result["status"] == "ok"
    assert result["data"]["n_cases"] == 6
    assert json.loads((tmp_path / "ingest_report.json").read_text(encoding="utf-8"))["n_skipped"] == 0
    assert len(pd.read_csv(tmp_path / "cases.csv")) == 6
    manifest = json.loads((tmp_path / "run_manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "ingest"
    assert manifest["seed"] == 0


def test_ingest_of_empty_root_fails(tmp_path: Path) -> None:
    (tmp_path / "empty").mkdir()
    with pytest.raises(OptiwingError) as exc:
        runs.ingest(tiny_config(tmp_path / "empty"), tmp_path / "out")
    assert exc.value.code == "no_valid_cases"
    assert exc.value.status_code == 422


def test_missing_data_root(tmp_path: Path) -> None:
    with pytest.raises(OptiwingError) as exc:
        runs.split(preset_config("tiny"), tmp_path)
    assert exc.value.code == "data_root_missing"


def test_split_writes_assignment(dataset: tuple[Path, Path], tmp_path: Path) -> None:
    result = runs.split(tiny_config(dataset[0]), tmp_path)

    payload = json.loads((tmp_path / "split.json").read_text(encoding="utf-8"))
    assert result["data"]["counts"] == [4, 1, 1]
    assert (len(payload["train"]), len(payload["val"]), len(payload["test"])) == (4, 1, 1)


def test_latent_file_round_trip(trained: tuple[RunConfig, Path, Path]) -> None:
    _, _, latents = trained

    encoded = runs.read_latents(latents)

    assert encoded.shape.shape == (6, 9, 90)
    assert encoded.eta.shape == (6, 9)
    assert encoded.z_a0.shape == (6, 90)
    assert np.all(np.isfinite(encoded.fit_mse))
    assert len(pd.read_csv(latents.parent / "fit_report.csv")) == 60
    assert (latents.parent / "fit_errors.plot.json").exists()
    with pytest.raises(OptiwingError) as exc:
        encoded.subset(["wing_9999"])
    assert exc.value.code == "latents_missing_cases"


def test_corrupt_latent_file(tmp_path: Path) -> None:
    path = tmp_path / "latents.csv"
    path.write_text("case_id,role\nwing_0000,optimized\n", encoding="utf-8")
    with pytest.raises(OptiwingError) as exc:
        runs.read_latents(path)
    assert exc.value.code == "latents_corrupt"


def test_training_outputs(trained: tuple[RunConfig, Path, Path]) -> None:
    _, checkpoint, _ = trained
    log = pd.read_csv(checkpoint.parent / "training_log.csv")
    assert list(log["epoch"]) == [0, 1]
    assert np.all(np.isfinite(log["loss"]))
    assert (checkpoint.parent / "training_loss.plot.json").exists()


def test_resume_continues_epochs(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, latents = trained

    result = runs.train(config, tmp_path, latents_path=latents, resume=checkpoint)

    assert result["data"]["epoch"] == 4
    assert len(pd.read_csv(tmp_path / "training_log.csv")) == 4


def test_resume_with_other_schedule_is_rejected(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, latents = trained
    other = replace(config, training=replace(config.training, n_steps=30))

    with pytest.raises(OptiwingError) as exc:
        runs.train(other, tmp_path, latents_path=latents, resume=checkpoint)

    assert exc.value.code == "schedule_mismatch"
    assert exc.value.status_code == 409


def test_generate_is_deterministic(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    conditions = tmp_path / "conditions.csv"
    CONDITIONS.to_csv(conditions, index=False)

    first = runs.generate(config, checkpoint, conditions, tmp_path / "first", seed=5)
    runs.generate(config, checkpoint, conditions, tmp_path / "second", seed=5)

    assert first["data"]["generated"] == 2
    table = pd.read_csv(tmp_path / "first" / "generated.csv")
    assert list(table["row_id"]) == ["a", "b"]
    assert np.all(table["volume_fraction"] > 0.0)
    a = pd.read_csv(tmp_path / "first" / "designs" / "a.csv")
    b = pd.read_csv(tmp_path / "second" / "designs" / "a.csv")
    pd.testing.assert_frame_equal(a, b)
    assert a["slice"].nunique() == 9


def test_generate_grid_expands_first_row(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    conditions = tmp_path / "conditions.csv"
    CONDITIONS.to_csv(conditions, index=False)

    result = runs.generate(config, checkpoint, conditions, tmp_path / "grid", grid=([0.5, 0.7], [0.6, 0.9, 1.2]))

    table = pd.read_csv(tmp_path / "grid" / "generated.csv")
    assert result["data"]["generated"] == 6
    assert list(table["mach"]) == [0.5, 0.5, 0.5, 0.7, 0.7, 0.7]
    assert set(table["reynolds"]) == {5e6}


def test_generate_with_empty_conditions(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    conditions = tmp_path / "conditions.csv"
    conditions.write_text("", encoding="utf-8")

    result = runs.generate(config, checkpoint, conditions, tmp_path / "out")

    assert result["data"]["generated"] == 0
    assert pd.read_csv(tmp_path / "out" / "generated.csv").empty


def test_generate_needs_an_initial_section(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    conditions = tmp_path / "conditions.csv"
    CONDITIONS.drop(columns="airfoil").to_csv(conditions, index=False)
    with pytest.raises(OptiwingError) as exc:
        runs.generate(config, checkpoint, conditions, tmp_path / "out")
    assert exc.value.code == "missing_initial_section"


def test_evaluate_writes_metrics(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, latents = trained

    result = runs.evaluate(config, checkpoint, "test", tmp_path, passes=2, latents_path=latents)

    report = json.loads((tmp_path / "metrics_test.json").read_text(encoding="utf-8"))
    assert report["passes"] == 2
    assert report["mse_shape"]["mean"] >= 0.0
    assert 0.0 <= report["vol_constraint_pct"]["mean"] <= 100.0
    assert report["spearman"]["shape_error"]["mach"]["defined"] is False
    assert set(report["spearman"]) == {"shape_error", "alpha_error"}
    assert len(report["profiles"]["mse_shape"]) == 9
    assert len(pd.read_csv(tmp_path / "metrics_test.csv")) == 7
    assert len(pd.read_csv(tmp_path / "profiles_test.csv")) == 9
    assert result["data"]["report"]["split"] == "test"


def replay_latents(encoded: runs.EncodedSet, alpha_shift: np.ndarray | None = None):
    """Stand-in sampler returning each case's own fitted latents."""
    rows = {tuple(row): i for i, row in enumerate(encoded.conditions.tolist())}

    def replay(_checkpoint, conditionings, _seed, counter=()):
        picked = [rows[tuple(item.condition.as_array())] for item in conditionings]
        state = encoded.subset([encoded.case_ids[i] for i in picked]).design_state()
        if alpha_shift is None:
            return state
        shift = torch.as_tensor(alpha_shift[picked], dtype=torch.float32).reshape(-1, 1)
        return state.map(lambda name, value: value + shift if name == "alpha" else value)

    return replay


def test_shape_error_includes_bezier_fitting_error(
    trained: tuple[RunConfig, Path, Path],
    dataset: tuple[Path, Path],
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    config, checkpoint_path, latents = trained
    index = load_manifest(dataset[0])
    case_ids = [case.case_id for case in index.cases[:3]]
    target = runs.evaluation_target(config, index, case_ids, latents)
    fitted = runs.read_latents(latents).subset(case_ids)
    poorly_fitted = replace(fitted, shape=fitted.shape.copy())
    poorly_fitted.shape[:, :, 30:60] += 0.01
    checkpoint = load_checkpoint(checkpoint_path)

    def shape_mse(encoded: runs.EncodedSet) -> float:
        monkeypatch.setattr(runs, "sample_designs", replay_latents(encoded))
        values, _, _ = runs.evaluate_pass(checkpoint, target, KernelConfig(gammas=(0.5,)), 0, 0, config.eval_points)
        return values["mse_shape"]

    good = shape_mse(fitted)
    poor = shape_mse(poorly_fitted)

    assert good > 0.0
    # A 0.01 shift in y on half of the coordinates adds 0.01**2 / 2.
    assert poor - good == pytest.approx(5e-5, rel=0.2)


def test_evaluate_correlates_alpha_error_with_conditions(
    trained: tuple[RunConfig, Path, Path],
    monkeypatch: pytest.MonkeyPatch,
    tmp_path: Path,
) -> None:
    config, checkpoint, latents = trained
    encoded = runs.read_latents(latents)
    monkeypatch.setattr(runs, "sample_designs", replay_latents(encoded, encoded.conditions[:, 1] / 1e6))

    result = runs.evaluate(
        replace(config, split_counts=(2, 0, 4)), checkpoint, "test", tmp_path, passes=1, latents_path=latents
    )

    errors = pd.read_csv(tmp_path / "case_errors_test.csv")
    assert len(errors) == 4
    np.testing.assert_allclose(errors["alpha_error"], (errors["reynolds"] / 1e6) ** 2, rtol=1e-4)
    correlations = result["data"]["spearman"]["alpha_error"]
    assert correlations["reynolds"]["rho"] == pytest.approx(1.0)
    assert correlations["reynolds"]["n"] == 4
    assert set(correlations) == {"mach", "reynolds", "cl_con", "vmin_frac"}


def test_evaluate_rejects_zero_passes(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    with pytest.raises(OptiwingError) as exc:
        runs.evaluate(config, checkpoint, "test", tmp_path, passes=0)
    assert exc.value.code == "invalid_passes"


def test_evaluate_empty_split(trained: tuple[RunConfig, Path, Path], tmp_path: Path) -> None:
    config, checkpoint, _ = trained
    empty = replace(config, split_counts=(6, 0, 0))
    with pytest.raises(OptiwingError) as exc:
        runs.evaluate(empty, checkpoint, "val", tmp_path, passes=1)
    assert exc.value.code == "split_empty"


def test_analyze_pca_and_diff(dataset: tuple[Path, Path], tmp_path: Path) -> None:
    config = tiny_config(*dataset)

    pca = runs.analyze(config, "pca", tmp_path / "pca")
    diff = runs.analyze(config, "diff", tmp_path / "diff")

    assert set(pca["data"]["results"]) == {"geometry_3d", "pressure_3d", "geometry_2d"}
    assert (tmp_path / "pca" / "pca_geometry_3d.csv").exists()
    assert diff["data"]["results"]["unmatched"] == 0
    assert (tmp_path / "diff" / "pairing_2d_3d.json").exists()
    assert len(pd.read_csv(tmp_path / "diff" / "diff_shape.csv")) == 6 * 100


def test_diff_pairs_datasets_that_share_case_ids(tmp_path: Path) -> None:
    cases = synthesize_cases(3, seed=4, n_points=65)
    rng = np.random.default_rng(4)
    write_dataset(tmp_path / "3d", cases)
    write_dataset(tmp_path / "2d", [section_case(case, case.case_id, rng) for case in cases], "2D")

    result = runs.analyze(tiny_config(tmp_path / "3d", tmp_path / "2d"), "diff", tmp_path / "diff")

    pairing = json.loads((tmp_path / "diff" / "pairing_2d_3d.json").read_text(encoding="utf-8"))
    assert sorted(pairing["pairs"]) == [[case.case_id, case.case_id] for case in cases]
    assert result["data"]["results"]["unmatched"] == 0
    assert "2d_3d" in result["data"]["results"]
    assert (tmp_path / "diff" / "diff_2d_3d.csv").exists()


def test_analyze_ld(dataset: tuple[Path, Path], tmp_path: Path) -> None:
    result = runs.analyze(tiny_config(dataset[0]), "ld", tmp_path)
    assert set(result["data"]["results"]) == {"mach", "reynolds"}
    assert (tmp_path / "ld_reynolds.csv").exists()


def test_analyze_unknown_kind(dataset: tuple[Path, Path], tmp_path: Path) -> None:
    with pytest.raises(OptiwingError) as exc:
        runs.analyze(tiny_config(dataset[0]), "tsne", tmp_path)
    assert exc.value.code == "unknown_analysis"


def test_ablate_with_stub_training(tmp_path: Path) -> None:
    result = runs.ablate(
        preset_config("tiny"),
        tmp_path,
        [50, 100],
        repeats=1,
        passes=2,
        train_fn=lambda size, repeat: size,
        eval_fn=lambda model, pass_index: {"mse_shape": 10.0 / model},
    )

    curve = pd.read_csv(tmp_path / "ablation.csv")
    rates = pd.read_csv(tmp_path / "improvement_rates.csv")
    assert result["data"]["sizes"] == [50, 100]
    assert list(curve["mse_shape_mean"]) == pytest.approx([0.2, 0.1])
    assert rates["rate_pct_per_sample"].iloc[0] == pytest.approx(1.0)


def test_ywall_and_lhs() -> None:
    spacing = runs.ywall(0.5, 5e6)
    samples = runs.lhs(8, seed=3, log_reynolds=True)

    assert spacing["data"]["result"]["delta"] == pytest.approx(5.28e-6, rel=5e-3)
    assert len(samples["data"]["conditions"]) == 8
    assert set(samples["data"]["conditions"][0]) == {"mach", "reynolds", "cl_con", "vmin_frac"}


def test_synth_writes_both_dimensionalities(tmp_path: Path) -> None:
    result = runs.synth(preset_config("tiny"), tmp_path, 2)
    assert result["data"]["cases_3d"] == 2
    assert result["data"]["cases_2d"] == 2
    assert (tmp_path / "2d" / "manifest.json").exists()
