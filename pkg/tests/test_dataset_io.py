from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from app.conditions import FlowCondition
from app.dataset_io import (
    AeroCoefficients,
    SplitAssignment,
    WingCase,
    import_release,
    load_case,
    load_manifest,
    pair_2d_3d,
    read_slices,
    split_dataset,
    write_manifest,
    write_slices,
)
from app.errors import OptiwingError
from app.geometry import extrude
from app.synthetic import DATASET_STATIONS, naca4_section, synthesize_cases, write_synthetic_dataset


def test_empty_directory_has_no_cases(tmp_path) -> None:
    index = load_manifest(tmp_path)
    assert index.cases == ()
    assert index.report()["n_cases"] == 0


def test_missing_root_is_reported(tmp_path) -> None:
    with pytest.raises(OptiwingError) as exc:
        load_manifest(tmp_path / "nowhere")
    assert exc.value.code == "data_root_not_found"
    assert exc.value.status_code == 404


def test_unsupported_manifest_schema(tmp_path) -> None:
    (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 99, "cases": []}), encoding="utf-8")
    with pytest.raises(OptiwingError) as exc:
        load_manifest(tmp_path)
    assert exc.value.code == "manifest_unreadable"


def test_written_cases_read_back_exactly(tmp_path) -> None:
    original = synthesize_cases(3, seed=1, n_points=65)
    write_synthetic_dataset(tmp_path, 3, seed=1, n_points=65)

    index = load_manifest(tmp_path, workers=2)
    loaded = load_case(index, "wing_0001")

    assert index.ids() == ["wing_0000", "wing_0001", "wing_0002"]
    assert loaded.condition == original[1].condition
    assert loaded.alpha_opt == original[1].alpha_opt
    assert loaded.coefficients["optimized"].cd == original[1].coefficients["optimized"].cd
    for read, written in zip(loaded.optimized.slices, original[1].optimized.slices):
        np.testing.assert_array_equal(read.coords, written.coords)
    np.testing.assert_array_equal(loaded.optimized.span_stations, DATASET_STATIONS)
    assert loaded.optimized.pressure is not None


def test_corrupt_case_is_skipped(tmp_path) -> None:
    write_synthetic_dataset(tmp_path, 4, seed=2, n_points=65)
    (tmp_path / "cases" / "wing_0002_optimized.csv").write_text("x,y\n1,2\n", encoding="utf-8")

    index = load_manifest(tmp_path)

    assert index.ids() == ["wing_0000", "wing_0001", "wing_0003"]
    assert [record.case_id for record in index.skipped] == ["wing_0002"]
    assert "missing columns" in index.skipped[0].reason


def test_duplicate_case_ids_are_skipped(tmp_path) -> None:
    write_synthetic_dataset(tmp_path, 2, seed=3, n_points=65)
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    write_manifest(tmp_path, manifest["cases"] + [manifest["cases"][0]])

    index = load_manifest(tmp_path)

    assert len(index.cases) == 2
    assert index.skipped[0].reason == "duplicate case_id"


def test_unknown_case_lookup(tmp_path) -> None:
    index = write_synthetic_dataset(tmp_path, 1, seed=0, n_points=65)
    with pytest.raises(OptiwingError) as exc:
        index.get("wing_9999")
    assert exc.value.status_code == 404


def test_slice_file_without_pressure(tmp_path) -> None:
    wing = extrude(naca4_section("0012", 33), DATASET_STATIONS[:3])
    path = tmp_path / "wing.csv"

    write_slices(path, wing)
    read = read_slices(path)

    assert read.pressure is None
    assert read.n_slices == 3
    np.testing.assert_array_equal(read.slices[2].coords, wing.slices[2].coords)


def test_split_counts_are_disjoint_and_deterministic(tmp_path) -> None:
    index = write_synthetic_dataset(tmp_path, 10, seed=4, n_points=33)

    split = split_dataset(index, seed=7, counts=(6, 2, 2))
    again = split_dataset(index, seed=7, counts=(6, 2, 2))
    other = split_dataset(index, seed=8, counts=(6, 2, 2))

    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (6, 2, 2)
    assert set(split.train_ids) | set(split.val_ids) | set(split.test_ids) == set(index.ids())
    assert not set(split.train_ids) & set(split.test_ids)
    assert split == again
    assert split.train_ids != other.train_ids


def test_split_may_leave_train_empty(tmp_path) -> None:
    index = write_synthetic_dataset(tmp_path, 3, seed=5, n_points=33)
    split = split_dataset(index, seed=0, counts=(0, 0, 3))
    assert split.train_ids == ()
    assert sorted(split.test_ids) == index.ids()


def test_split_rejects_too_many_cases(tmp_path) -> None:
    index = write_synthetic_dataset(tmp_path, 3, seed=5, n_points=33)
    with pytest.raises(OptiwingError) as exc:
        split_dataset(index, seed=0, counts=(2, 1, 1))
    assert exc.value.code == "split_counts_exceed_cases"
    assert exc.value.detail["error"]["details"] == {"counts": [2, 1, 1], "available": 3}


def test_split_file_round_trip_and_corruption() -> None:
    split = SplitAssignment(train_ids=("a", "b"), val_ids=("c",), test_ids=("d",), seed=3)
    assert SplitAssignment.from_dict(split.to_dict()) == split
    assert split.ids_for("val") == ("c",)
    with pytest.raises(OptiwingError) as exc:
        SplitAssignment.from_dict({"train": []})
    assert exc.value.code == "split_corrupt"


def test_pairing_matches_shared_airfoil_and_condition(tmp_path) -> None:
    index3d = write_synthetic_dataset(tmp_path / "3d", 4, seed=6, n_points=33)
    index2d = write_synthetic_dataset(tmp_path / "2d", 4, seed=6, dimensionality="2D", n_points=33)

    result = pair_2d_3d(index2d, index3d)

    assert result.pairs == tuple((f"airfoil_{i:04d}", f"wing_{i:04d}") for i in range(4))
    assert result.unmatched == ()


def test_pairing_reports_unmatched_cases(tmp_path) -> None:
    index3d = write_synthetic_dataset(tmp_path / "3d", 3, seed=6, n_points=33)
    index2d = write_synthetic_dataset(tmp_path / "2d", 2, seed=9, dimensionality="2D", n_points=33)

    result = pair_2d_3d(index2d, index3d)

    assert result.pairs == ()
    assert {record.dimensionality for record in result.unmatched} == {"2D", "3D"}
    assert len(result.to_dict()["unmatched"]) == 5


def test_aero_coefficients() -> None:
    assert AeroCoefficients(cl=0.8, cd=0.02).l_over_d == pytest.approx(40.0)
    with pytest.raises(OptiwingError):
        AeroCoefficients(cl=0.8, cd=0.0)


def test_case_rejects_alpha_out_of_range() -> None:
    wing = extrude(naca4_section("0012", 33), DATASET_STATIONS)
    with pytest.raises(OptiwingError) as exc:
        WingCase(
            case_id="bad",
            condition=FlowCondition(mach=0.6, reynolds=5e6, cl_con=0.8, vmin_frac=0.85),
            initial=wing,
            optimized=wing,
            coefficients={},
            alpha_opt=12.0,
        )
    assert exc.value.code == "alpha_out_of_range"


def _release_slices(path, wing) -> None:
    rows = [
        pd.DataFrame({"x": section.coords[:, 0], "y": section.coords[:, 1], "z": station})
        for section, station in zip(wing.slices, wing.span_stations)
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(rows).to_csv(path, index=False)


def test_import_release_translates_layout(tmp_path) -> None:
    src = tmp_path / "release"
    wing = extrude(naca4_section("2412", 33), DATASET_STATIONS)
    for case_id in ("c1", "c2"):
        _release_slices(src / "slices" / f"{case_id}_initial.csv", wing)
        _release_slices(src / "slices" / f"{case_id}_optimized.csv", wing)
    # c3 has no slice files.
    pd.DataFrame(
        {
            "case_id": ["c1", "c2", "c3"],
            "airfoil_id": ["naca2412"] * 3,
            "mach": [0.6, 0.7, 0.8],
            "reynolds": [5e6, 2e6, 8e6],
            "cl_con": [0.8, 0.9, 1.0],
            "vmin_frac": [0.85, 0.9, 0.95],
            "alpha_opt": [2.0, 3.0, 4.0],
            "cl_init": [0.5] * 3,
            "cd_init": [0.02] * 3,
            "cl_opt": [0.8, 0.9, 1.0],
            "cd_opt": [0.018] * 3,
            "initial_failed": [0, 1, 0],
        }
    ).to_csv(src / "cases.csv", index=False)

    with pytest.warns(RuntimeWarning, match="c3"):
        index = import_release(src, tmp_path / "canonical")

    assert index.ids() == ["c1", "c2"]
    assert [record.case_id for record in index.skipped] == ["c3"]
    assert index.report()["n_skipped"] == 1
    assert index.get("c2").has_initial_sim is False
    case = load_case(index, "c1")
    assert case.optimized.n_slices == 10
    assert case.optimized.pressure is None
    np.testing.assert_allclose(case.optimized.slices[3].coords, wing.slices[3].coords)


def test_import_release_reads_missing_failure_flag_as_success(tmp_path) -> None:
    src = tmp_path / "release"
    wing = extrude(naca4_section("0012", 33), DATASET_STATIONS)
    for case_id in ("c1", "c2"):
        _release_slices(src / "slices" / f"{case_id}_initial.csv", wing)
        _release_slices(src / "slices" / f"{case_id}_optimized.csv", wing)
    pd.DataFrame(
        {
            "case_id": ["c1", "c2"],
            "airfoil_id": ["naca0012"] * 2,
            "mach": [0.6, 0.7],
            "reynolds": [5e6, 2e6],
            "cl_con": [0.8, 0.9],
            "vmin_frac": [0.85, 0.9],
            "alpha_opt": [2.0, 3.0],
            "cl_init": [0.5] * 2,
            "cd_init": [0.02] * 2,
            "cl_opt": [0.8, 0.9],
            "cd_opt": [0.018] * 2,
            "initial_failed": [np.nan, 1.0],
        }
    ).to_csv(src / "cases.csv", index=False)

    index = import_release(src, tmp_path / "canonical")

    assert index.get("c1").has_initial_sim is True
    assert index.get("c2").has_initial_sim is False
    assert index.skipped == ()


def test_import_release_needs_case_table(tmp_path) -> None:
    with pytest.raises(OptiwingError) as exc:
        import_release(tmp_path, tmp_path / "out")
    assert exc.value.code == "release_not_found"
