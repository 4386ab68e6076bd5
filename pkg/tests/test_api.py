from __future__ import annotations

import math

import pytest
from fastapi.testclient import TestClient

import app.main as main_module
from app import __version__
from app.audit import configure_audit_store
from app.main import app
from app.synthetic import write_synthetic_dataset


client = TestClient(app)


@pytest.fixture(autouse=True)
def isolated_audit(tmp_path) -> None:
    configure_audit_store(tmp_path / "audit.jsonl")


def test_health() -> None:
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok", "version": __version__}


def test_startup_configures_audit_store(monkeypatch: pytest.MonkeyPatch, tmp_path) -> None:
    calls = []
    monkeypatch.setenv("OPTIWING_AUDIT_PATH", str(tmp_path / "events.json"))
    monkeypatch.setattr(main_module, "configure_audit_store", calls.append)

    main_module.configure_stores()

    assert calls == [tmp_path / "events.json"]


def test_ywall_endpoint() -> None:
    response = client.post("/tools/ywall", json={"mach": 0.5, "reynolds": 5e6})

    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert body["data"]["result"]["delta"] == pytest.approx(5.28e-6, rel=5e-3)
    assert body["data"]["inputs"]["t_inf"] == 300.0


def test_ywall_rejects_missing_and_invalid_fields() -> None:
    missing = client.post("/tools/ywall", json={"mach": 0.5})
    invalid = client.post("/tools/ywall", json={"mach": "fast", "reynolds": 5e6})
    negative = client.post("/tools/ywall", json={"mach": -0.5, "reynolds": 5e6})

    assert missing.status_code == 400
    assert missing.json()["detail"]["error"]["code"] == "missing_field"
    assert invalid.json()["detail"]["error"]["code"] == "invalid_field"
    assert negative.json()["detail"]["error"]["code"] == "invalid_wall_spacing_input"


def test_lhs_endpoint() -> None:
    response = client.post("/tools/lhs", json={"n": 5, "seed": 2, "log_reynolds": True})

    conditions = response.json()["data"]["conditions"]
    assert len(conditions) == 5
    assert all(1e6 <= row["reynolds"] <= 1e7 for row in conditions)


def test_mmd_endpoint() -> None:
    response = client.post("/tools/metrics/mmd", json={"p": [[0.0]], "q": [[1.0]], "gammas": [0.5]})

    assert response.status_code == 200
    assert response.json()["data"]["mmd"] == pytest.approx(2.0 - 2.0 * math.exp(-0.5))


def test_mmd_endpoint_rejects_bad_gammas() -> None:
    response = client.post("/tools/metrics/mmd", json={"p": [[0.0]], "q": [[1.0]], "gammas": [-1.0]})
    assert response.status_code == 400
    assert response.json()["detail"]["error"]["code"] == "invalid_kernel_config"


def test_vendi_endpoint() -> None:
    response = client.post("/tools/metrics/vendi", json={"samples": [[0.0], [0.0], [0.0]]})
    assert response.json()["data"]["vendi"] == pytest.approx(1.0)


def test_ingest_and_split_runs(tmp_path) -> None:
    root = tmp_path / "wings"
    write_synthetic_dataset(root, 4, seed=1, n_points=33)

    ingest = client.post("/runs/ingest", json={"data_root": str(root), "out": str(tmp_path / "ingest")})
    split = client.post(
        "/runs/split",
        json={"data_root": str(root), "out": str(tmp_path / "split"), "seed": 3},
    )

    assert ingest.status_code == 200
    assert ingest.json()["data"]["n_cases"] == 4
    assert split.json()["data"]["seed"] == 3
    assert sum(split.json()["data"]["counts"]) == 4
    assert (tmp_path / "split" / "split.json").exists()


def test_ingest_of_empty_root(tmp_path) -> None:
    response = client.post("/runs/ingest", json={"data_root": str(tmp_path), "out": str(tmp_path / "out")})
    assert response.status_code == 422
    assert response.json()["detail"]["error"]["code"] == "no_valid_cases"


def test_analyze_requires_kind(tmp_path) -> None:
    response = client.post("/runs/analyze", json={"data_root": str(tmp_path)})
    assert response.json()["detail"]["error"]["code"] == "missing_field"


def test_audit_listing_filters_by_step() -> None:
    client.post("/tools/lhs", json={"n": 2})
    client.post("/tools/ywall", json={"mach": 0.6, "reynolds": 3e6})

    response = client.get("/audit", params={"step": "sampling.lhs", "status": "ok"})

    events = response.json()["data"]["events"]
    assert [event["step"] for event in events] == ["sampling.lhs"]
    assert events[0]["payload"] == {"n": 2}
