import pytest
from fastapi.testclient import TestClient

from app.config import load_run_config
from app.main import create_app
from app.services.artifacts import train_run

INSTANCE = {
    "age": 35,
    "credit_amount": 9000,
    "duration": 36,
    "installment_rate": 4,
    "checking": "<0",
    "housing": "rent",
    "purpose": "car",
}


@pytest.fixture(scope="module")
def settings(tmp_path_factory, credit_csv):
    config = load_run_config(
        data_path=credit_csv,
        target_column="default",
        output_dir=tmp_path_factory.mktemp("run"),
        forest={"n_trees": 5},
        attack={"generations": 30},
        workers=1,
    )
    train_run(config)
    return config


@pytest.fixture(scope="module")
def client(settings):
    with TestClient(create_app(settings)) as client:
        yield client


@pytest.fixture
def empty_client(tmp_path):
    with TestClient(create_app(load_run_config(output_dir=tmp_path))) as client:
        yield client


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "healthy"
    assert body["run_loaded"] is True


def test_schema(client):
    body = client.get("/api/schema").json()
    assert body["target"] == "default"
    assert [f["name"] for f in body["features"]] == list(INSTANCE)


def test_predict(client):
    response = client.post("/api/predict", json={"instances": [INSTANCE, INSTANCE]})
    assert response.status_code == 200
    body = response.json()
    assert body["classes"] == ["0", "1"]
    assert body["probs"][0] == body["probs"][1]
    assert sum(body["probs"][0]) == pytest.approx(1.0)


def test_predict_unknown_level(client):
    response = client.post("/api/predict", json={"instances": [{**INSTANCE, "housing": "castle"}]})
    assert response.status_code == 422
    assert "castle" in response.json()["detail"]


def test_attack(client):
    response = client.post("/api/attack", json={"instance": INSTANCE, "seed": 4})
    assert response.status_code == 200
    body = response.json()
    assert body["seed"] == 4
    if body["success"] and not body["already_target"]:
        assert body["changed_features"]
        assert body["final_probs"].index(max(body["final_probs"])) == body["target_class"]


def test_attack_is_deterministic(client):
    first = client.post("/api/attack", json={"instance": INSTANCE, "seed": 2}).json()
    second = client.post("/api/attack", json={"instance": INSTANCE, "seed": 2}).json()
    assert first == second


def test_attack_missing_feature(client):
    instance = dict(INSTANCE)
    del instance["age"]
    response = client.post("/api/attack", json={"instance": instance})
    assert response.status_code == 422


def test_score_uses_run_scorecard(client):
    response = client.post("/api/score", json={"pds": [1 / 21], "scorecard": {"rounding": "nearest"}})
    assert response.json() == {"scores": [600]}


def test_score_rejects_bad_probability(client):
    assert client.post("/api/score", json={"pds": [0.0]}).status_code == 422
    assert client.post("/api/score", json={"pds": []}).status_code == 422


def test_without_run(empty_client):
    assert empty_client.get("/health").json()["run_loaded"] is False
    assert empty_client.get("/api/schema").status_code == 503
    assert empty_client.post("/api/score", json={"pds": [0.5]}).status_code == 200
