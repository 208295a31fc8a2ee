import json

import pytest
import uvicorn

from app.cli import EXIT_OK, EXIT_USAGE, main
from app.config import load_run_config

CONFIG = """\
data_path = "{data}"
target_column = "{target}"
workers = 1
log_level = "WARNING"

[forest]
n_trees = 5
seed = 0

[attack]
generations = 30
seed = 0

[scorecard]
base_odds = 1
"""

INSTANCE = {
    "age": 35,
    "credit_amount": 9000,
    "duration": 36,
    "installment_rate": 4,
    "checking": "<0",
    "housing": "rent",
    "purpose": "car",
}


@pytest.fixture
def config_file(tmp_path, credit_csv):
    path = tmp_path / "config.toml"
    path.write_text(CONFIG.format(data=credit_csv.as_posix(), target="default"), encoding="utf-8")
    return path


@pytest.fixture
def cli(tmp_path, config_file):
    out = tmp_path / "run"

    def run(command, *args, out_dir=out):
        return main([command, "--config", str(config_file), "--out", str(out_dir), *args])

    run.out = out
    return run


@pytest.fixture
def trained(cli):
    assert cli("train") == EXIT_OK
    return cli


def payload(path):
    return json.loads(path.read_text(encoding="utf-8"))["payload"]


class TestTrain:
    def test_writes_run_directory(self, trained):
        for name in ("schema.json", "model.json", "split.json"):
            assert (trained.out / name).is_file()

    def test_retraining_is_byte_identical(self, trained):
        first = (trained.out / "model.json").read_bytes()
        assert trained("train") == EXIT_OK
        assert first == (trained.out / "model.json").read_bytes()

    def test_artifacts_carry_provenance(self, trained):
        for name in ("schema.json", "model.json", "split.json"):
            stamp = json.loads((trained.out / name).read_text(encoding="utf-8"))["provenance"]
            assert (stamp["tool"], stamp["version"], stamp["command"]) == ("PermuteAttack", "0.1.0", "train")
            assert stamp["config"]["forest"]["n_trees"] == 5

    def test_missing_target_column(self, tmp_path, credit_csv):
        path = tmp_path / "bad.toml"
        path.write_text(CONFIG.format(data=credit_csv.as_posix(), target="nope"), encoding="utf-8")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE


class TestAttack:
    def test_row(self, trained):
        code = trained("attack", "--row", "3")
        [result] = payload(trained.out / "attack.json")
        assert result["instance_id"] == 3
        assert code == (EXIT_OK if result["success"] else 1)

    def test_inline_instance(self, trained, capsys):
        code = trained("attack", "--instance", json.dumps(INSTANCE))
        [result] = payload(trained.out / "attack.json")
        assert result["instance_id"] is None
        assert code in (0, 1)
        assert "instance None" in capsys.readouterr().out

    def test_envelope_echoes_config_and_flags(self, trained):
        trained("attack", "--row", "0", "--seed", "5")
        envelope = json.loads((trained.out / "attack.json").read_text(encoding="utf-8"))
        assert envelope["command"] == "attack"
        assert envelope["tool"] == "PermuteAttack"
        assert envelope["config"]["attack"]["seed"] == 5
        assert envelope["config"]["attack"]["generations"] == 30

    def test_alternative_counterfactuals(self, trained):
        trained("attack", "--row", "1", "--n-counterfactuals", "3")
        results = payload(trained.out / "attack.json")
        assert 1 <= len(results) <= 3
        keys = [frozenset(c["name"] for c in r["changed_features"]) for r in results if r["success"]]
        assert len(set(keys)) == len(keys)

    def test_invalid_instance_json(self, trained):
        assert trained("attack", "--instance", "{not json") == EXIT_USAGE

    def test_row_out_of_range(self, trained):
        assert trained("attack", "--row", "100000") == EXIT_USAGE

    def test_before_training(self, cli):
        assert cli("attack", "--row", "0") == EXIT_USAGE

    def test_exclude_and_allow_only_are_exclusive(self, trained):
        with pytest.raises(SystemExit) as excinfo:
            trained("attack", "--row", "0", "--exclude", "age", "--allow-only", "age")
        assert excinfo.value.code == 2

    def test_scorecard_report_written(self, trained):
        for row in range(10):
            if trained("attack", "--row", str(row)) == EXIT_OK:
                break
        else:
            pytest.fail("no row flipped")
        [result] = payload(trained.out / "attack.json")
        report = payload(trained.out / "scorecard.json")
        assert [r["label"] for r in report["rows"]] == ["original", "counterfactual 1"]
        assert report["rows"][1]["changes"] == [
            f"{c['name']}: {c['old']} -> {c['new']}" for c in result["changed_features"]
        ]
        assert report["config"]["base_odds"] == 1

    def test_unknown_excluded_feature(self, trained):
        assert trained("attack", "--row", "0", "--exclude", "nope") == EXIT_USAGE


class TestBatch:
    def test_outputs(self, trained):
        assert trained("batch", "--limit", "5") == EXIT_OK

        results = payload(trained.out / "results.json")
        summary = payload(trained.out / "summary.json")
        split = json.loads((trained.out / "split.json").read_text(encoding="utf-8"))
        assert [r["instance_id"] for r in results] == split["test"][:5]
        assert summary["n_attacked"] == 5
        for name, comment in [
            ("histogram.csv", "#"),
            ("feature_changes.csv", "#"),
            ("outcomes.csv", "#"),
            ("cooccurrence.tsv", "#"),
            ("cooccurrence.dot", "//"),
        ]:
            stamp = (trained.out / name).read_text(encoding="utf-8").splitlines()[0]
            assert stamp.startswith(f"{comment} tool=PermuteAttack version=0.1.0 command=batch config=")
            config = json.loads(stamp.split("config=", 1)[1])
            assert config["attack"]["generations"] == 30
        assert (trained.out / "histogram.csv").read_text(encoding="utf-8").splitlines()[1] == "bin,count"
        graph = payload(trained.out / "cooccurrence.json")
        assert set(graph) == {"nodes", "edges"}

    def test_exclude_is_enforced(self, trained):
        assert trained("batch", "--limit", "5", "--exclude", "checking,duration") == EXIT_OK
        for result in payload(trained.out / "results.json"):
            names = {c["name"] for c in result["changed_features"]}
            assert not names & {"checking", "duration"}

    def test_exclude_accepts_features_prefix(self, trained):
        assert trained("batch", "--limit", "5", "--exclude", "features=checking,duration") == EXIT_OK
        for result in payload(trained.out / "results.json"):
            assert not {c["name"] for c in result["changed_features"]} & {"checking", "duration"}

    def test_allow_only_is_enforced(self, trained):
        assert trained("batch", "--limit", "5", "--allow-only", "age,credit_amount") == EXIT_OK
        for result in payload(trained.out / "results.json"):
            assert {c["name"] for c in result["changed_features"]} <= {"age", "credit_amount"}

    def test_empty_test_selection(self, trained):
        assert trained("batch", "--limit", "0") == EXIT_USAGE

    def test_analyze_reproduces_summary(self, trained):
        trained("batch", "--limit", "5")
        before = payload(trained.out / "summary.json")
        assert trained("analyze") == EXIT_OK
        envelope = json.loads((trained.out / "summary.json").read_text(encoding="utf-8"))
        assert envelope["command"] == "analyze"
        assert envelope["payload"] == before

    def test_analyze_without_results(self, trained):
        assert trained("analyze") == EXIT_USAGE


def test_realism(trained):
    assert trained("realism", "--limit", "15") == EXIT_OK
    report = payload(trained.out / "realism.json")
    assert (report["seed_a"], report["seed_b"]) == (0, 1)
    assert set(report["fail_rate"]) == {"gibbs_off", "gibbs_on"}


class TestScore:
    def test_published_values(self, cli, capsys):
        assert cli("score", "0.13", "0.63") == EXIT_OK
        assert payload(cli.out / "scores.json")["scores"] == [641, 588]
        assert capsys.readouterr().out.splitlines() == ["0.1300\t641", "0.6300\t588"]

    def test_probability_out_of_range(self, cli):
        assert cli("score", "1.5") == EXIT_USAGE


def test_serve_uses_command_line_config(trained, monkeypatch):
    served = {}

    def run(app, host, port, log_level):
        served.update(app=app, host=host, port=port)

    monkeypatch.setattr(uvicorn, "run", run)
    assert trained("serve", "--port", "9001") == EXIT_OK
    assert served["app"].state.settings.output_dir == trained.out
    assert served["app"].state.settings.forest.n_trees == 5
    assert (served["host"], served["port"]) == ("127.0.0.1", 9001)


class TestConfig:
    def test_flags_override_file(self, config_file):
        config = load_run_config(config_file, attack={"seed": 9}, workers=3)
        assert config.attack.seed == 9
        assert config.attack.generations == 30
        assert config.workers == 3

    def test_environment_fills_unset_values(self, monkeypatch):
        monkeypatch.setenv("PERMUTE_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("PERMUTE_ATTACK__POPULATION_SIZE", "20")
        config = load_run_config()
        assert config.log_level == "DEBUG"
        assert config.attack.population_size == 20

    def test_invalid_value(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[attack]\ngenerations = 0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="invalid configuration"):
            load_run_config(path)
