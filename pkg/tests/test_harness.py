import json

import pytest

from lmdp_lab import __version__
from lmdp_lab.cli import main, parse_seeds
from lmdp_lab.errors import ConfigurationError
from lmdp_lab.harness import (ExperimentConfig, build_instance, load_schema, max_workers,
                              run_experiment)


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _lucrl_cfg(tmp_path, **alg):
    return {"mode": "lucrl-hindsight", "seed": 3,
            "instance": {"kind": "separated", "M": 2, "S": 3, "A": 2, "H": 4, "delta": 0.5},
            "algorithm": {"K": 20, "baseline_episodes": 300, **alg},
            "output": {"dir": str(tmp_path / "out")}}


def test_schema_shipped_in_docs_matches_package():
    from pathlib import Path
    docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert json.loads(docs.read_text()) == load_schema()


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError, match="instance"):
        ExperimentConfig.from_dict({"mode": "lowerbound", "instance": {"bogus": 1}})


def test_config_rejects_bad_delta_and_seed():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"mode": "psr-init", "instance": {"delta": 2.5}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"mode": "psr-init", "seed": -1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"mode": "psr-init"}, seed=2**64)


def test_config_missing_model_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        ExperimentConfig.from_dict({"mode": "lucrl-hindsight",
                                    "instance": {"kind": "file", "model_file": "nope.json"}},
                                   base_dir=tmp_path)


def test_seed_override(tmp_path):
    cfg = ExperimentConfig.load(_write(tmp_path, _lucrl_cfg(tmp_path)), seed=99)
    assert cfg.seed == 99


def test_file_instance_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict(_lucrl_cfg(tmp_path))
    model = build_instance(cfg)
    model.save(tmp_path / "model.json")
    raw = {"mode": "lucrl-hindsight", "instance": {"kind": "file", "model_file": "model.json"}}
    again = build_instance(ExperimentConfig.from_dict(raw, base_dir=tmp_path))
    assert again.to_json() == model.to_json()


def test_report_and_byte_identical_rerun(tmp_path):
    cfg = ExperimentConfig.from_dict(_lucrl_cfg(tmp_path))
    rep = run_experiment(cfg)
    assert rep.ok and rep.version.startswith(__version__)
    csv1 = (tmp_path / "out" / "episodes.csv").read_bytes()
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["status"] == "ok" and report["wall_clock_s"] > 0
    echo = ExperimentConfig.from_dict(report["config"])
    run_experiment(echo)
    assert (tmp_path / "out" / "episodes.csv").read_bytes() == csv1


def test_stage_failure_lands_in_report(tmp_path):
    raw = {"mode": "psr-init", "seed": 1,
           "instance": {"kind": "separated", "M": 3, "S": 7, "A": 2, "H": 20, "delta": 0.1},
           "algorithm": {"K": 0, "n0": 10000, "n1": 3000},
           "output": {"dir": str(tmp_path)}}
    rep = run_experiment(ExperimentConfig.from_dict(raw))
    assert rep.status == "failed" and rep.error["stage"] in ("spectral", "link", "assemble")
    assert rep.diagnostics


def test_lowerbound_mode(tmp_path):
    raw = {"mode": "lowerbound", "instance": {"M": 2, "A": 2},
           "algorithm": {"learner_seeds": 5}, "output": {"dir": str(tmp_path)}}
    rep = run_experiment(ExperimentConfig.from_dict(raw))
    assert rep.metrics["indistinguishable"] and rep.metrics["optimal_value"] == pytest.approx(0.5)


def test_parse_seeds():
    assert parse_seeds("0-2,7") == [0, 1, 2, 7]
    with pytest.raises(ConfigurationError):
        parse_seeds("a-b")


def test_max_workers_env(monkeypatch):
    monkeypatch.setenv("LMDP_LAB_THREADS", "1")
    assert max_workers(8) == 1
    monkeypatch.setenv("LMDP_LAB_THREADS", "x")
    with pytest.raises(ConfigurationError):
        max_workers(2)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, _lucrl_cfg(tmp_path))
    assert main(["lucrl", "--config", str(good)]) == 0
    bad = _write(tmp_path, {"mode": "lucrl-hindsight", "instance": {"delta": 3}}, "bad.json")
    assert main(["lucrl", "--config", str(bad)]) == 2
    assert main(["lucrl", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["lowerbound", "--config", str(good)]) == 2
    fail = _write(tmp_path, {"mode": "psr-init", "seed": 1,
                             "instance": {"M": 3, "S": 7, "A": 2, "H": 20, "delta": 0.1},
                             "algorithm": {"K": 0, "n0": 10000, "n1": 3000},
                             "output": {"dir": str(tmp_path / "f")}}, "fail.json")
    assert main(["psr-init", "--config", str(fail)]) == 3


def test_cli_gen_and_eval(tmp_path, monkeypatch):
    monkeypatch.setenv("LMDP_LAB_THREADS", "1")
    cfg = _write(tmp_path, _lucrl_cfg(tmp_path, K=5))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    info = json.loads((tmp_path / "g" / "gen.json").read_text())
    assert info["separation"]["ok"]
    assert main(["eval", "--config", str(cfg), "--seeds", "0,1", "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "eval_summary.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("seed,status")
