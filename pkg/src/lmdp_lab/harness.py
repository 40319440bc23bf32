"""Experiment configuration, dispatch and reporting."""
from __future__ import annotations

import copy
import json
import os
import subprocess
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .cluster import recover_lmdp
from .core import LMDPModel, exact_value, make_rng
from .errors import ConfigurationError, LMDPError, StageError
from .generate import generate_deterministic, generate_separated, verify_separation
from .hardness import (deterministic_explore, episode_budget, indistinguishability_check,
                       lower_bound_instance, random_learner_discovery)
from .io import atomic_write_text, to_jsonable
from .lucrl import ConfidenceConfig, model_error, run_lucrl
from .planning import optimal_value
from .psr import enumerate_sets

MODES = ("lucrl-hindsight", "lucrl-inferred", "psr-init", "lowerbound", "detexplore")

DEFAULTS = {
    "seed": 0,
    "instance": {"kind": "separated", "M": 3, "S": 6, "A": 2, "H": 20, "delta": 0.5, "seed": 0,
                 "reward_sparsity": 0.9, "reward_density": 0.5, "shared": True,
                 "epsilon": None},
    "algorithm": {"K": 1000, "planner": "qmdp", "epsilon_d": 0.1, "confidence": {},
                  "init": "none", "init_count": 100.0, "baseline_episodes": 20000,
                  "n0": 100000, "n1": 5000, "l": 2, "history_steps": None, "H_cluster": 40,
                  "restarts": 10, "sigma_floor": 1e-8, "link_rule": "mutual",
                  "min_cluster_frac": 0.25, "min_edge_count": 1, "learner_seeds": 100,
                  "c": 10.0, "stochastic_rewards": False},
    "output": {"dir": "runs", "csv": "episodes.csv", "report": "report.json"},
}


def load_schema() -> dict:
    return json.loads(resources.files("lmdp_lab").joinpath("config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated, fully resolved configuration; ``data`` is what the report echoes."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict, seed: Optional[int] = None,
                  base_dir: Optional[Path] = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, load_schema())
        except jsonschema.ValidationError as e:
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigurationError(f"config invalid at {loc}: {e.message}") from None
        data = _merge(DEFAULTS, raw)
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigurationError("seed must be a 64-bit unsigned integer")
            data["seed"] = int(seed)
        inst = data["instance"]
        if inst["kind"] == "file":
            if "model_file" not in inst:
                raise ConfigurationError("instance.kind 'file' needs instance.model_file")
            p = Path(inst["model_file"])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if not p.is_file():
                raise ConfigurationError(f"model file not found: {p}")
            inst["model_file"] = str(p)
            # the file fixes the shape; keep only what the user set explicitly
            given = raw.get("instance", {})
            for k in ("M", "S", "A", "H", "delta"):
                if k not in given:
                    inst.pop(k, None)
        init = data["algorithm"]["init"]
        if init not in ("none", "truth", "psr"):
            p = Path(init)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if not p.is_file():
                raise ConfigurationError(f"init model file not found: {p}")
            data["algorithm"]["init"] = str(p)
        return cls(data)

    @classmethod
    def load(cls, path, seed: Optional[int] = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(raw, seed, path.parent)

    @property
    def mode(self) -> str:
        return self.data["mode"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def section(self, name: str) -> dict:
        return self.data[name]

    def output_dir(self) -> Path:
        return Path(self.data["output"]["dir"])


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunReport:
    config: dict
    version: str
    status: str = "ok"
    wall_clock_s: float = 0.0
    metrics: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    error: Optional[dict] = None
    files: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return to_jsonable({"config": self.config, "version": self.version, "status": self.status,
                            "wall_clock_s": self.wall_clock_s, "metrics": self.metrics,
                            "diagnostics": self.diagnostics, "error": self.error,
                            "files": self.files})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_instance(cfg: ExperimentConfig) -> LMDPModel:
    inst = cfg.section("instance")
    kind = inst["kind"]
    if kind == "file":
        model = LMDPModel.load(inst["model_file"])
        return model.with_horizon(inst["H"]) if "H" in inst and inst["H"] != model.H else model
    rng = make_rng(inst["seed"])
    if kind == "separated":
        return generate_separated(inst["M"], inst["S"], inst["A"], inst["H"], inst["delta"], rng,
                                  inst["reward_sparsity"], inst["shared"])
    if kind == "deterministic":
        return generate_deterministic(inst["M"], inst["S"], inst["A"], inst["H"], rng,
                                      inst["reward_density"])
    if kind == "lowerbound":
        return lower_bound_instance(inst["M"], inst["A"], inst["epsilon"], inst.get("a_star")).model
    raise ConfigurationError(f"unknown instance kind {kind!r}")


def confidence_from(cfg: ExperimentConfig, env: LMDPModel) -> ConfidenceConfig:
    alg = cfg.section("algorithm")
    c = dict(alg["confidence"])
    inferred = cfg.mode in ("lucrl-inferred", "psr-init")
    delta = cfg.section("instance").get("delta") if inferred else None
    base = ConfidenceConfig.default(env.M, env.S, env.A, max(alg["K"], 1), c.get("eta", 0.05),
                                    delta, c.get("scale", 1.0))
    return ConfidenceConfig(c.get("c_T", base.c_T), c.get("c_R", base.c_R),
                            c.get("c_nu", base.c_nu), c.get("eta", base.eta),
                            c.get("alpha_smooth", base.alpha_smooth))


def _recover(cfg: ExperimentConfig, env: LMDPModel, rng):
    alg = cfg.section("algorithm")
    sets = enumerate_sets(env.S, env.A, alg["l"], alg["history_steps"])
    return recover_lmdp(env, sets, alg["n0"], alg["n1"], alg["H_cluster"], rng,
                        restarts=alg["restarts"], sigma_floor=alg["sigma_floor"],
                        min_edge_count=alg["min_edge_count"], link_rule=alg["link_rule"],
                        min_cluster_frac=alg["min_cluster_frac"])


def _run_lucrl(cfg, env, rng, report, out):
    alg = cfg.section("algorithm")
    mode = "hindsight" if cfg.mode == "lucrl-hindsight" else "inferred"
    init = None
    if alg["init"] == "truth":
        init = env
    elif alg["init"] == "psr":
        res = _recover(cfg, env, rng)
        report.diagnostics.extend(res.diagnostics)
        init = res.model.with_horizon(env.H)
        report.metrics["init_model_error"] = model_error(init, env)
    elif alg["init"] != "none":
        init = LMDPModel.load(alg["init"])
    report.metrics["init"] = alg["init"]
    cc = confidence_from(cfg, env)
    report.metrics["confidence"] = {"c_T": cc.c_T, "c_R": cc.c_R, "c_nu": cc.c_nu,
                                    "eta": cc.eta, "alpha_smooth": cc.alpha_smooth}
    log = run_lucrl(env, alg["K"], rng, mode=mode, planner=alg["planner"], cfg=cc, init=init,
                    init_count=alg["init_count"], epsilon_d=alg["epsilon_d"],
                    baseline_episodes=alg["baseline_episodes"])
    csv = out / cfg.section("output")["csv"]
    log.write_csv(csv)
    report.files["csv"] = str(csv)
    ret = log.column("return")
    err = log.column("model_error")
    tail = min(len(ret), 500)
    report.metrics.update({
        "episodes": len(log),
        "baseline_value": log.baseline_value,
        "baseline_stderr": log.baseline_stderr,
        "initial_model_error": log.initial_model_error,
        "final_model_error": float(err[-1]) if len(err) else None,
        "trailing_mean_return": float(ret[-tail:].mean()) if tail else None,
        "cum_pseudo_regret": float(log.column("cum_pseudo_regret")[-1]) if len(log) else 0.0,
        "degenerate_beliefs": log.degenerate_beliefs,
    })


def _run_psr(cfg, env, rng, report, out):
    if cfg.section("instance")["kind"] == "separated":
        sep = verify_separation(env, cfg.section("instance")["delta"])
        report.metrics["separation_min_l1"] = sep.min_distance
    res = _recover(cfg, env, rng)
    report.diagnostics.extend(res.diagnostics)
    model_path = out / "recovered_model.json"
    res.model.save(model_path)
    diag_path = out / "diagnostics.jsonl"
    res.write_diagnostics(diag_path)
    report.files.update({"model": str(model_path), "diagnostics": str(diag_path)})
    report.metrics["model_error"] = model_error(res.model.with_horizon(env.H), env)
    report.metrics["sigma_M"] = res.params.sigma[:, -1].tolist()
    alg = cfg.section("algorithm")
    if alg["K"] > 0:
        cc = confidence_from(cfg, env)
        log = run_lucrl(env, alg["K"], rng, mode="inferred", planner=alg["planner"], cfg=cc,
                        init=res.model.with_horizon(env.H), init_count=alg["init_count"],
                        epsilon_d=alg["epsilon_d"], baseline_episodes=alg["baseline_episodes"])
        csv = out / cfg.section("output")["csv"]
        log.write_csv(csv)
        report.files["csv"] = str(csv)
        report.metrics["final_model_error"] = float(log.column("model_error")[-1])


def _run_lowerbound(cfg, env, rng, report, out):
    inst = cfg.section("instance")
    lb = lower_bound_instance(inst["M"], inst["A"], inst["epsilon"], inst.get("a_star"))
    chk = indistinguishability_check(lb)
    report.metrics.update({"indistinguishable": chk.ok, "max_gap": chk.max_gap,
                           "witness": chk.witness, "optimal_value": optimal_value(lb.model)})
    n = cfg.section("algorithm")["learner_seeds"]
    if lb.epsilon is None and n > 0:
        seeds = rng.integers(0, 2**63, size=n)
        times = [random_learner_discovery(lb, make_rng(int(s))) for s in seeds]
        lines = ["seed,discovery_episodes\n"] + [f"{i},{t}\n" for i, t in enumerate(times)]
        csv = out / cfg.section("output")["csv"]
        atomic_write_text(csv, "".join(lines))
        report.files["csv"] = str(csv)
        report.metrics.update({"median_discovery": float(np.median(times)),
                               "A_pow_M": lb.model.A ** lb.model.M})


def _run_detexplore(cfg, env, rng, report, out):
    alg = cfg.section("algorithm")
    res = deterministic_explore(env, rng, c=alg["c"], stochastic_rewards=alg["stochastic_rewards"])
    atlas_path = out / "atlas.json"
    res.atlas.save(atlas_path)
    report.files["atlas"] = str(atlas_path)
    value = exact_value(env, res.policy)
    report.metrics.update({
        "episodes_used": res.episodes_used,
        "episode_budget": episode_budget(env.H, env.S, env.A, env.M),
        "atlas_nodes": len(res.atlas.nodes),
        "policy_value": value,
    })
    try:
        report.metrics["optimal_value"] = optimal_value(env)
    except LMDPError:
        report.metrics["optimal_value"] = None


RUNNERS = {"lucrl-hindsight": _run_lucrl, "lucrl-inferred": _run_lucrl, "psr-init": _run_psr,
           "lowerbound": _run_lowerbound, "detexplore": _run_detexplore}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunReport:
    """Run one configured experiment; stage failures land in the report, not as exceptions."""
    report = RunReport(config=cfg.data, version=version_string())
    out = cfg.output_dir()
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    try:
        env = None if cfg.mode == "lowerbound" else build_instance(cfg)
        if env is not None:
            report.metrics["instance"] = {"M": env.M, "S": env.S, "A": env.A, "H": env.H}
        RUNNERS[cfg.mode](cfg, env, rng, report, out)
    except StageError as e:
        report.status = "failed"
        report.error = {"stage": e.stage, "type": type(e.cause).__name__, "message": str(e.cause)}
        report.diagnostics.extend(d for d in e.diagnostics if d not in report.diagnostics)
    except ConfigurationError:
        raise
    except LMDPError as e:
        report.status = "failed"
        report.error = {"stage": cfg.mode, "type": type(e).__name__, "message": str(e)}
    report.wall_clock_s = time.perf_counter() - t0
    if write:
        path = out / cfg.section("output")["report"]
        report.files["report"] = str(path)
        atomic_write_text(path, report.to_json())
    return report


def _eval_one(args):
    data, seed, sub = args
    cfg = ExperimentConfig(_merge(data, {"seed": seed, "output": {"dir": sub}}))
    rep = run_experiment(cfg)
    return seed, rep.status, rep.metrics


def max_workers(n_jobs: int) -> int:
    cap = os.environ.get("LMDP_LAB_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigurationError(f"LMDP_LAB_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n_jobs, limit))


def eval_seeds(cfg: ExperimentConfig, seeds) -> list:
    """Run the same config under several seeds, each in its own output subdirectory."""
    from concurrent.futures import ProcessPoolExecutor

    root = cfg.output_dir()
    jobs = [(cfg.data, int(s), str(root / f"seed_{int(s)}")) for s in seeds]
    workers = max_workers(len(jobs))
    if workers == 1:
        results = [_eval_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    keys = sorted({k for _, _, m in results for k, v in m.items()
                   if isinstance(v, (int, float, bool)) and v is not None})
    lines = [",".join(["seed", "status"] + keys) + "\n"]
    for seed, status, m in results:
        lines.append(",".join([str(seed), status] + [repr(m.get(k, "")) for k in keys]) + "\n")
    atomic_write_text(root / "eval_summary.csv", "".join(lines))
    return results
