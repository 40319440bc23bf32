"""Command-line entry point: ``lmdp-lab <subcommand> --config run.json [--seed N]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, LMDPError
from .generate import verify_separation
from .harness import ExperimentConfig, _merge, build_instance, eval_seeds, run_experiment
from .io import atomic_write_text

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> modes it accepts
SUBCOMMANDS = {
    "lucrl": ("lucrl-hindsight", "lucrl-inferred"),
    "psr-init": ("psr-init",),
    "lowerbound": ("lowerbound",),
    "detexplore": ("detexplore",),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmdp-lab", description="Latent MDP experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        sp.add_argument("--out", type=Path, default=None, help="override output.dir")

    common(sub.add_parser("gen", help="generate an instance and write it as model JSON"))
    for name in SUBCOMMANDS:
        common(sub.add_parser(name, help=f"run a {name} experiment"))
    ev = sub.add_parser("eval", help="run one config under many seeds")
    common(ev)
    ev.add_argument("--seeds", default="0-4",
                    help="comma list and/or inclusive ranges, e.g. '0-9' or '1,5,7'")
    return p


def parse_seeds(text: str) -> list:
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigurationError(f"cannot parse seed list {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise ConfigurationError("seed list must be non-empty and non-negative")
    return seeds


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, args.seed)
    if args.out is not None:
        cfg = ExperimentConfig(_merge(cfg.data, {"output": {"dir": str(args.out)}}))
    return cfg


def _gen(cfg: ExperimentConfig) -> int:
    model = build_instance(cfg)
    out = cfg.output_dir()
    path = out / "model.json"
    model.save(path)
    info = {"model": str(path), "M": model.M, "S": model.S, "A": model.A, "H": model.H}
    delta = cfg.section("instance").get("delta")
    if cfg.section("instance")["kind"] == "separated" and delta is not None:
        rep = verify_separation(model, delta)
        info["separation"] = {"ok": rep.ok, "min_l1": rep.min_distance,
                              "location": rep.location}
    atomic_write_text(out / "gen.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "gen":
            return _gen(cfg)
        if args.command == "eval":
            results = eval_seeds(cfg, parse_seeds(args.seeds))
            for seed, status, _ in results:
                print(f"seed {seed}: {status}")
            return EXIT_OK if all(st == "ok" for _, st, _ in results) else EXIT_STAGE
        if cfg.mode not in SUBCOMMANDS[args.command]:
            raise ConfigurationError(
                f"config mode {cfg.mode!r} does not match subcommand {args.command!r}")
        report = run_experiment(cfg)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LMDPError as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE
    summary = {k: v for k, v in report.metrics.items() if isinstance(v, (int, float, str))}
    print(json.dumps({"status": report.status, "metrics": summary,
                      "report": report.files.get("report")}, sort_keys=True, default=str))
    if not report.ok:
        print(f"stage failure: {report.error}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
