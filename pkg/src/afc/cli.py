"""Command line: ``afc baseline|train|evaluate|spectrum``.

Exit codes: 0 success, 1 no shedding peak or other analysis failure,
2 configuration error, 3 flow divergence, 4 worker failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .lbm import ConfigError, FlowDiverged, SnapshotError
from .marl import EpisodeAborted
from .ppo import CheckpointError, load_checkpoint
from .runner import Baseline, Trainer, WorkerFailure, evaluate, resume_trainer, run_baseline
from .spectrum import SpectrumError, analyse, read_column, write_spectrum_csv

log = logging.getLogger("afc")

EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_WORKER = 0, 1, 2, 3, 4


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.cli.seed = args.seed
    if args.out is not None:
        cfg.cli.out = args.out
    # flag beats environment beats file
    env_bus = os.environ.get("AFC_BUS")
    if args.bus is not None:
        cfg.bus.endpoint = args.bus
    elif env_bus:
        cfg.bus.endpoint = env_bus
    return cfg.validate()


def _baseline_path(cfg: RunConfig, given) -> Path:
    return Path(given) if given else Path(cfg.cli.out) / "baseline.json"


def cmd_baseline(cfg: RunConfig, args) -> int:
    out = Path(cfg.cli.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    rec = run_baseline(cfg, out)
    log.info("baseline: cd_b=%s period=%.4f St=%.4f", rec.cd_b, rec.period, rec.strouhal)
    print(json.dumps({"cd_b": rec.cd_b, "period": rec.period, "strouhal": rec.strouhal,
                      "mean_cl": rec.mean_cl}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.cli.out)
    base_path = _baseline_path(cfg, args.baseline)
    if not base_path.exists():
        log.info("no baseline at %s; measuring one first", base_path)
        run_baseline(cfg, base_path.parent)
    baseline = Baseline.load(base_path)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    if args.resume:
        trainer = resume_trainer(cfg, baseline, out, args.resume)
    else:
        trainer = Trainer(cfg, baseline, out)

    def report(rec):
        s = rec.stats
        log.info("episode %d: reward %.4f cd %.4f cl_rms %.4f", rec.episode, s.mean_reward, s.mean_cd, s.rms_cl)

    recs = trainer.run(on_episode=report)
    print(json.dumps({"episodes": len(recs), "last_episode": trainer.episode,
                      "checkpoint": str(out / "checkpoints" / "latest.afcp")}))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    baseline = Baseline.load(_baseline_path(cfg, args.baseline))
    ckpt = args.checkpoint or Path(cfg.cli.out) / "checkpoints" / "latest.afcp"
    agent, _ = load_checkpoint(ckpt)
    out = Path(cfg.cli.out) / "evaluation"
    summary = evaluate(cfg, baseline, agent, out)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    t, x = read_column(args.csv, args.column, args.time_column)
    res = analyse(t, x, args.chord, args.u_inf)
    if args.write:
        write_spectrum_csv(args.write, res)
    print(json.dumps({"peak_frequency": res.peak_frequency, "strouhal": res.strouhal,
                      "prominence": res.prominence, "dominance": res.dominance}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afc", description="Jet-actuated flow control with shared-policy PPO.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--bus", help="inproc[://name] or host:port (overrides AFC_BUS)")
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--baseline", help="baseline.json (default: <out>/baseline.json)")

    common(sub.add_parser("baseline", help="uncontrolled run; writes snapshot, forces and cd_b"))
    sp = sub.add_parser("train", help="train the shared policy")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = sub.add_parser("evaluate", help="deterministic controlled run against the baseline")
    common(sp)
    sp.add_argument("--checkpoint", help="policy checkpoint (default: <out>/checkpoints/latest.afcp)")
    sp = sub.add_parser("spectrum", help="dominant frequency of one CSV column")
    sp.add_argument("csv")
    sp.add_argument("--column", default="cl")
    sp.add_argument("--time-column", default="t")
    sp.add_argument("--chord", type=float, default=1.0)
    sp.add_argument("--u-inf", type=float, default=1.0)
    sp.add_argument("--write", help="write the spectrum to this CSV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "spectrum":
            return cmd_spectrum(args)
        cfg = resolve_config(args)
        return {"baseline": cmd_baseline, "train": cmd_train, "evaluate": cmd_evaluate}[args.command](cfg, args)
    except (ConfigError, CheckpointError, SnapshotError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowDiverged, EpisodeAborted) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except WorkerFailure as exc:
        print(f"worker failure: {exc}", file=sys.stderr)
        return EXIT_WORKER
    except SpectrumError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
