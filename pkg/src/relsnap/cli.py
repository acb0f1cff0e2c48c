"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad config or input data),
2 failure inside a pipeline stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import MODES, PipelineConfig, StageError, run_bench, run_eval, run_synth, run_train
from .store import LoadError
from .synth import SynthConfig

OK, INVALID, STAGE_FAILED = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relsnap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train all seeds and write a model bundle")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--seed", type=int, action="append", help="train only this seed (repeatable)")
    t.add_argument("--mode", choices=MODES)

    e = sub.add_parser("eval", help="score a trained bundle on the test seed times")
    e.add_argument("--bundle", required=True, type=Path)

    b = sub.add_parser("bench", help="time graph building, training and inference per mode")
    b.add_argument("--config", required=True, type=Path)
    b.add_argument("--modes", default="lightrdl,rdl-baseline", help="comma-separated modes")
    b.add_argument("--json", type=Path, help="also write the report here")

    s = sub.add_parser("synth", help="generate a synthetic database and its tasks")
    s.add_argument("--config", type=Path, help="JSON generator settings; defaults if omitted")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--overwrite", action="store_true")
    return p


def _dispatch(args) -> int:
    if args.command == "train":
        cfg = PipelineConfig.load(args.config)
        out = run_train(cfg, seeds=args.seed, mode=args.mode)
        print(f"bundle written to {out}")
    elif args.command == "eval":
        res = run_eval(args.bundle)
        for r in res.reports:
            print(f"{r.name} {r.value:.6f} (n={r.n}, seed times {r.seed_times})")
        print(f"mean {res.mean:.6f} std {res.std:.6f}")
    elif args.command == "bench":
        cfg = PipelineConfig.load(args.config)
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        report = run_bench(cfg, modes)
        print(report.table())
        text = json.dumps(report.to_dict(), indent=2) + "\n"
        if args.json:
            args.json.write_text(text)
        else:
            print(text)
    elif args.command == "synth":
        scfg = SynthConfig.from_dict(json.loads(args.config.read_text())) if args.config else SynthConfig()
        out = run_synth(scfg, args.out, overwrite=args.overwrite)
        print(f"synthetic database written to {out}")
    return OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except StageError as err:
        if isinstance(err.__cause__, LoadError):
            print(f"error: {err.__cause__}", file=sys.stderr)
            return INVALID
        print(f"error: {err}", file=sys.stderr)
        return STAGE_FAILED
    except (LoadError, ValueError, TypeError, KeyError, FileNotFoundError, FileExistsError,
            json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return INVALID


if __name__ == "__main__":
    sys.exit(main())
