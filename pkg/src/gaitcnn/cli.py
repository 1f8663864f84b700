"""Command-line front end: ``python -m gaitcnn <verb> --config exp.ini``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .synthetic import directory_hash, generate_synthetic

VERBS = ("gen-synth", "ingest", "train", "extract-signatures", "fuse", "eval", "run",
         "grad-check")


def _config(args):
    overrides = dict(seed=args.seed, out=args.out)
    if args.strict:
        overrides["strict"] = True
    if args.config:
        return ex.load_config(args.config, **overrides)
    return ex._sync_seed(ex.ExperimentConfig(**{k: v for k, v in overrides.items()
                                                 if v is not None}))


def cmd_gen_synth(cfg, args):
    spec = cfg.synth
    if args.seed is not None:
        spec.seed = args.seed
    out = args.out or cfg.out
    manifest = generate_synthetic(spec, out)
    print(f"manifest {manifest}")
    print(f"hash {directory_hash(out)}")


def cmd_grad_check(cfg, args):
    from .checks import layer_suite
    ok = True
    for kind, report in layer_suite(seed=cfg.seed, instances=args.instances):
        ok &= report.passed
        print(f"{'PASS' if report.passed else 'FAIL'} {kind:<24} max rel err {report.max_error:.2e}")
    return 0 if ok else 1


def main(argv=None):
    p = argparse.ArgumentParser(prog="gaitcnn", description="multimodal CNN gait recognition")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strict", action="store_true", help="single-threaded deterministic math")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--instances", type=int, default=5, help="grad-check instances per layer kind")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.verb == "gen-synth":
            return cmd_gen_synth(cfg, args) or 0
        if args.verb == "grad-check":
            return cmd_grad_check(cfg, args)
        stages = dict(ingest=("ingest",), train=("train",),
                      **{"extract-signatures": ("extract",)}, fuse=("fuse",),
                      eval=("eval",), run=ex.STAGES)[args.verb]
        result = ex.run_experiment(cfg, stages)
        if args.verb in ("eval", "run"):
            sys.stdout.write(result.to_text())
        return 0
    except (ex.StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
