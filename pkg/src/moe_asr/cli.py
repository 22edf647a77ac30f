"""Command-line entry point: gen-data, train, eval, flops, grad-check.

Exit code 0 on success; on failure a single machine-parsable line
`error: <category>: <message>` goes to stderr and the exit code is 1.
Logging verbosity comes from MOE_LOG_LEVEL (error | info | debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import flops as flops_mod
from .checkpoint import load_checkpoint
from .config import ModelConfig, load_config
from .data import SynthConfig, generate, load_corpus, save_corpus
from .errors import ConfigError, MoeError
from .gradcheck import run_all_checks
from .train import evaluate, train

log = logging.getLogger("moe_asr")


def _setup_logging() -> None:
    level_name = os.environ.get("MOE_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(
            f"MOE_LOG_LEVEL must be one of error/info/debug, "
            f"got {level_name!r}")
    logging.basicConfig(level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


def _load_model_config(args) -> ModelConfig:
    config = load_config(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "workers", None) is not None:
        config.n_workers = args.workers
    config.validate()
    return config


def cmd_gen_data(args) -> int:
    synth = SynthConfig(seed=args.seed if args.seed is not None else 0)
    if args.config:
        mc = load_config(args.config)
        synth = SynthConfig(n_domains=mc.n_domains, n_accents=mc.n_accents,
                            vocab_size=mc.vocab_size, d_feat=mc.d_feat,
                            seed=args.seed if args.seed is not None
                            else mc.seed)
    utts = generate(synth, args.count)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "corpus.bin")
    save_corpus(path, utts)
    log.info("wrote %d utterances to %s", len(utts), path)
    print(path)
    return 0


def cmd_train(args) -> int:
    config = _load_model_config(args)
    corpus = load_corpus(args.data)
    result = train(config, corpus, out_dir=args.out)
    log.info("training done in %.1fs, final total loss %.4f",
             result.metrics.wall_time,
             result.metrics.steps[-1].breakdown.total)
    print(result.checkpoint_path)
    return 0


def cmd_eval(args) -> int:
    model, step, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    report = evaluate(model, corpus)
    payload = report.as_dict()
    payload["checkpoint_step"] = step
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        log.info("wrote %s", path)
    print(text)
    return 0


def cmd_flops(args) -> int:
    config = _load_model_config(args)
    report = flops_mod.count_flops(config)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    seeds = list(range(args.seed if args.seed is not None else 0,
                       (args.seed if args.seed is not None else 0)
                       + args.n_seeds))
    results = run_all_checks(seeds)
    worst = 0.0
    failed = 0
    for row in results:
        status = "ok" if row.ok else "FAIL"
        print(f"{status:4s} {row.name:45s} max_rel_err={row.max_rel_err:.3e}")
        worst = max(worst, row.max_rel_err)
        failed += 0 if row.ok else 1
    print(f"checked {len(results)} components, worst relative error "
          f"{worst:.3e}")
    if failed:
        print(f"{failed} component(s) FAILED", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-asr",
        description="Desk-scale sparse mixture-of-experts acoustic model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="model config (domain/accent/vocab dims)")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="corpus file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for eval.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="analytic FLOPs per one-second input")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of all backward passes")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except MoeError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
