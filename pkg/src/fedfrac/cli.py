"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiment, pairs, ssl
from .ifs import build_code_pool, load_code_pool, save_code_pool
from .nn import save_checkpoint
from .seeding import mix64


def _load_config(args) -> experiment.ExperimentConfig:
    text = ""
    if args.config:
        with open(args.config) as f:
            text = f.read()
    cfg = experiment.parse_config(text)
    for name in ("output_dir", "master_seed", "source"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    for name in ("alpha", "rounds", "n_clients", "participation", "base_lr",
                 "local_epochs", "algorithm", "mu"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.federation, name, value)
    if getattr(args, "pretrain_mode", None) is not None:
        cfg.pretrain.mode = args.pretrain_mode
    cfg.federation.seed = mix64(cfg.master_seed, 0xFED)
    return cfg


def _add_config_flags(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--master-seed", dest="master_seed", type=int)
    p.add_argument("--source", choices=["toy", "cifar10"])
    p.add_argument("--clients", dest="n_clients", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--participation", type=float)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--algorithm", choices=["fedavg", "fedprox"])
    p.add_argument("--mu", type=float)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--pretrain-mode", dest="pretrain_mode",
                   choices=["none", "fps", "checkpoint"])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedfrac")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-codes", help="pre-sample an IFS code pool")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-pairs", help="write a fractal pair archive")
    p.add_argument("--pool", help="code pool from gen-codes (else sampled)")
    p.add_argument("--pool-size", type=int, default=256)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("FEDFRAC_THREADS", "1")))
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training on an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--loss", choices=["simsiam", "infonce"], default="simsiam")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for verb in ("federate", "analyze", "run"):
        p = sub.add_parser(verb)
        _add_config_flags(p)

    p = sub.add_parser("verify-manifest", help="re-hash a run directory")
    p.add_argument("directory")

    args = parser.parse_args(argv)

    if args.command == "gen-codes":
        save_code_pool(build_code_pool(args.count, args.seed), args.out)
        print(f"wrote {args.count} codes to {args.out}")
    elif args.command == "gen-pairs":
        pool = (load_code_pool(args.pool) if args.pool
                else build_code_pool(args.pool_size, args.seed))
        params = pairs.PairParams(width=args.resolution, height=args.resolution,
                                  n_iters=args.iters)
        pairs.generate_archive(pool, args.pairs, params, args.seed, args.out,
                               n_workers=args.workers)
        print(f"wrote {args.pairs} pairs to {args.out}")
    elif args.command == "pretrain":
        info = pairs.archive_info(args.archive)
        shape = (info["channels"], info["height"], info["width"])
        cfg = ssl.PretrainConfig(epochs=args.epochs, loss=args.loss,
                                 lr=args.lr, seed=args.seed)
        encoder, history = ssl.pretrain(args.archive, shape, cfg)
        save_checkpoint(encoder, args.out)
        if history:
            print(f"loss {history[0]:.4f} -> {history[-1]:.4f}")
        print(f"wrote encoder to {args.out}")
    elif args.command in ("federate", "run"):
        cfg = _load_config(args)
        if args.command == "federate":
            cfg.analysis.lambda_star = False
            cfg.analysis.surface = False
            cfg.analysis.segment = False
        out = experiment.run_experiment(cfg)
        print(f"artifacts in {out}")
    elif args.command == "analyze":
        cfg = _load_config(args)
        cfg.analysis.lambda_star = True
        cfg.analysis.surface = True
        cfg.analysis.segment = True
        out = experiment.run_experiment(cfg)
        print(f"artifacts in {out}")
    elif args.command == "verify-manifest":
        problems = experiment.verify_manifest(args.directory)
        if problems:
            print("\n".join(problems))
            return 1
        print("manifest ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
