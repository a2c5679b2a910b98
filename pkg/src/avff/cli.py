"""Command-line entry point: ``avff <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_params
from .config import PRESETS, ConfigError, ModelConfig, load_config, parse_overrides, preset
from .data.manifest import load_manifest
from .data.synthetic import generate_synthetic_corpus
from .evaluation import (
    EvalResult, export_embeddings, perturbation_sweep, run_protocol, write_results, write_results_table,
)
from .inference import infer_manifest
from .perturb import AUDIO_KINDS
from .training import AblationFlags, build_model, run_training

COMMANDS = ("synth-data", "pretrain", "finetune", "eval", "perturb-eval", "embed", "infer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avff", description="Audio-visual deepfake detector")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"config file, or a preset name ({', '.join(PRESETS)})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--manifest", help="clip manifest (TSV)")
        p.add_argument("--checkpoint", help="parameter checkpoint (.avfp)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--protocol", default="intra",
                       help="eval: intra | leave-one-category-out | cross-corpus; "
                            "perturb-eval: perturbation kind or 'all'")
        p.add_argument("--flag", action="append", default=[], help="ablation switch, e.g. frozen_backbone")
        if name == "synth-data":
            p.add_argument("--n-real", type=int, default=512)
            p.add_argument("--n-fake", type=int, default=256, help="clips per fake category")
        if name == "pretrain":
            p.add_argument("--resume", action="store_true")
        if name == "perturb-eval":
            p.add_argument("--levels", default="1,2,3,4,5")
    return parser


def resolve_config(args) -> ModelConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config in PRESETS:
        return load_config(None, {**PRESETS[args.config], **overrides})
    return load_config(args.config, overrides)


def _need(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise SystemExit(f"avff {args.command}: missing --{', --'.join(missing)}")


def _trained_model(args, cfg: ModelConfig, flags: AblationFlags):
    model = build_model(cfg, flags)
    load_params(model, cfg, args.checkpoint)
    return model


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        flags = AblationFlags.from_names(args.flag)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "synth-data":
        m = generate_synthetic_corpus(args.n_real, args.n_fake, cfg, np.random.default_rng(cfg.seed), out)
        print(f"wrote {len(m)} clips to {out / 'manifest.tsv'}")
        return 0

    _need(args, "manifest")
    manifest = load_manifest(args.manifest)

    if args.command == "pretrain":
        res = run_training(cfg, manifest.subset(lambda r: not r.is_fake), 1, flags, out, resume=args.resume)
        print(f"final checkpoint: {res.final}")
    elif args.command == "finetune":
        res = run_training(cfg, manifest, 2, flags, out, init_checkpoint=args.checkpoint)
        print(f"final checkpoint: {res.final}")
    elif args.command == "eval":
        if args.protocol == "cross-corpus":
            _need(args, "checkpoint")
            results = run_protocol(manifest, cfg, args.protocol, out, model=_trained_model(args, cfg, flags))
        else:
            results = run_protocol(manifest, cfg, args.protocol, out, stage1_checkpoint=args.checkpoint,
                                   flags=flags)
        write_results(results, out)
        _report(results)
    elif args.command == "perturb-eval":
        _need(args, "checkpoint")
        kinds = AUDIO_KINDS[1:] if args.protocol in ("all", "intra") else (args.protocol,)
        levels = tuple(int(x) for x in args.levels.split(","))
        results = perturbation_sweep(manifest, _trained_model(args, cfg, flags), cfg, kinds, levels, cfg.seed)
        write_results(results, out)
        _report(results)
    elif args.command == "embed":
        _need(args, "checkpoint")
        embs = export_embeddings(manifest, _trained_model(args, cfg, flags), cfg, out / "embeddings.tsv")
        print(f"wrote {embs.shape[0]} x {embs.shape[1]} embeddings to {out / 'embeddings.tsv'}")
    elif args.command == "infer":
        _need(args, "checkpoint")
        rows = infer_manifest(manifest, _trained_model(args, cfg, flags), cfg)
        write_results_table(rows, out / "clips.tsv")
        for r in rows:
            print(f"{r.clip_id}\t{r.score:.4f}\t{'fake' if r.prediction else 'real'}")
    return 0


def _report(results: list[EvalResult]) -> None:
    for r in results:
        m = r.metrics
        print(f"{r.protocol}:{r.name}\tn={m.get('n')}\tacc={m['acc']:.4f}\tauc={m['auc']:.4f}\tap={m['ap']:.4f}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
