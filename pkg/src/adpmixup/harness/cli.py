"""Command line entry point.

    adpmixup pretrain      [--data JSONL]
    adpmixup train-adapter [--backbone CKPT] [--data JSONL] [--tag NAME]
    adpmixup attack        --attack-kind KIND [--budget B] [--synonyms PATH]
                           [--backbone CKPT] [--adapter CKPT] [--data JSONL]
    adpmixup eval | profile | sweep | tradeoff

Every subcommand accepts --config PATH, --out DIR and --seed N and writes
only under --out.  Exit status: 0 on success, 2 on a configuration error,
3 when a stage fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .. import checkpoint
from ..attacks import KINDS, AttackSpec, generate_adversarial_dataset, load_synonyms, make_oracle
from ..corpus import make_corpus
from ..model import AdapterDelta, BackboneParams
from ..training import pretrain_backbone, read_jsonl, train_adapter, write_jsonl
from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import StageError, run_pipeline, stage, write_text
from .studies import beta_sweep, profile_heatmap, threshold_tradeoff

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _seed(cfg: ExperimentConfig, args) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _dataset(cfg, path, seed, which):
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"data file not found: {path}")
        try:
            return read_jsonl(path, cfg.num_classes, os.path.basename(path))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad data file {path}: {exc}") from exc
    n, offset = {"pretrain": (cfg.n_pretrain, 1000), "train": (cfg.n_train, 2000)}[which]
    return make_corpus(n, offset + seed, cfg.noise, cfg.clauses, which)


def _load(path, kind):
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint not found: {path}")
    obj = checkpoint.load(path)
    if not isinstance(obj, kind):
        raise ConfigError(f"{path} does not hold a {kind.__name__}")
    return obj


def cmd_pretrain(cfg, args):
    seed = _seed(cfg, args)
    data = _dataset(cfg, args.data or cfg.pretrain_path, seed, "pretrain")
    history = []
    with stage("pretrain"):
        bb = pretrain_backbone(data, cfg.pretrain_config(seed), cfg.vocab_size, cfg.dim, cfg.num_classes,
                               cfg.max_len, history, cfg.embed_scale)
    checkpoint.save(bb, os.path.join(args.out, "backbone.ckpt"))
    write_text(os.path.join(args.out, "pretrain_history.json"), json.dumps({"epoch_loss": history}, indent=2) + "\n")


def cmd_train_adapter(cfg, args):
    seed = _seed(cfg, args)
    bb = _load(args.backbone or os.path.join(args.out, "backbone.ckpt"), BackboneParams)
    data = _dataset(cfg, args.data or cfg.train_path, seed, "train")
    history = []
    with stage("train_adapter"):
        delta = train_adapter(bb, data, cfg.train_config(seed), cfg.rank, cfg.max_len, args.tag, history)
    checkpoint.save(delta, os.path.join(args.out, f"adapter_{args.tag}.ckpt"))
    write_text(os.path.join(args.out, f"adapter_{args.tag}_history.json"),
               json.dumps({"epoch_loss": history}, indent=2) + "\n")


def cmd_attack(cfg, args):
    seed = _seed(cfg, args)
    bb = _load(args.backbone or os.path.join(args.out, "backbone.ckpt"), BackboneParams)
    delta = _load(args.adapter or os.path.join(args.out, "adapter_clean.ckpt"), AdapterDelta)
    data = _dataset(cfg, args.data or cfg.train_path, seed, "train")
    synonyms = None
    if args.attack_kind.startswith("word"):
        synonyms = load_synonyms(args.synonyms or cfg.synonyms_path, cfg.synonyms_per_word)
    try:
        spec = AttackSpec(args.attack_kind, args.budget, cfg.target.max_queries, seed, synonyms)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    results = []
    with stage("attack"):
        adv = generate_adversarial_dataset(make_oracle(bb, delta, cfg.max_len), data, spec, results)
    path = os.path.join(args.out, f"adversarial_{args.attack_kind}.jsonl")
    os.makedirs(args.out, exist_ok=True)
    write_jsonl(adv, path)
    queries = sum(r.queries_used for r in results)
    print(f"{len(adv)} lines written to {path} ({len(results)} attacked, {queries} queries)", file=sys.stderr)


def cmd_eval(cfg, args):
    sys.stdout.write(run_pipeline(cfg, args.out))


def cmd_profile(cfg, args):
    sys.stdout.write(profile_heatmap(cfg, args.out))


def cmd_sweep(cfg, args):
    sys.stdout.write(beta_sweep(cfg, args.out))


def cmd_tradeoff(cfg, args):
    sys.stdout.write(threshold_tradeoff(cfg, args.out))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="run this single seed instead of the configured list")

    parser = argparse.ArgumentParser(prog="adpmixup", description="Entropy-routed adapter mixing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the shared backbone")
    p.add_argument("--data", help="JSONL pretraining set (default: synthetic corpus)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-adapter", parents=[common], help="fit one adapter on a frozen backbone")
    p.add_argument("--backbone", help="backbone checkpoint (default: OUT/backbone.ckpt)")
    p.add_argument("--data", help="JSONL training set (default: synthetic corpus)")
    p.add_argument("--tag", default="clean", help="adapter name used in the output file")
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("attack", parents=[common], help="generate an adversarial JSONL set")
    p.add_argument("--attack-kind", required=True, choices=KINDS)
    p.add_argument("--budget", type=float, default=0.3, help="max fraction of words perturbed")
    p.add_argument("--synonyms", help="word<TAB>cand,cand,... lexicon (default: shipped table)")
    p.add_argument("--backbone", help="backbone checkpoint (default: OUT/backbone.ckpt)")
    p.add_argument("--adapter", help="victim adapter (default: OUT/adapter_clean.ckpt)")
    p.add_argument("--data", help="JSONL set to attack (default: synthetic training corpus)")
    p.set_defaults(func=cmd_attack)

    for name, func, text in (("eval", cmd_eval, "full pipeline, six-method results table"),
                             ("profile", cmd_profile, "pre-known x target beta heatmap"),
                             ("sweep", cmd_sweep, "fixed-beta sweep over clean ratios"),
                             ("tradeoff", cmd_tradeoff, "detector threshold tradeoff")):
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seeds([args.seed])
        args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
