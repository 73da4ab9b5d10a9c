"""Command-line entry point.

Exit codes: 0 on success, 2 for usage/config problems, 3 for numerical
failures (divergent training, gradient checks out of tolerance).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .checkpoint import load_model, save_model
from .config import FRONTEND_VARIANTS, PRESETS, load_config
from .data import (load_bundle, load_pretrained_vectors, load_rewrite_rows)
from .errors import ConfigError, DivergenceError, FormatError
from .experiments import (ablation_table, evaluate_accuracy, gradient_check_suite,
                          min_doc_len, model_embedding_matrix, nearest_report,
                          reconstruction_table, run_ablation, run_order_perturbation,
                          run_reconstruction_noise, run_training, write_run_csv)

GRADCHECK_TOLERANCE = 1e-4


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--dataset", help="dataset manifest file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default=None, help="output directory")


def _config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--preset", choices=sorted(PRESETS), default=None)
    sub.add_argument("--routing", choices=("static", "dynamic"), default=None)
    sub.add_argument("--route-iters", type=int, default=None)
    sub.add_argument("--precision", choices=("f32", "f64"), default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--embed-dim", type=int, default=None)
    sub.add_argument("--frontend", choices=FRONTEND_VARIANTS, default=None)
    sub.add_argument("--with-decoder", action="store_true", default=None)
    sub.add_argument("--pretrained", action="store_true",
                     help="initialize from a word-vector file (needs --embeddings)")
    sub.add_argument("--embeddings", help="text word-vector file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capstext",
        description="Capsule-network text classification with static and dynamic routing",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model and write a checkpoint")
    _common_flags(train)
    _config_flags(train)
    train.set_defaults(func=cmd_train)

    evaluate = commands.add_parser("eval", help="accuracy of a checkpoint on a split")
    _common_flags(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    evaluate.set_defaults(func=cmd_eval)

    ablation = commands.add_parser("ablation", help="front-end ablation grid")
    _common_flags(ablation)
    _config_flags(ablation)
    ablation.add_argument("--frontends", default=",".join(FRONTEND_VARIANTS))
    ablation.add_argument("--routings", default="static,dynamic")
    ablation.add_argument("--seeds", default="0,1,2,3,4")
    ablation.set_defaults(func=cmd_ablation)

    perturb = commands.add_parser("perturb-order",
                                  help="compare routing modes on rewritten sentences")
    _common_flags(perturb)
    perturb.add_argument("--static-checkpoint", required=True)
    perturb.add_argument("--dynamic-checkpoint", required=True)
    perturb.add_argument("--rewrites", required=True, help="original<TAB>variant TSV")
    perturb.set_defaults(func=cmd_perturb_order)

    neighbors = commands.add_parser("neighbors",
                                    help="nearest words in the trained embedding")
    _common_flags(neighbors)
    neighbors.add_argument("--checkpoint", required=True)
    neighbors.add_argument("--word", required=True)
    neighbors.add_argument("--k", type=int, default=5)
    neighbors.set_defaults(func=cmd_neighbors)

    reconstruct = commands.add_parser("reconstruct",
                                      help="decode a sentence under capsule perturbations")
    _common_flags(reconstruct)
    reconstruct.add_argument("--checkpoint", required=True)
    reconstruct.add_argument("--sentence", required=True)
    reconstruct.add_argument("--dim", default="0",
                             help="comma-separated 0-based capsule dimensions")
    reconstruct.add_argument("--noise", default="0.3", help="comma-separated offsets")
    reconstruct.set_defaults(func=cmd_reconstruct)

    gradcheck = commands.add_parser("gradcheck",
                                    help="finite-difference gradient suite (float64)")
    gradcheck.add_argument("--seeds", type=int, default=20,
                           help="random instances per layer")
    gradcheck.set_defaults(func=cmd_gradcheck)

    return parser


def _build_config(args):
    overrides = dict(
        preset=args.preset, routing=args.routing, route_iters=args.route_iters,
        precision=args.precision, epochs=args.epochs, embed_dim=args.embed_dim,
        frontend=args.frontend, seed=args.seed,
    )
    if args.with_decoder:
        overrides["with_decoder"] = True
    return load_config(args.config, **overrides)


def _load_training_bundle(args, cfg):
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    bundle = load_bundle(args.dataset, max_len=cfg.max_len, min_len=min_doc_len(cfg))
    if bundle.num_classes > cfg.num_classes:
        cfg = dataclasses.replace(cfg, num_classes=bundle.num_classes)
    embedding = None
    if args.pretrained:
        if not args.embeddings:
            raise ConfigError("--pretrained needs --embeddings VECTOR_FILE")
        rng = np.random.default_rng(cfg.seed)
        embedding = load_pretrained_vectors(args.embeddings, bundle.vocab, rng,
                                            dtype=cfg.dtype)
        if embedding.dim != cfg.embed_dim:
            cfg = dataclasses.replace(cfg, embed_dim=embedding.dim)
    return cfg, bundle, embedding


def _checkpoint_bundle(args, model):
    """Rebuild the dataset a checkpoint was trained on (vocab included)."""
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    bundle = load_bundle(args.dataset, max_len=model.max_len)
    if len(bundle.vocab) != model.vocab_size:
        raise ConfigError(
            f"dataset vocabulary has {len(bundle.vocab)} entries but the "
            f"checkpoint was trained with {model.vocab_size}; wrong dataset?"
        )
    return bundle


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg, bundle, embedding = _load_training_bundle(args, _build_config(args))
    record, model = run_training(cfg, bundle, embedding=embedding,
                                 log=lambda s: print(s, file=sys.stderr))
    out = _out_dir(args)
    save_model(out / "model.ckpt", model)
    write_run_csv(record, out / "run.csv")
    print(f"best_epoch {record.best_epoch} val_acc {record.best_val_acc:.4f} "
          f"test_acc {record.test_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    bundle = _checkpoint_bundle(args, model)
    split = getattr(bundle, args.split)
    print(f"{evaluate_accuracy(model, split):.4f}")
    return 0


def cmd_ablation(args) -> int:
    cfg = _build_config(args)
    cfg, bundle, embedding = _load_training_bundle(args, cfg)
    frontends = [f.strip() for f in args.frontends.split(",") if f.strip()]
    routings = [r.strip() for r in args.routings.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    cells = run_ablation(cfg, bundle, frontends, routings=routings, seeds=seeds,
                         embedding=embedding,
                         log=lambda s: print(s, file=sys.stderr))
    table = ablation_table(cells, dataset=cfg.dataset)
    out = _out_dir(args)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_perturb_order(args) -> int:
    model_static = load_model(args.static_checkpoint)
    model_dynamic = load_model(args.dynamic_checkpoint)
    bundle = _checkpoint_bundle(args, model_static)
    rows = load_rewrite_rows(args.rewrites)
    report = run_order_perturbation(model_static, model_dynamic, rows, bundle)
    out = _out_dir(args)
    (out / "perturbation.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_neighbors(args) -> int:
    model = load_model(args.checkpoint)
    bundle = _checkpoint_bundle(args, model)
    print(nearest_report(model_embedding_matrix(model), bundle.vocab,
                         args.word, args.k), end="")
    return 0


def cmd_reconstruct(args) -> int:
    model = load_model(args.checkpoint)
    bundle = _checkpoint_bundle(args, model)
    dims = [int(d) for d in str(args.dim).split(",") if d.strip()]
    noises = [float(n) for n in str(args.noise).split(",") if n.strip()]
    rows = run_reconstruction_noise(model, bundle.vocab, args.sentence, dims, noises)
    print(reconstruction_table(rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_check_suite(seeds=tuple(range(args.seeds)), log=print)
    worst = max(results.values())
    print(f"worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if worst < GRADCHECK_TOLERANCE else 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, FileNotFoundError, LookupError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
