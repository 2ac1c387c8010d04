"""Command-line surface: train, evaluate, calibrate, freeze the graph gate,
audit gradients, generate synthetic data, and dump loss part curves.

Every subcommand exits 0 on success; any failure prints exactly one
``error: <reason>`` line on stderr and exits 1.  Outputs are deterministic
for a given config and seed — no timestamps are written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from mlmargin.config import ConfigError, RunConfig, load_config, save_config
from mlmargin.data import (
    SynthSpec,
    generate_synthetic,
    load_dataset,
    reference_spec,
    save_dataset,
    split_dataset,
)
from mlmargin.gradtargets import MODULE_TARGETS, run_target
from mlmargin.labelgraph import load_embeddings, save_embeddings
from mlmargin.losses import AamConfig, aam_part_curves, format_part_curves_csv
from mlmargin.metrics import ThresholdVector, calibrate_thresholds
from mlmargin.model import MultilabelClassifier
from mlmargin.training import evaluate, predict_dataset, train

__all__ = ["main"]


def _load_split_pair(root: Path):
    """A data directory holds train/ and val/ subsets, or one full set."""
    if (root / "train" / "manifest.json").exists():
        return load_dataset(root / "train"), load_dataset(root / "val")
    full = load_dataset(root)
    return split_dataset(full)


def _class_names(ds) -> list:
    return ds.class_names or [f"class_{j}" for j in range(ds.num_classes)]


def _build_model(cfg: RunConfig, train_ds, data_root: Path) -> MultilabelClassifier:
    kwargs = {}
    if cfg.uses_graph():
        emb_path = Path(cfg.graph_embeddings) if cfg.graph_embeddings else data_root / "embeddings.txt"
        if not emb_path.exists():
            raise ConfigError(
                f"head {cfg.head_kind!r} needs per-class word embeddings, but none were "
                f"found at {emb_path}; datasets with unnamed labels cannot use the graph branch"
            )
        vectors = load_embeddings(emb_path, _class_names(train_ds))
        kwargs = {"annotations": train_ds.annotations(), "embeddings": vectors}
    return MultilabelClassifier(cfg, train_ds.num_classes,
                                np.random.default_rng(cfg.seed), **kwargs)


def _model_from_checkpoint(path, averaged: bool = True):
    """Rebuild a model; by default swap in the averaged weights for inference."""
    model, arrays, meta = MultilabelClassifier.from_checkpoint(path)
    if averaged:
        for name, p in model.named_parameters():
            shadow = arrays.get(f"ema.{name}")
            if shadow is not None:
                p.data = shadow.copy()
    return model, meta


def cmd_gen_synth(args) -> int:
    if args.spec in (None, "reference"):
        spec = reference_spec()
    else:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    ds = generate_synthetic(spec)
    ds.class_names = [f"class_{j}" for j in range(ds.num_classes)]
    train_ds, val_ds = split_dataset(ds)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train")
    save_dataset(val_ds, out / "val")
    # stand-in word vectors so graph heads work out of the box
    vectors = np.random.default_rng([spec.seed, 2]).normal(size=(ds.num_classes, 16))
    save_embeddings(out / "embeddings.txt", ds.class_names, vectors)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    print(f"wrote {len(train_ds)} train / {len(val_ds)} val samples, "
          f"{ds.num_classes} classes, avg labels/image {ds.avg_labels_per_image:.3f} -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    data_root = Path(args.data)
    train_ds, val_ds = _load_split_pair(data_root)
    model = _build_model(cfg, train_ds, data_root)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    res = train(model, train_ds, val_ds, out_dir=out)
    print(f"trained {res.epochs_run} epochs"
          f"{' (stopped early)' if res.stopped_early else ''}: "
          f"best val mAP {res.best_val_map:.4f}, "
          f"best averaged val mAP {res.best_ema_val_map:.4f} at epoch {res.best_epoch}; "
          f"checkpoint {res.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    data_root = Path(args.data)
    _, val_ds = _load_split_pair(data_root)
    fixed = evaluate(model, val_ds)
    payload = {"fixed": fixed.to_dict()}
    line = (f"mAP {fixed.mean_ap:.4f} OF1 {fixed.overall_f1:.4f} "
            f"CF1 {fixed.class_f1:.4f}")
    if args.thresholds:
        thr = ThresholdVector.from_dict(json.loads(Path(args.thresholds).read_text()))
        adapted = evaluate(model, val_ds, thr)
        payload["adapted"] = adapted.to_dict()
        payload["OF1-adapt"] = adapted.overall_f1
        payload["CF1-adapt"] = adapted.class_f1
        payload["delta"] = {"OF1": adapted.overall_f1 - fixed.overall_f1,
                            "CF1": adapted.class_f1 - fixed.class_f1}
        line += (f" | OF1-adapt {adapted.overall_f1:.4f} "
                 f"CF1-adapt {adapted.class_f1:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(payload, indent=1))
        line += f" -> {out / 'eval.json'}"
    else:
        print(json.dumps(payload, indent=1))
    print(line)
    return 0


def cmd_calibrate(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    data_root = Path(args.data)
    train_ds, _ = _load_split_pair(data_root)  # grid search on the train subset
    scores = predict_dataset(model, train_ds)
    thr = calibrate_thresholds(scores, train_ds.labels)
    out = Path(args.out) if args.out else data_root
    out.mkdir(parents=True, exist_ok=True)
    path = out / "thresholds.json"
    path.write_text(json.dumps(thr.to_dict(), indent=1))
    flagged = f", {len(thr.flagged)} classes left at 0.5 (no positives)" if thr.flagged else ""
    print(f"calibrated {len(thr.values)} per-class thresholds{flagged} -> {path}")
    return 0


def cmd_freeze_graph(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "frozen_gate.json"
    gate = model.freeze_gate(path)
    print(f"froze {gate.size} channel weights -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    targets = MODULE_TARGETS.get(args.module)
    if targets is None:
        raise ConfigError(
            f"unknown module {args.module!r}; choose from {sorted(MODULE_TARGETS)}"
        )
    seeds = range(args.seed, args.seed + args.repeats)
    all_ok = True
    for name in targets:
        worst = 0.0
        ok = True
        tol = None
        for seed in seeds:
            rep = run_target(name, seed)
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.passed
            tol = rep.tol
        all_ok = all_ok and ok
        print(f"{name}: max rel err {worst:.3e} (tol {tol:.0e}) "
              f"{'PASS' if ok else 'FAIL'}")
    if not all_ok:
        raise ConfigError("gradient audit failed; see lines above")
    return 0


def cmd_loss_curves(args) -> int:
    grid = np.linspace(-1.0, 1.0, 201)
    blocks = []
    for s in (5.0, 17.0, 23.0):
        for m in (0.0, 0.3):
            cfg = AamConfig(s=s, m=m, k=0.7, gamma_pos=0.0, gamma_neg=1.0)
            csv = format_part_curves_csv(aam_part_curves(cfg, grid))
            blocks.append((f"s{s:g}_m{m:g}", csv))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for tag, csv in blocks:
            (out / f"curves_{tag}.csv").write_text(csv)
        print(f"wrote {len(blocks)} part-curve tables -> {out}")
    else:
        for tag, csv in blocks:
            print(f"# {tag}")
            print(csv, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlmargin",
        description="Multilabel classification trainer: angular-margin loss, "
                    "label-graph gating, cross-attention head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic correlated-label dataset")
    p.add_argument("--spec", help="SynthSpec JSON file, or 'reference' (default)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config JSON (flat dotted keys)")
    p.add_argument("--data", required=True, help="dataset directory (train/ + val/, or one set)")
    p.add_argument("--out", help="override the config's output directory")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", help="calibrated per-class thresholds JSON")
    p.add_argument("--out", help="directory for eval.json (default: print)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="grid-search per-class thresholds on the train subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for thresholds.json (default: data dir)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("freeze-graph", help="precompute the graph gate once and save it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_freeze_graph)

    p = sub.add_parser("gradcheck", help="finite-difference audit of analytic gradients")
    p.add_argument("--module", default="all",
                   help="losses | labelgraph | decoder | backbone | model | all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3, help="seeds per target")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("loss-curves", help="dump positive/negative loss part curves as CSV")
    p.add_argument("--out", help="directory for CSV files (default: print)")
    p.set_defaults(func=cmd_loss_curves)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # contract: nonzero exit, one machine-parsable line
        reason = " ".join(str(e).split()) or e.__class__.__name__
        print(f"error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
