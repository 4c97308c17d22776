"""Pipeline commands: data generation through training, eval, and reports.

Six subcommands — gen-data, train-complexity, train-icar, eval,
cost-report, bench — share the global flags --config/--seed/--out/--force/
--quiet. Reports are CSV files whose first line carries the resolved
config hash; nothing except progress chatter goes to stdout, and errors go
to stderr with a nonzero exit code. Existing output files are never
overwritten without --force.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from icar.complexity.metrics import eval_binary, eval_regression
from icar.complexity.model import ComplexityModel, classify_scores, predict_score
from icar.complexity.train import train_complexity
from icar.config import derive_seed, load_run_config
from icar.costmodel import (baseline_gflops, expected_gflops,
                            measure_throughput, production_projection,
                            speedup_estimate)
from icar.encoders.routing import encode_image_routed
from icar.encoders.text import TextEncoder
from icar.encoders.vit import MiniViT
from icar.errors import ConfigError, ContractError, IcarError
from icar.retrieval import build_index, map_at_k, recall_at_k, rsum_retention, search_topk
from icar.synthdata.manifest import (MANIFEST_NAME, generate_dataset,
                                     load_dataset, split_dataset,
                                     write_manifest)
from icar.training import load_icar, save_icar, train_loop, write_history_csv
from icar.training.loop import _encode_images, _encode_texts


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _output_file(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if path.exists() and not args.force:
        raise ContractError(f"refusing to overwrite {path}; pass --force")
    return path


def _write_csv(path: Path, config, fieldnames, rows, trailer=None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-hash={config.config_hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
        for line in trailer or []:
            fh.write(line + "\n")


def _split(samples, name: str):
    subset = [s for s in samples if s.split == name]
    if not subset:
        raise ContractError(f"dataset has no samples in the {name!r} split")
    return subset


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, config) -> None:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ContractError(
            f"refusing to write into non-empty directory {out}; pass --force"
        )
    d = config["data"]
    manifest = generate_dataset(out, seed=d["seed"], n_samples=d["size"],
                                image_size=d["image_size"],
                                max_objects=d["max_objects"])
    manifest = split_dataset(manifest, seed=derive_seed(config.seed, "split"))
    write_manifest(out / MANIFEST_NAME, manifest)
    splits = Counter(r.split for r in manifest.records)
    labels = Counter("complex" if r.label else "simple"
                     for r in manifest.records)
    _say(args, f"wrote {len(manifest.records)} samples to {out}")
    _say(args, "splits: " + ", ".join(
        f"{name}={splits[name]}" for name in ("train", "val", "test")))
    _say(args, "labels: " + ", ".join(
        f"{name}={labels[name]}" for name in ("simple", "complex")))


def cmd_train_complexity(args, config) -> None:
    ckpt_path = _output_file(args, "complexity.ckpt")
    csv_path = _output_file(args, "complexity_metrics.csv")
    samples = load_dataset(args.data)
    train = _split(samples, "train")
    val = _split(samples, "val")
    test = _split(samples, "test")
    head = config["complexity"]["head"]
    model = ComplexityModel(head=head,
                            image_size=train[0].image.shape[-1],
                            seed=derive_seed(config.seed, "complexity-init"))
    model, history = train_complexity(model, train, val,
                                      config.complexity_train_config())
    for row in history:
        _say(args, f"epoch {row['epoch']}: train_loss={row['train_loss']:.4f} "
                   f"val_metric={row['val_metric']:.4f}")

    images = np.stack([s.image for s in test])
    if head == "binary":
        scores = classify_scores(model, images)
        metrics = eval_binary(scores, [s.label for s in test],
                              threshold=config["complexity"]["threshold"])
    else:
        metrics = eval_regression(predict_score(model, images),
                                  [s.score for s in test])
    model.save(ckpt_path)
    rows = [{"metric": k, "value": "n/a" if v is None else v}
            for k, v in metrics.items()]
    _write_csv(csv_path, config, ("metric", "value"), rows)
    _say(args, "test metrics: " + ", ".join(
        f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
        for k, v in metrics.items()))


def cmd_train_icar(args, config) -> None:
    model_path = _output_file(args, "model.ckpt")
    history_path = _output_file(args, "history.csv")
    samples = load_dataset(args.data)
    training = config.training_config()
    clf = None
    if training.exit_rule == "routed":
        if args.complexity is None:
            raise ConfigError(
                "the routed exit rule needs --complexity CHECKPOINT "
                "(or use --exit-rule fixed)"
            )
        clf = ComplexityModel.load(args.complexity)
    vit = MiniViT(config.vision_config(), seed=derive_seed(config.seed, "vit"))
    text = TextEncoder(config.text_config(),
                       seed=derive_seed(config.seed, "text"))
    vit, text, history = train_loop(
        samples, training, vit=vit, text_encoder=text, complexity_model=clf,
        on_epoch=lambda row: _say(
            args, f"epoch {row['epoch']}: loss_total={row['loss_total']:.4f} "
                  f"val_r1_early={row['val_r1_early']:.3f} "
                  f"val_r1_full={row['val_r1_full']:.3f}"))
    save_icar(model_path, vit, text)
    write_history_csv(history_path, history,
                      comment=f"config-hash={config.config_hash()}")
    _say(args, f"saved model and {len(history)}-epoch history to {args.out}")


def _variant_exit(variant: str, exit_layers, depth: int) -> int:
    if variant == "full":
        return depth
    valid = ", ".join(["full"] + [str(k) for k in exit_layers])
    try:
        k = int(variant)
    except ValueError:
        raise ConfigError(f"unknown variant {variant!r}; valid: {valid}")
    if k not in exit_layers:
        raise ConfigError(f"unknown variant {variant!r}; valid: {valid}")
    return k


def cmd_eval(args, config) -> None:
    samples = load_dataset(args.data)
    test = _split(samples, "test")
    vit, text_encoder = load_icar(args.model)
    depth = vit.config.depth
    variants = args.variant or ["full",
                                str(config["training"]["exit_layer"])]
    exits = [_variant_exit(v, vit.config.exit_layers, depth)
             for v in variants]

    recall_ks = config["eval"]["recall_ks"]
    map_ks = config["eval"]["map_ks"]
    k_max = max(recall_ks + map_ks)
    ids = np.array([s.instance_id for s in test], dtype=np.int64)
    categories = np.array([s.category_id for s in test], dtype=np.int64)
    by_category = {}
    for i, cat in zip(ids, categories):
        by_category.setdefault(int(cat), set()).add(int(i))
    instance_truth = {int(i): int(i) for i in ids}
    category_truth = {int(i): by_category[int(c)]
                      for i, c in zip(ids, categories)}
    txt = _encode_texts(text_encoder, test)

    rows = []
    for variant, exit_layer in zip(variants, exits):
        matrix = _encode_images(vit, test, exit_layer)
        index = build_index(matrix, ids, categories=categories)
        results = [search_topk(index, txt[i], k_max, query_id=int(ids[i]))
                   for i in range(len(test))]
        row = {"variant": variant, "exit_layer": exit_layer}
        for k in recall_ks:
            row[f"r_at_{k}"] = recall_at_k(results, instance_truth, k)
        for k in map_ks:
            row[f"map_at_{k}"] = map_at_k(results, category_truth, k)
        row["rsum"] = sum(row[f"r_at_{k}"] for k in recall_ks)
        rows.append(row)

    full_rows = [r for r in rows if r["variant"] == "full"]
    for row in rows:
        if not full_rows:
            row["retention_pct"] = "n/a"
            continue
        row["retention_pct"] = rsum_retention(
            [row[f"r_at_{k}"] for k in recall_ks],
            [full_rows[0][f"r_at_{k}"] for k in recall_ks])

    fields = (["variant", "exit_layer"] + [f"r_at_{k}" for k in recall_ks]
              + [f"map_at_{k}" for k in map_ks] + ["rsum", "retention_pct"])
    _write_csv(_output_file(args, "eval.csv"), config, fields, rows)
    for row in rows:
        _say(args, f"{row['variant']}: rsum={row['rsum']:.2f} "
                   f"retention={row['retention_pct']}")


def cmd_cost_report(args, config) -> None:
    params = config.cost_params()
    exits = args.exit or [8, 12, 16, 20]
    rows = []
    for k in exits:
        rows.append({
            "variant": f"{k}/{params.vision_layers}",
            "exit_layer": k,
            "expected_gflops": round(expected_gflops(params, k), 4),
            "speedup_estimate": round(speedup_estimate(params, k), 4),
        })
    rows.append({
        "variant": "full",
        "exit_layer": "",
        "expected_gflops": round(baseline_gflops(params), 4),
        "speedup_estimate": 1.0,
    })
    projection = production_projection(config.projection_params())
    trailer = ["# projection"] + [f"{key},{round(value, 4)}"
                                  for key, value in projection.items()]
    path = _output_file(args, "cost_report.csv")
    _write_csv(path, config,
               ("variant", "exit_layer", "expected_gflops",
                "speedup_estimate"), rows, trailer=trailer)
    _say(args, f"wrote {len(rows)} cost rows and projection to {path}")


def cmd_bench(args, config) -> None:
    samples = load_dataset(args.data)
    if args.count < 1:
        raise ContractError(f"--count must be >= 1, got {args.count}")
    subset = samples[:args.count]
    images = [s.image for s in subset]
    if args.model is not None:
        vit, _ = load_icar(args.model)
    else:
        vit = MiniViT(config.vision_config(),
                      seed=derive_seed(config.seed, "vit"))
    clf = ComplexityModel.load(args.complexity)
    exit_layer = config["training"]["exit_layer"]
    threshold = config["complexity"]["threshold"]
    depth = vit.config.depth

    def routed(image):
        _, _, layers = encode_image_routed(vit, clf, image,
                                           exit_layer_for_simple=exit_layer,
                                           threshold=threshold)
        return layers

    def full(image):
        vit.encode(image[None], depth)
        return depth

    routed_out = measure_throughput(routed, images, repetitions=args.repeats)
    full_out = measure_throughput(full, images, repetitions=args.repeats)

    def fmt(result, speedup):
        histogram = ";".join(f"{k}:{v}"
                             for k, v in result["layers_histogram"].items())
        return {
            "mode": "",
            "images_per_second": round(result["images_per_second"], 2),
            "spread": ("n/a" if result["spread"] is None
                       else round(result["spread"], 2)),
            "speedup_vs_full": round(speedup, 4),
            "layers_used": histogram,
        }

    ratio = (routed_out["images_per_second"]
             / full_out["images_per_second"])
    rows = [dict(fmt(routed_out, ratio), mode="routed"),
            dict(fmt(full_out, 1.0), mode="full")]
    path = _output_file(args, "bench.csv")
    _write_csv(path, config,
               ("mode", "images_per_second", "spread", "speedup_vs_full",
                "layers_used"), rows)
    _say(args, f"routed {routed_out['images_per_second']:.1f} img/s vs "
               f"full {full_out['images_per_second']:.1f} img/s "
               f"(speedup {ratio:.3f})")


# ---------------------------------------------------------------------------
# argument plumbing


#: subcommand flag -> dotted config key it overrides
OVERRIDE_KEYS = {
    "gen-data": {"size": "data.size", "image_size": "data.image_size",
                 "max_objects": "data.max_objects"},
    "train-complexity": {"head": "complexity.head",
                         "epochs": "complexity.epochs",
                         "batch_size": "complexity.batch_size",
                         "lr": "complexity.lr"},
    "train-icar": {"alpha": "training.alpha", "epochs": "training.epochs",
                   "batch_size": "training.batch_size",
                   "exit_rule": "training.exit_rule",
                   "exit_layer": "training.exit_layer"},
    "eval": {},
    "cost-report": {},
    "bench": {"threshold": "complexity.threshold",
              "exit_layer": "training.exit_layer"},
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH",
                        help="TOML config file (flags override it)")
    shared.add_argument("--seed", type=int, help="root random seed")
    shared.add_argument("--out", metavar="DIR", required=True,
                        help="output directory")
    shared.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    shared.add_argument("--quiet", action="store_true",
                        help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="icar",
        description="complexity-aware adaptive image-text retrieval")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", parents=[shared],
                            help="generate the synthetic paired dataset")
    p.add_argument("--size", type=int, help="number of samples")
    p.add_argument("--image-size", type=int)
    p.add_argument("--max-objects", type=int)

    p = commands.add_parser("train-complexity", parents=[shared],
                            help="train the complexity scorer")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--head", choices=("binary", "regression"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = commands.add_parser("train-icar", parents=[shared],
                            help="dual-path training of both encoders")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--complexity", metavar="CKPT",
                   help="complexity checkpoint (needed for routed exits)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--exit-rule", choices=("routed", "fixed"))
    p.add_argument("--exit-layer", type=int)

    p = commands.add_parser("eval", parents=[shared],
                            help="retrieval metrics per exit variant")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--variant", action="append", metavar="K|full",
                   help="exit variant to evaluate (repeatable)")

    p = commands.add_parser("cost-report", parents=[shared],
                            help="closed-form GFLOP and projection report")
    p.add_argument("--exit", action="append", type=int, metavar="K")
    p.add_argument("--p-simple", type=float, dest="p_simple",
                   help="simple-traffic fraction (complement auto-set)")

    p = commands.add_parser("bench", parents=[shared],
                            help="wall-clock routed vs full throughput")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", metavar="CKPT")
    p.add_argument("--complexity", required=True, metavar="CKPT")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--count", type=int, default=64,
                   help="images to benchmark")
    p.add_argument("--threshold", type=float)
    p.add_argument("--exit-layer", type=int)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-complexity": cmd_train_complexity,
    "train-icar": cmd_train_icar,
    "eval": cmd_eval,
    "cost-report": cmd_cost_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for attr, dotted in OVERRIDE_KEYS[args.command].items():
        overrides[dotted] = getattr(args, attr)
    if args.command == "cost-report" and args.p_simple is not None:
        overrides["cost.p_simple"] = args.p_simple
        overrides["cost.p_complex"] = 1.0 - args.p_simple
    try:
        config = load_run_config(args.config, overrides)
        COMMANDS[args.command](args, config)
    except IcarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
