"""Command-line driver: each pipeline step is one subcommand.

Subcommands validate their inputs, write machine-readable reports (CSV or
JSON, negotiated strictly by file extension), render companion figures on
the report path, and drop a run manifest next to every output so any run
can be replayed byte-for-byte.

Exit codes: 0 success, 1 validation error, 2 I/O or format error. Errors
are printed as single-line JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cluster as cluster_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import figures
from . import knnpp as knnpp_mod
from . import project as project_mod
from . import tinynn

FORMAT_VERSIONS = {
    "embedding_set": data_mod.FORMAT_VERSION,
    "centroid_model": cluster_mod.MODEL_VERSION,
    "checkpoint": tinynn.CHECKPOINT_VERSION,
}

MANIFEST_NAME = "manifest.json"


class CliValidationError(ValueError):
    pass


def _require_ext(path: Path, ext: str) -> Path:
    if path.suffix != ext:
        raise CliValidationError(
            f"output {path} must have extension {ext!r} (format is negotiated by extension)"
        )
    return path


def _parse_fracs(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise CliValidationError(f"--fracs expects three comma-separated values, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_top_n(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p]
    except ValueError as exc:
        raise CliValidationError(f"--top-n expects comma-separated integers, got {text!r}") from exc
    if not values or any(v < 1 for v in values):
        raise CliValidationError(f"--top-n values must be >= 1, got {text!r}")
    return values


def _manifest_path(out: Path) -> Path:
    if out.suffix:  # file output
        return out.with_name(out.name + ".manifest.json")
    return out / MANIFEST_NAME


def _write_manifest(command: str, params: dict, out: Path, inputs: list[str],
                    outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "parameters": params,
        "seed": params.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "toolkit_version": __version__,
        "format_versions": FORMAT_VERSIONS,
        "duration_s": round(time.monotonic() - started, 6),
    }
    path = _manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_set_for_split(path: Path, split: str) -> data_mod.EmbeddingSet:
    """Load a set directory, or one split of a split-root directory."""
    if (path / data_mod.META_FILE).is_file():
        return data_mod.load_embedding_set(path)
    if (path / split / data_mod.META_FILE).is_file():
        return data_mod.load_embedding_set(path / split)
    if path.suffix == ".csv":
        return data_mod.load_embedding_csv(path)
    raise data_mod.DatasetFormatError(
        f"{path} is neither an embedding-set directory nor a split root containing {split!r}"
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_clean(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    metas = data_mod.load_sample_metas(args.in_path)
    cleaned = data_mod.clean_by_guess_rate(es, metas, args.threshold)
    kept = [m for m in metas if m.guess_rate >= args.threshold]
    out = Path(args.out)
    data_mod.save_embedding_set(cleaned, out)
    data_mod.save_sample_metas(kept, out)
    print(f"kept {cleaned.n}/{es.n} rows at threshold {args.threshold}")
    _write_manifest("clean", {"in": str(args.in_path), "out": str(out),
                              "threshold": args.threshold},
                    out, [str(args.in_path)], [str(out)], started)


def cmd_rebalance(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    balanced = data_mod.rebalance_classes(es, seed=args.seed)
    out = Path(args.out)
    data_mod.save_embedding_set(balanced, out)
    print(f"rebalanced {es.n} -> {balanced.n} rows ({balanced.num_classes} classes)")
    _write_manifest("rebalance", {"in": str(args.in_path), "out": str(out), "seed": args.seed},
                    out, [str(args.in_path)], [str(out)], started)


def cmd_split(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    fr = _parse_fracs(args.fracs)
    spec = data_mod.SplitSpec(train_frac=fr[0], val_frac=fr[1], test_frac=fr[2], seed=args.seed)
    train, val, test = data_mod.split(es, spec)
    out = Path(args.out)
    for name, part in (("train", train), ("val", val), ("test", test)):
        data_mod.save_embedding_set(part, out / name)
    print(f"split {es.n} rows into {train.n}/{val.n}/{test.n}")
    _write_manifest("split", {"in": str(args.in_path), "out": str(out),
                              "fracs": args.fracs, "seed": args.seed},
                    out, [str(args.in_path)],
                    [str(out / s) for s in ("train", "val", "test")], started)


def cmd_stats(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    hist = data_mod.class_histogram(es, bins=args.bins)
    out = _require_ext(Path(args.out), ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_histogram_csv(hist, out)
    outputs = [str(out)]
    if args.figures:
        png = out.with_suffix(".png")
        figures.save_histogram_png(hist, png)
        outputs.append(str(png))
    counts = hist.counts
    print(f"classes={es.num_classes} min={counts.min()} max={counts.max()} mean={counts.mean():.1f}")
    _write_manifest("stats", {"in": str(args.in_path), "out": str(out), "bins": args.bins,
                              "figures": args.figures},
                    out, [str(args.in_path)], outputs, started)


def cmd_fit(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    config = cluster_mod.KMeansConfig(
        k=args.k_per_class, max_iters=args.max_iters, tol=args.tol,
        restarts=args.restarts, seed=args.seed,
    )
    model = cluster_mod.fit_class_centroids(es, k_per_class=args.k_per_class, config=config)
    out = Path(args.out)
    cluster_mod.save_centroid_model(model, out)
    total = sum(m.shape[0] for m in model.centroids)
    print(f"fitted {total} centroids ({args.k_per_class} per class x {model.num_classes} classes)")
    _write_manifest("fit", {"in": str(args.in_path), "out": str(out),
                            "k_per_class": args.k_per_class, "restarts": args.restarts,
                            "max_iters": args.max_iters, "tol": args.tol, "seed": args.seed},
                    out, [str(args.in_path)], [str(out)], started)


def cmd_silhouette(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    report = cluster_mod.silhouette(es.data, es.labels)
    out = _require_ext(Path(args.out), ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cluster_mod.write_silhouette_csv(report, es.labels, out)
    outputs = [str(out)]
    if args.figures:
        png = out.with_suffix(".png")
        figures.save_silhouette_png(report, es.labels, png)
        outputs.append(str(png))
    print(f"overall_silhouette={report.overall!r}")
    _write_manifest("silhouette", {"in": str(args.in_path), "out": str(out),
                                   "figures": args.figures},
                    out, [str(args.in_path)], outputs, started)


def cmd_exemplars(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    model = cluster_mod.load_centroid_model(args.model)
    per_centroid = cluster_mod.exemplars_near_centroids(es, model, args.class_id, top_m=args.top_m)
    out = _require_ext(Path(args.out), ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cluster_mod.write_exemplars_csv(per_centroid, args.class_id, out)
    truncated = [ex.centroid for ex in per_centroid if ex.truncated]
    if truncated:
        print(f"warning: centroids {truncated} own fewer than {args.top_m} rows")
    print(f"wrote exemplars for class {args.class_id} ({len(per_centroid)} centroids)")
    _write_manifest("exemplars", {"in": str(args.in_path), "model": str(args.model),
                                  "out": str(out), "class": args.class_id, "top_m": args.top_m},
                    out, [str(args.in_path), str(args.model)], [str(out)], started)


def cmd_classify(args) -> None:
    started = time.monotonic()
    es = _load_set_for_split(Path(args.in_path), args.split)
    model = cluster_mod.load_centroid_model(args.model)
    config = knnpp_mod.VotingConfig(k_neighbors=args.k_neighbors, epsilon=args.epsilon)
    preds = knnpp_mod.classify_batch(es, model, config)
    out = _require_ext(Path(args.out), ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    knnpp_mod.write_predictions_csv(preds, out)
    print(f"classified {len(preds)} queries with k_neighbors={args.k_neighbors}")
    _write_manifest("classify", {"in": str(args.in_path), "model": str(args.model),
                                 "out": str(out), "k_neighbors": args.k_neighbors,
                                 "epsilon": args.epsilon, "split": args.split},
                    out, [str(args.in_path), str(args.model)], [str(out)], started)


def cmd_evaluate(args) -> None:
    started = time.monotonic()
    preds = knnpp_mod.read_predictions_csv(args.preds)
    es = _load_set_for_split(Path(args.in_path), args.split)
    if len(preds) != es.n:
        raise CliValidationError(f"{len(preds)} predictions for {es.n} labels in the {args.split} split")
    ns = _parse_top_n(args.top_n)
    report = eval_mod.accuracy_report(preds, es.labels, ns=ns)
    matrix = eval_mod.confusion_matrix(preds, es.labels, es.num_classes, es.label_names)
    confused = eval_mod.most_confused(matrix, m=min(args.most_confused, es.num_classes))
    out = _require_ext(Path(args.out), ".json")
    out.parent.mkdir(parents=True, exist_ok=True)
    eval_mod.write_accuracy_json(report, out, most_confused_ids=confused)
    confusion_path = out.with_name(out.stem + "_confusion.csv")
    eval_mod.write_confusion_csv(matrix, confusion_path)
    outputs = [str(out), str(confusion_path)]
    if args.figures:
        png = out.with_suffix(".png")
        figures.save_confusion_png(matrix, png, class_ids=confused)
        outputs.append(str(png))
    for n in ns:
        print(f"top_{n}_accuracy={report.per_n[n]!r}")
    _write_manifest("evaluate", {"preds": str(args.preds), "in": str(args.in_path),
                                 "out": str(out), "top_n": args.top_n, "split": args.split,
                                 "most_confused": args.most_confused, "figures": args.figures},
                    out, [str(args.preds), str(args.in_path)], outputs, started)


def cmd_project(args) -> None:
    started = time.monotonic()
    es = data_mod.load_any(args.in_path)
    if args.method == "pca":
        proj = project_mod.pca2(es)
    else:
        proj = project_mod.tsne2(es, perplexity=args.perplexity, iters=args.iters, seed=args.seed)
    out = _require_ext(Path(args.out), ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    project_mod.write_projection_csv(proj, es.label_names, out)
    outputs = [str(out)]
    if args.figures:
        png = out.with_suffix(".png")
        figures.save_projection_png(proj, es.label_names, png)
        outputs.append(str(png))
    print(f"{proj.method} objective={proj.objective!r}")
    _write_manifest("project", {"in": str(args.in_path), "out": str(out),
                                "method": args.method, "perplexity": args.perplexity,
                                "iters": args.iters, "seed": args.seed, "figures": args.figures},
                    out, [str(args.in_path)], outputs, started)


def cmd_train(args) -> None:
    started = time.monotonic()
    root = Path(args.data)
    if (root / "train" / tinynn.IMAGE_INDEX_FILE).is_file():
        tr_imgs, tr_labels, names = tinynn.load_image_dataset(root / "train")
        va_imgs, va_labels, _ = tinynn.load_image_dataset(root / "val")
    else:
        imgs, labels, names = tinynn.load_image_dataset(root)
        rng = np.random.default_rng(args.seed)
        perm = rng.permutation(imgs.shape[0])
        n_val = max(1, int(round(imgs.shape[0] * args.val_frac)))
        va_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        tr_imgs, tr_labels = imgs[tr_idx], labels[tr_idx]
        va_imgs, va_labels = imgs[va_idx], labels[va_idx]
    h, w = tr_imgs.shape[2], tr_imgs.shape[3]
    cfg = tinynn.CnnConfig(
        num_classes=len(names), in_channels=tr_imgs.shape[1],
        base_filters=args.base_filters, num_blocks=args.num_blocks, input_hw=(h, w),
    )
    model = tinynn.build_model(cfg, seed=args.seed)
    tcfg = tinynn.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
        seed=args.seed, optimizer=args.optimizer,
    )
    result = tinynn.train(model, tinynn.normalize_images(tr_imgs), tr_labels,
                          tinynn.normalize_images(va_imgs), va_labels, tcfg)
    out = Path(args.out)
    best_model = tinynn.CnnModel(config=cfg, params=result.best.params)
    tinynn.save_checkpoint(out, best_model, epoch=result.best.epoch, val_loss=result.best.val_loss)
    eval_mod.write_curve_csv(result.train_loss_curve, out / "train_loss.csv", columns=("step", "loss"))
    eval_mod.write_curve_csv(eval_mod.ema_smooth(result.train_loss_curve, args.ema_alpha),
                             out / "train_loss_ema.csv", columns=("step", "value"))
    eval_mod.write_curve_csv(result.val_loss_curve, out / "val_loss.csv",
                             columns=("epoch", "val_loss"), start=1)
    outputs = [str(out)]
    if args.figures:
        png = out / "loss_curves.png"
        figures.save_loss_curves_png(result.train_loss_curve, result.val_loss_curve, png,
                                     ema_alpha=args.ema_alpha)
        outputs.append(str(png))
    print(f"best epoch {result.best.epoch} val_loss={result.best.val_loss!r}")
    _write_manifest("train", {"data": str(args.data), "out": str(out), "lr": args.lr,
                              "batch": args.batch, "epochs": args.epochs, "seed": args.seed,
                              "optimizer": args.optimizer, "base_filters": args.base_filters,
                              "num_blocks": args.num_blocks, "val_frac": args.val_frac,
                              "ema_alpha": args.ema_alpha, "figures": args.figures},
                    out, [str(args.data)], outputs, started)


def cmd_gradcheck(args) -> None:
    # fixed tiny configuration: 8x8 RGB input, 3 blocks, doubling from 2 filters
    cfg = tinynn.CnnConfig(num_classes=3, in_channels=3, base_filters=2,
                           num_blocks=3, input_hw=(8, 8))
    model = tinynn.build_model(cfg, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((4, 3, 8, 8))
    labels = rng.integers(0, 3, size=4)
    report = tinynn.grad_check(model, x, labels, h=args.h, tolerance=args.tolerance)
    print(json.dumps({
        "passed": report.passed,
        "max_rel_error": report.max_rel_error,
        "tolerance": report.tolerance,
        "per_param": report.per_param,
    }, sort_keys=True))
    if not report.passed:
        raise CliValidationError(
            f"gradient check failed: max relative error {report.max_rel_error:.3e} >= {report.tolerance}"
        )


def cmd_replay(args) -> None:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise data_mod.DatasetFormatError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    command = manifest["command"]
    params = dict(manifest["parameters"])
    if args.out is not None:
        params["out"] = args.out
    argv = [command]
    for key, value in params.items():
        if key in ("in",):
            argv += ["--in", str(value)]
        elif isinstance(value, bool):
            argv += [f"--{key.replace('_', '-')}"] if value else [f"--no-{key.replace('_', '-')}"]
        else:
            argv += [f"--{key.replace('_', '-')}", str(value)]
    code = main(argv)
    if code != 0:
        raise CliValidationError(f"replayed command {command!r} exited with {code}")


# ---------------------------------------------------------------------------
# parser


def _add_figures_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True,
                   help="also render a PNG next to the report (default: on)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchlab",
        description="Clustering, centroid-voting classification and evaluation for embedding sets.",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"sketchlab {__version__} (" + ", ".join(
            f"{k} v{v}" for k, v in FORMAT_VERSIONS.items()) + ")",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="drop rows below a correct-guess-rate threshold")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=data_mod.DEFAULT_CLEAN_THRESHOLD)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("rebalance", help="up-sample every class to the maximum class count")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rebalance)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fracs", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="class-size histogram report")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--bins", type=int, default=data_mod.DEFAULT_HISTOGRAM_BINS)
    _add_figures_flag(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit", help="fit per-class sub-cluster centroids")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--k-per-class", dest="k_per_class", type=int, default=cluster_mod.DEFAULT_K_PER_CLASS)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("silhouette", help="silhouette report treating class labels as clusters")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_figures_flag(p)
    p.set_defaults(func=cmd_silhouette)

    p = sub.add_parser("exemplars", help="rows closest to each centroid of one class")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--top-m", dest="top_m", type=int, default=cluster_mod.DEFAULT_EXEMPLARS)
    p.set_defaults(func=cmd_exemplars)

    p = sub.add_parser("classify", help="centroid-voting classification of a set")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output predictions CSV")
    p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=knnpp_mod.DEFAULT_K_NEIGHBORS)
    p.add_argument("--epsilon", type=float, default=knnpp_mod.DEFAULT_EPSILON)
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="when --in is a split root, which split to classify")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="top-N accuracy, confusion matrix, most-confused classes")
    p.add_argument("--preds", required=True, help="predictions CSV from classify")
    p.add_argument("--in", dest="in_path", required=True, help="set (or split root) with true labels")
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--top-n", dest="top_n", default="1,5,10")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--most-confused", dest="most_confused", type=int, default=eval_mod.DEFAULT_MOST_CONFUSED)
    _add_figures_flag(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project", help="2-D projection (pca or tsne) of a set")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--method", choices=("pca", "tsne"), default="tsne")
    p.add_argument("--perplexity", type=float, default=project_mod.DEFAULT_PERPLEXITY)
    p.add_argument("--iters", type=int, default=project_mod.DEFAULT_TSNE_ITERS)
    p.add_argument("--seed", type=int, default=0)
    _add_figures_flag(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train the small CNN on a raw-u8 image dataset")
    p.add_argument("--data", required=True, help="image dataset dir (or dir with train/ and val/)")
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.add_argument("--lr", type=float, default=tinynn.DEFAULT_LEARNING_RATE)
    p.add_argument("--batch", type=int, default=tinynn.DEFAULT_BATCH_SIZE)
    p.add_argument("--epochs", type=int, default=tinynn.DEFAULT_EPOCHS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=tuple(sorted(tinynn.OPTIMIZERS)), default="adam")
    p.add_argument("--base-filters", dest="base_filters", type=int, default=16)
    p.add_argument("--num-blocks", dest="num_blocks", type=int, default=4)
    p.add_argument("--val-frac", dest="val_frac", type=float, default=0.1)
    p.add_argument("--ema-alpha", dest="ema_alpha", type=float, default=eval_mod.DEFAULT_EMA_ALPHA)
    _add_figures_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the CNN gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="redirect the replayed command's output path")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except data_mod.DatasetFormatError as exc:
        print(json.dumps({"error": "format", "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, AssertionError) as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
