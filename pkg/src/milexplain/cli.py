"""Command-line pipeline: gen-data -> train -> explain -> heatmap -> eval.

Exit codes: 0 on success, 2 on bad flags, 1 on runtime failure. Every
subcommand takes ``--config FILE`` (JSON mapping of flag names to values);
explicit flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import interpret as it
from .evaluation import compare_report, localization_auc
from .model import init_classifier, load_model, save_model
from .training import TrainConfig, evaluate_classification, train, write_history

log = logging.getLogger("milexplain")

DEFAULT_SEED = 42


class UsageError(Exception):
    """Bad flag values detected after parsing; exits with code 2."""


def derive_seed(root: int, component: str) -> int:
    """Independent per-component seed derived from the root seed."""
    ss = np.random.SeedSequence([root, zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    if args.planted < 1:
        raise UsageError("--planted must be at least 1 (no planted features means no signal)")
    if args.planted > args.dim:
        raise UsageError("--planted cannot exceed --dim")
    try:
        cfg = data_mod.PlantedConfig(
            n_slides=args.slides,
            tiles_per_slide=args.tiles,
            dim=args.dim,
            planted_features=data_mod.pick_planted_features(args.dim, args.planted, args.seed),
            pos_tile_fraction=args.pos_fraction,
            signal_shift=args.shift,
            noise_sigma=args.noise,
            seed=args.seed,
            test_fraction=args.test_fraction,
        )
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    manifest = data_mod.generate_synthetic(cfg, args.out)
    n_test = len(manifest.split("test"))
    print(
        f"wrote {len(manifest.entries)} slides ({len(manifest.entries) - n_test} train, {n_test} test), "
        f"{cfg.tiles_per_slide} tiles x {cfg.dim} dims, planted features {list(cfg.planted_features)} "
        f"-> {Path(args.out) / 'manifest.json'}"
    )


def _parse_hidden(text: str | None):
    if text is None or text == "":
        return None
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"bad layer list {text!r}") from e


def cmd_train(args) -> None:
    manifest = data_mod.DatasetManifest.from_file(args.data)
    train_bags = manifest.load("train")
    test_bags = manifest.load("test")
    if args.r < 1:
        raise UsageError("--r must be at least 1")
    model = init_classifier(
        args.arch,
        P=manifest.dim,
        N=args.descriptor_dim,
        C=args.classes,
        R=args.r,
        attention_hidden=args.attention_hidden,
        extractor_hidden=_parse_hidden(args.extractor_hidden),
        scorer_bias=not args.no_scorer_bias,
        seed=derive_seed(args.seed, "init"),
    )
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        l2_weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=derive_seed(args.seed, "train"),
        optimizer=args.optimizer,
        threads=args.threads,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    history = train(model, train_bags, cfg, test_bags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    write_history(history, out / "history.jsonl")
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss {last.mean_loss:.4f} train AUC {last.train_auc} test AUC {last.test_auc}")
    print(f"model ({model.arch}, M={model.dims.M}) -> {out / 'model.json'}")


def _classes(args, model) -> list[int]:
    if args.cls is None:
        return list(range(model.dims.C))
    if not 0 <= args.cls < model.dims.C:
        raise UsageError(f"--class {args.cls} out of range for a {model.dims.C}-class model")
    return [args.cls]


def cmd_explain(args) -> None:
    model = load_model(args.model)
    bags = data_mod.DatasetManifest.from_file(args.data).load(args.split)
    if args.top_l < 1 or (args.top_L is not None and args.top_L < 1):
        raise UsageError("--top-l and --top-L must be positive")
    if not 0 <= args.quantile <= 1:
        raise UsageError("--quantile must be in [0, 1]")
    config = {
        "split": args.split,
        "L": args.top_L if args.top_L is not None else model.dims.M // 2,
        "l": args.top_l,
        "quantile": args.quantile,
        "arch": model.arch,
    }
    docs = []
    for c in _classes(args, model):
        sa, ta = it.explain_class(model, bags, c, args.top_L, args.top_l, args.quantile, args.threads)
        doc = it.attribution_document(sa, ta, config)
        doc["orientation"] = it.score_orientation(model, sa)
        docs.append(doc)
        print(f"class {c}: K_c={sa.K} k_c={ta.k} ({len(sa.slides)} slides, {len(ta.tiles)} tiles)")
    Path(args.out).write_text(json.dumps({"classes": docs, "config": config}, indent=2) + "\n")


def cmd_ascent(args) -> None:
    model = load_model(args.model)
    if not model.has_extractor:
        raise UsageError("model has an identity extractor; activation maximisation is undefined")
    res = it.max_activation_ascent(
        model, args.feature, args.step, args.max_iters, args.tol, derive_seed(args.seed, "ascent")
    )
    doc = {"feature": res.feature, "X": res.X.tolist(), "trace": res.trace, "iterations": res.iterations}
    Path(args.out).write_text(json.dumps(doc) + "\n")
    print(f"feature {res.feature}: activation {res.trace[0]:.4f} -> {res.trace[-1]:.4f} in {res.iterations} steps")


def _features_for(doc: dict, c: int) -> tuple[list[int], dict]:
    for entry in doc["classes"]:
        if entry["class"] == c:
            return entry["k_c"], entry.get("orientation", {})
    raise UsageError(f"features file has no entry for class {c}")


def cmd_heatmap(args) -> None:
    model = load_model(args.model)
    if not 0 <= args.cls < model.dims.C:
        raise UsageError(f"--class {args.cls} out of range for a {model.dims.C}-class model")
    features_path = Path(args.features)
    if not features_path.exists():
        raise FileNotFoundError(f"features file {features_path} not found; run explain first")
    k_c, orientation = _features_for(json.loads(features_path.read_text()), args.cls)
    bags = data_mod.DatasetManifest.from_file(args.data).load(args.split)
    hm = it.compute_heatmap(model, bags, k_c, args.cls)
    ts = it.tile_score_heatmap(model, bags, args.cls, orientation)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(it.HEATMAP_HEADER)
        w.writerows(it.heatmap_rows(hm, "feature_based"))
        w.writerows(it.heatmap_rows(ts, "tile_scores"))
    n = sum(len(v) for v in hm.values.values())
    print(f"{n} tiles x 2 methods -> {args.out} (features {hm.features}, tile scores flipped={ts.flipped})")


def read_heatmaps(path) -> "OrderedDict[str, dict[tuple[str, int], float]]":
    """method -> {(slide_id, tile_index): value}"""
    out: OrderedDict[str, dict] = OrderedDict()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != it.HEATMAP_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.setdefault(row["method"], {})[(row["slide_id"], int(row["tile_index"]))] = float(row["value"])
    return out


def cmd_eval(args) -> None:
    manifest = data_mod.DatasetManifest.from_file(args.data)
    truth = {}
    bags = manifest.load("all")
    for bag in bags:
        for j, lab in enumerate(bag.tile_labels):
            truth[(bag.slide_id, j)] = int(lab)
    maps = read_heatmaps(args.heatmaps)
    if not maps:
        raise ValueError("heat-map file is empty")
    localization = OrderedDict()
    for method, values in maps.items():
        keys = sorted(values)
        missing = [k for k in keys if k not in truth]
        if missing:
            raise ValueError(f"heat-map references unknown tiles, e.g. {missing[0]}")
        localization[method] = localization_auc(
            [values[k] for k in keys], [truth[k] for k in keys]
        ).auc
    cls_auc = None
    name = args.name
    if args.model:
        model = load_model(args.model)
        split_bags = manifest.load(args.split)
        cls_auc = evaluate_classification(model, split_bags, threads=args.threads).auc
        name = name or model.arch
    report = compare_report([{"model": name or "model", "classification_auc": cls_auc, "localization": localization}])
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    for row in report["rows"]:
        imp = row["relative_improvement"]
        extra = f" ({imp:+.1f}% vs {report['baseline_method']})" if imp is not None else ""
        print(f"{row['model']} {row['method']}: localization AUC {row['localization_auc']:.4f}{extra}")
    if cls_auc is not None:
        print(f"classification AUC ({args.split}): {cls_auc:.4f}")


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milexplain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--threads", type=int, default=1)

    g = sub.add_parser("gen-data", help="generate a synthetic planted-feature dataset")
    common(g)
    g.add_argument("--slides", type=int, default=200)
    g.add_argument("--tiles", type=int, default=100)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--planted", type=int, default=4, help="number of planted features")
    g.add_argument("--pos-fraction", type=float, default=0.1)
    g.add_argument("--shift", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--test-fraction", type=float, default=data_mod.DEFAULT_TEST_FRACTION)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier on slide labels")
    common(t)
    t.add_argument("--data", required=True, help="manifest.json")
    t.add_argument("--arch", choices=["minmax", "attention"], default="minmax")
    t.add_argument("--r", type=int, default=5)
    t.add_argument("--attention-hidden", type=int, default=128)
    t.add_argument("--extractor-hidden", default=None, help="comma-separated MLP widths; omit for identity")
    t.add_argument("--descriptor-dim", type=int, default=None)
    t.add_argument("--classes", type=int, default=2)
    t.add_argument("--no-scorer-bias", action="store_true")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.03)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="slide and tile attribution per class")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--class", dest="cls", type=int, default=None)
    e.add_argument("--top-L", dest="top_L", type=int, default=None)
    e.add_argument("--top-l", dest="top_l", type=int, default=it.DEFAULT_TOP_FEATURES)
    e.add_argument("--quantile", type=float, default=it.DEFAULT_QUANTILE)
    e.add_argument("--out", required=True, help="features.json")
    e.set_defaults(func=cmd_explain)

    a = sub.add_parser("ascent", help="activation maximisation for one extractor feature")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--feature", type=int, required=True)
    a.add_argument("--step", type=float, default=0.1)
    a.add_argument("--max-iters", type=int, default=512)
    a.add_argument("--tol", type=float, default=1e-6)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ascent)

    h = sub.add_parser("heatmap", help="feature-based and tile-score heat-maps as CSV")
    common(h)
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--features", required=True)
    h.add_argument("--split", choices=["train", "test", "all"], default="test")
    h.add_argument("--class", dest="cls", type=int, default=1)
    h.add_argument("--out", required=True, help="heatmaps.csv")
    h.set_defaults(func=cmd_heatmap)

    v = sub.add_parser("eval", help="localization and classification AUC report")
    common(v)
    v.add_argument("--heatmaps", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--model", default=None)
    v.add_argument("--name", default=None, help="model name in the report")
    v.add_argument("--split", choices=["train", "test", "all"], default="test")
    v.add_argument("--out", required=True, help="report.json")
    v.set_defaults(func=cmd_eval)
    p.subcommands = {"gen-data": g, "train": t, "explain": e, "ascent": a, "heatmap": h, "eval": v}
    return p


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"milexplain {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"milexplain {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
