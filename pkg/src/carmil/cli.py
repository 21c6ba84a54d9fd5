"""Command-line entry point.

Subcommands cover the full workflow: synthesize a dataset, train one
model, run the nested-CV evaluation, score context-awareness, run the
graph-shuffle ablation, and export neighborhood-distance heatmaps.
Every run echoes its resolved configuration to the output directory and
writes machine-readable CSV/JSON next to rendered PNG figures. Failures
map to stable exit codes (see EXIT_CODES) with one parsable
`error: <category>: <message>` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plots
from .data import SynthConfig, as_dataset, generate, ingest, write_dataset
from .errors import CarmilError, ConfigError, DataError, SurvivalDataError
from .graphs import (
    embedding_adjacency,
    joint_normalize,
    mean_neighbor_distance,
    spatial_adjacency,
    write_heatmap_csv,
)
from .model import CarmilModel
from .training import (
    EPOCH_GRID,
    LR_GRID,
    TrainConfig,
    ablate_shuffle,
    derive_seed,
    evaluate_context_awareness,
    make_bags,
    make_cv_plan,
    run_nested_cv,
    train_ensemble,
    train_one,
)

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "config": 2,
    "io": 3,
    "data": 4,
    "survival": 5,
}

_TRAIN_KEYS = {
    "beta", "learning_rate", "epochs", "k", "head", "encoder_layers",
    "decoder_layers", "embed_dim", "use_encoder", "seed",
}
_GEN_KEYS = {
    "n_slides", "tiles_per_slide", "feature_dim", "grid_side",
    "cluster_radius", "snr", "censoring_fraction", "seed",
}
_EVAL_KEYS = _TRAIN_KEYS | {
    "learning_rates", "epoch_grid", "outer_folds", "inner_folds", "repeats",
    "cv_seed", "shuffle_seeds", "context_awareness", "save_checkpoints", "n_jobs",
}
_ABLATE_KEYS = _TRAIN_KEYS | {"test_fraction", "split_seed", "shuffle_seeds", "inner_folds", "repeats"}


def _load_config(path: str, allowed: set[str]) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{p}: unknown config keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    return cfg


def _echo_config(out_dir: Path, subcommand: str, resolved: dict) -> None:
    payload = {"subcommand": subcommand, "resolved": resolved}
    (out_dir / "config_echo.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(raw: dict, seed_override: int | None) -> TrainConfig:
    kwargs = {k: raw[k] for k in raw if k in _TRAIN_KEYS}
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        cfg = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    if not cfg.use_encoder and cfg.beta > 0.0:
        raise ConfigError("beta > 0 requires use_encoder: the raw-feature pipeline has no decoder")
    return cfg


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = _load_config(args.config, _GEN_KEYS)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad generator config: {exc}") from exc
    out = _out_dir(args)
    slides = generate(cfg)
    manifest = write_dataset(as_dataset(slides), out, clusters=[s.cluster_mask for s in slides])
    plots.dataset_overview(slides, out / "dataset_overview.png")
    _echo_config(out, "gen-data", asdict(cfg))
    n_events = sum(s.label.event for s in slides)
    print(f"wrote {len(slides)} slides ({n_events} events) to {manifest}")
    return 0


def cmd_train(args) -> int:
    raw = _load_config(args.config, _TRAIN_KEYS)
    cfg = _train_config(raw, args.seed)
    dataset = ingest(args.manifest)
    if not dataset:
        raise DataError("manifest lists no slides")
    bags = make_bags(dataset, cfg.k)
    if not any(b.label.event for b in bags):
        raise SurvivalDataError("dataset is entirely censored; nothing to fit")
    out = _out_dir(args)

    feature_dim = bags[0].tiles.features.shape[1]
    model = CarmilModel(cfg.model_config(feature_dim), cfg.seed)
    result = train_one(model, bags, cfg)

    model.save(out / "checkpoint.json")
    _write_csv(
        out / "loss_curves.csv",
        ["epoch", "loss_mil", "loss_car", "loss_total"],
        [
            [c.epoch, repr(c.loss_mil), "" if c.loss_car is None else repr(c.loss_car), repr(c.loss_total)]
            for c in result.curves
        ],
    )
    plots.loss_curves(result.curves, out / "loss_curves.png")
    # per-tile attention / contribution / score weights for interpretability
    weight_rows = []
    for bag in bags:
        for tile_id, weight in enumerate(model.tile_values(bag.tiles, bag.graph)):
            weight_rows.append([bag.tiles.slide_id, tile_id, repr(float(weight))])
    _write_csv(out / "tile_weights.csv", ["slide_id", "tile_id", "weight"], weight_rows)
    _echo_config(out, "train", {**asdict(cfg), "manifest": str(args.manifest), "n_slides": len(bags)})
    last = result.curves[-1]
    print(
        f"trained {cfg.head} on {len(bags)} slides for {cfg.epochs} epochs: "
        f"final loss {last.loss_total:.4f} (survival {last.loss_mil:.4f})"
    )
    return 0


def cmd_evaluate(args) -> int:
    raw = _load_config(args.config, _EVAL_KEYS)
    cfg = _train_config(raw, args.seed)
    learning_rates = tuple(raw.get("learning_rates", LR_GRID))
    epoch_grid = tuple(raw.get("epoch_grid", EPOCH_GRID))
    shuffle_seeds = tuple(raw.get("shuffle_seeds", ()))
    context = bool(raw.get("context_awareness", True))
    save_checkpoints = bool(raw.get("save_checkpoints", True))
    n_jobs = int(raw.get("n_jobs", 1))
    cv_seed = int(raw.get("cv_seed", cfg.seed))

    dataset = ingest(args.manifest)
    plan = make_cv_plan(
        [t.slide_id for t, _ in dataset],
        seed=cv_seed,
        n_outer=int(raw.get("outer_folds", 5)),
        n_inner=int(raw.get("inner_folds", 5)),
        repeats=int(raw.get("repeats", 3)),
    )
    outcome = run_nested_cv(
        dataset, plan, cfg,
        learning_rates=learning_rates, epoch_grid=epoch_grid,
        shuffle_seeds=shuffle_seeds, context_awareness=context, n_jobs=n_jobs,
    )
    report = outcome.report
    out = _out_dir(args)

    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    _write_csv(
        out / "folds.csv",
        ["fold", "n_test", "chosen_learning_rate", "chosen_epochs", "cindex"],
        [
            [f.fold, len(f.test_slides), repr(f.chosen_learning_rate), f.chosen_epochs, repr(f.cindex)]
            for f in report.folds
        ],
    )
    plots.fold_cindex(report, out / "cindex_by_fold.png")
    if report.context:
        per_slide = report.context["per_slide"]
        _write_csv(
            out / "deltacon_per_slide.csv",
            ["slide_id", "deltacon_features", "deltacon_embedding"],
            [
                [r["slide_id"], repr(r["deltacon_features"]), repr(r["deltacon_embedding"])]
                for r in per_slide
            ],
        )
        plots.deltacon_comparison(
            [r["deltacon_features"] for r in per_slide],
            [r["deltacon_embedding"] for r in per_slide],
            out / "deltacon_comparison.png",
        )
    if report.shuffle:
        _write_csv(
            out / "shuffle_ablation.csv",
            ["fold", "seed", "cindex_original", "cindex_shuffled"],
            [
                [r["fold"], r["seed"], repr(r["cindex_original"]), repr(r["cindex_shuffled"])]
                for r in report.shuffle["rows"]
            ],
        )
        plots.shuffle_deltas(report.shuffle["rows"], out / "shuffle_ablation.png")
    if save_checkpoints:
        for fold, ens in enumerate(outcome.ensembles):
            fold_dir = out / "checkpoints" / f"outer_{fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            for m in ens.members:
                m.model.save(fold_dir / f"member_inner{m.inner_fold}_rep{m.repeat}.json")

    _echo_config(
        out, "evaluate",
        {
            **asdict(cfg),
            "manifest": str(args.manifest),
            "learning_rates": list(learning_rates),
            "epoch_grid": list(epoch_grid),
            "shuffle_seeds": list(shuffle_seeds),
            "context_awareness": context,
            "cv_seed": cv_seed,
            "outer_folds": plan.n_outer,
            "inner_folds": plan.n_inner,
            "repeats": plan.repeats,
            "n_jobs": n_jobs,
        },
    )
    print(report.to_text(), end="")
    return 0


def cmd_deltacon(args) -> int:
    dataset = ingest(args.manifest)
    if not dataset:
        raise DataError("manifest lists no slides")
    bags = make_bags(dataset, args.k)
    model = CarmilModel.load(args.checkpoint) if args.checkpoint else None
    out = _out_dir(args)

    if model is not None:
        result = evaluate_context_awareness(model, bags, k=args.k)
        rows = result.rows
        _write_csv(
            out / "deltacon_per_slide.csv",
            ["slide_id", "deltacon_features", "deltacon_embedding"],
            [[r.slide_id, repr(r.deltacon_features), repr(r.deltacon_embedding)] for r in rows],
        )
        plots.deltacon_comparison(
            [r.deltacon_features for r in rows],
            [r.deltacon_embedding for r in rows],
            out / "deltacon_comparison.png",
        )
        summary = result.summary()
        print(
            f"{len(rows)} slides: features {summary['deltacon_features_mean']:.4f} "
            f"({summary['deltacon_features_std']:.4f})  embeddings "
            f"{summary['deltacon_embedding_mean']:.4f} ({summary['deltacon_embedding_std']:.4f})"
        )
    else:
        from .deltacon import DeltaConConfig, deltacon

        dcfg = DeltaConConfig(k=args.k)
        scores = []
        for bag in bags:
            a_x = embedding_adjacency(bag.tiles.features, args.k)
            scores.append((bag.tiles.slide_id, deltacon(bag.graph, a_x, dcfg).score))
        _write_csv(
            out / "deltacon_per_slide.csv",
            ["slide_id", "deltacon_features"],
            [[sid, repr(s)] for sid, s in scores],
        )
        vals = np.array([s for _, s in scores])
        print(f"{len(scores)} slides: features {vals.mean():.4f} ({vals.std():.4f})")

    _echo_config(out, "deltacon", {
        "manifest": str(args.manifest), "k": args.k,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
    })
    return 0


def cmd_ablate_shuffle(args) -> int:
    raw = _load_config(args.config, _ABLATE_KEYS)
    test_fraction = float(raw.pop("test_fraction", 0.3))
    split_seed = int(raw.pop("split_seed", 7))
    shuffle_seeds = [int(s) for s in raw.pop("shuffle_seeds", [0, 1, 2, 3, 4])]
    inner_folds = int(raw.pop("inner_folds", 5))
    repeats = int(raw.pop("repeats", 3))
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie strictly between 0 and 1")
    cfg = _train_config(raw, args.seed)

    dataset = ingest(args.manifest)
    bags = make_bags(dataset, cfg.k)
    rng = np.random.Generator(np.random.PCG64(split_seed))
    order = rng.permutation(len(bags))
    n_test = max(1, int(round(test_fraction * len(bags))))
    test_bags = [bags[i] for i in order[:n_test]]
    train_bags = [bags[i] for i in order[n_test:]]
    if len(train_bags) < inner_folds:
        raise DataError("too few training slides for the inner split")

    inner_ids = [b.tiles.slide_id for b in train_bags]
    rng_inner = np.random.Generator(np.random.PCG64(derive_seed(split_seed, 1)))
    perm = rng_inner.permutation(len(inner_ids))
    assignment = {inner_ids[p]: i % inner_folds for i, p in enumerate(perm)}
    ensemble = train_ensemble(train_bags, assignment, cfg, n_inner=inner_folds, repeats=repeats)

    rows = []
    for s in shuffle_seeds:
        c_orig, c_shuf = ablate_shuffle(ensemble, test_bags, s)
        rows.append({"fold": 0, "seed": s, "cindex_original": c_orig, "cindex_shuffled": c_shuf})

    out = _out_dir(args)
    _write_csv(
        out / "shuffle_ablation.csv",
        ["seed", "cindex_original", "cindex_shuffled"],
        [[r["seed"], repr(r["cindex_original"]), repr(r["cindex_shuffled"])] for r in rows],
    )
    plots.shuffle_deltas(rows, out / "shuffle_ablation.png")
    _echo_config(out, "ablate-shuffle", {
        **asdict(cfg), "manifest": str(args.manifest), "test_fraction": test_fraction,
        "split_seed": split_seed, "shuffle_seeds": shuffle_seeds,
        "inner_folds": inner_folds, "repeats": repeats,
    })
    deltas = [r["cindex_original"] - r["cindex_shuffled"] for r in rows]
    print(
        f"shuffle ablation over {len(rows)} seeds: original {rows[0]['cindex_original']:.4f}, "
        f"mean shuffled {np.mean([r['cindex_shuffled'] for r in rows]):.4f}, "
        f"mean drop {np.mean(deltas):+.4f}"
    )
    return 0


def cmd_heatmap(args) -> int:
    dataset = ingest(args.manifest)
    matches = [(t, lab) for t, lab in dataset if t.slide_id == args.slide]
    if not matches:
        raise DataError(f"slide {args.slide!r} not found in manifest")
    tiles, _ = matches[0]
    graph = spatial_adjacency(tiles, args.k)
    out = _out_dir(args)

    y_features = mean_neighbor_distance(tiles.features, graph)
    model = CarmilModel.load(args.checkpoint) if args.checkpoint else None
    if model is not None:
        z = model.embed_value(tiles, graph)
        y_encoder = mean_neighbor_distance(z, graph)
        y_features_n, y_encoder_n = joint_normalize(y_features, y_encoder)
        write_heatmap_csv(out / "heatmap_features.csv", tiles, y_features_n)
        write_heatmap_csv(out / "heatmap_encoder.csv", tiles, y_encoder_n)
        plots.heatmap_pair(tiles.coords, y_features_n, y_encoder_n, out / "heatmap.png")
        print(
            f"slide {args.slide}: mean normalized neighbor distance "
            f"features {y_features_n.mean():.4f}, encoder {y_encoder_n.mean():.4f}"
        )
    else:
        top = float(y_features.max())
        y_norm = y_features / top if top > 0 else y_features
        write_heatmap_csv(out / "heatmap_features.csv", tiles, y_norm)
        plots.heatmap_pair(tiles.coords, y_norm, None, out / "heatmap.png")
        print(f"slide {args.slide}: mean normalized neighbor distance features {y_norm.mean():.4f}")

    _echo_config(out, "heatmap", {
        "manifest": str(args.manifest), "slide": args.slide, "k": args.k,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
    })
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carmil",
        description="Context-aware regularization for MIL survival models on tile graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true", help="verbose output")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--config", required=True, help="generator config JSON")
    common(p, manifest=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a whole dataset", formatter_class=fmt)
    p.add_argument("--config", required=True, help="training config JSON")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="nested cross-validation with ensembling", formatter_class=fmt)
    p.add_argument("--config", required=True, help="evaluation config JSON")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("deltacon", help="context-awareness scores per slide", formatter_class=fmt)
    p.add_argument("--k", type=int, default=8, help="nearest neighbors for all graphs")
    p.add_argument("--checkpoint", default=None, help="model checkpoint for embedding-space scores")
    common(p)
    p.set_defaults(func=cmd_deltacon)

    p = sub.add_parser("ablate-shuffle", help="graph-shuffle ablation of a trained ensemble", formatter_class=fmt)
    p.add_argument("--config", required=True, help="ablation config JSON")
    common(p)
    p.set_defaults(func=cmd_ablate_shuffle)

    p = sub.add_parser("heatmap", help="neighbor-distance heatmap for one slide", formatter_class=fmt)
    p.add_argument("--slide", required=True, help="slide id to render")
    p.add_argument("--k", type=int, default=8, help="spatial nearest neighbors")
    p.add_argument("--checkpoint", default=None, help="model checkpoint for encoder heatmap")
    common(p)
    p.set_defaults(func=cmd_heatmap)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except SurvivalDataError as exc:
        print(f"error: survival: {exc}", file=sys.stderr)
        return EXIT_CODES["survival"]
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]
    except ValueError as exc:  # bad flag values (k out of range, bag too small, ...)
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except (CarmilError, FloatingPointError) as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return EXIT_CODES["internal"]


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
