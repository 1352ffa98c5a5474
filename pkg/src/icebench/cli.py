"""``icebench`` command line.

Every subcommand reads one JSON config (``--config``); relative paths inside
it resolve against the config file's directory.  Machine-readable outputs go
to ``--out`` (default ``$ICEBENCH_OUT``, else ``./icebench_out``) and a short
human summary goes to stdout.

Exit codes: 0 success, 1 runtime failure (or any errored experiment cell),
2 invalid config or missing prerequisite.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from .chart_labels import LabelingConfig, rasterize_labels, write_label_raster
from .errors import ConfigError, IceBenchError, MissingFile, SpecError, UntrainedModel
from .partition import MeltClimatology, PartitionContext, RegionMap, SeasonRule, class_distribution, make_splits
from .preprocess import PrepConfig
from .sampling import SamplingConfig, build_patch_dataset
from .scene_store import DatasetManifest, load_dataset_manifest, load_scene, write_dataset_manifest, write_scene
from .synthgen import SynthSpec, generate, generate_paired_shift

log = logging.getLogger("icebench")

CONFIG_ERRORS = (ConfigError, SpecError, UntrainedModel, MissingFile, json.JSONDecodeError)


class Context:
    """Parsed global options plus the loaded config."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out or os.environ.get("ICEBENCH_OUT") or "icebench_out")
        self.dry_run = args.dry_run
        self.workers = args.workers
        if args.config is None:
            self.config, self.base = {}, Path.cwd()
        else:
            path = Path(args.config)
            if not path.is_file():
                raise MissingFile(f"config file {str(path)!r} not found")
            with open(path, encoding="utf-8") as fh:
                self.config = json.load(fh)
            if not isinstance(self.config, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
            self.base = path.parent

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def require(self, key: str, where=None):
        where = self.config if where is None else where
        if key not in where:
            raise ConfigError(f"config is missing required key {key!r}")
        return where[key]

    def manifest(self, key: str, where=None) -> DatasetManifest:
        return load_dataset_manifest(self.path(self.require(key, where)))

    def seed(self, default: int = 0) -> int:
        return self.args.seed if self.args.seed is not None else int(self.config.get("seed", default))

    def pipeline(self, key: str = "pipeline") -> ex.PipelineConfig:
        raw = dict(self.config.get(key, {}))
        raw["seed"] = self.seed(raw.get("seed", 0))
        return ex.PipelineConfig.from_json(raw)

    def partition_context(self) -> PartitionContext:
        data = self.config.get("data", {})
        kw = {}
        if "season_rule" in self.config:
            kw["season_rule"] = SeasonRule(self.config["season_rule"])
        for key, cls, kwname in (("climatology", MeltClimatology, "climatology"), ("regions", RegionMap, "regions")):
            src = data.get(key, self.config.get(key))
            if src is not None:
                with open(self.path(src), encoding="utf-8") as fh:
                    kw[kwname] = cls.from_json(json.load(fh))
        return PartitionContext(**kw)

    def dump(self, obj, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p


def _labeling(ctx: Context) -> LabelingConfig:
    return LabelingConfig(**ctx.config.get("labeling", {}))


def _prep(ctx: Context) -> PrepConfig:
    return PrepConfig.from_json(ctx.config.get("prep", {}))


# -- subcommands -----------------------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    raw = dict(ctx.config)
    shift = raw.pop("shift", None)
    disjoint = raw.pop("disjoint", True)
    spec = SynthSpec.from_json(raw)
    if ctx.args.seed is not None:
        spec = spec.replace(seed=ctx.args.seed)
    if ctx.dry_run:
        print(f"synth: config ok ({spec.n_scenes} scenes, {spec.height}x{spec.width})")
        return 0
    if shift:
        parts = generate_paired_shift(spec, shift, ctx.out, disjoint)
        print(f"synth: {shift} shift -> " + ", ".join(f"{k}: {len(v)} scenes" for k, v in parts.items()))
    else:
        paths = generate(spec, ctx.out)
        print(f"synth: wrote {len(paths)} scenes to {ctx.out}")
    return 0


def cmd_prepare(ctx: Context) -> int:
    manifest = ctx.manifest("manifest")
    cfg = ctx.pipeline()
    stats_src = ctx.manifest("stats_from") if "stats_from" in ctx.config else manifest
    if ctx.dry_run:
        manifest.validate()
        print(f"prepare: config ok ({len(manifest)} scenes)")
        return 0
    cache = ex.SceneCache()
    stats = ex.fit_stats(list(stats_src), cfg, cache)
    paths = []
    for p in manifest:
        scene, _ = cache.get(p, cfg)
        paths.append(str(write_scene(scene, ctx.out / "scenes" / scene.scene_id)))
    write_dataset_manifest(DatasetManifest(manifest.split, [os.path.relpath(p, ctx.out) for p in paths]),
                           ctx.out / "dataset.json")
    ctx.dump(stats.to_json() | {"normalization_id": stats.normalization_id}, "stats.json")
    print(f"prepare: {len(paths)} scenes at ratio {cfg.prep.downscale_ratio}, normalization {stats.normalization_id}")
    return 0


def cmd_labels(ctx: Context) -> int:
    manifest = ctx.manifest("manifest")
    label_cfg = _labeling(ctx)
    land_zones = tuple(ctx.config.get("land_zones", (0,)))
    if ctx.dry_run:
        manifest.validate()
        print(f"labels: config ok ({len(manifest)} scenes)")
        return 0
    for p in manifest:
        scene = load_scene(p)
        write_label_raster(rasterize_labels(scene, label_cfg, land_zones), scene.scene_id,
                           ctx.out / "labels" / f"{scene.scene_id}.u8", label_cfg)
    print(f"labels: {len(manifest)} rasters in {ctx.out / 'labels'}")
    return 0


def cmd_patches(ctx: Context) -> int:
    manifest = ctx.manifest("manifest")
    sampling = SamplingConfig(**{"mode": "patch", **ctx.config.get("sampling", {})})
    label_cfg, prep = _labeling(ctx), _prep(ctx)
    if ctx.dry_run:
        manifest.validate()
        print(f"patches: config ok (size {sampling.patch_size}, stride {sampling.stride})")
        return 0
    summary = build_patch_dataset(manifest, label_cfg, sampling, ctx.out / "patches.jsonl", prep, ctx.workers)
    print(f"patches: {summary['n_samples']} samples, class counts {summary['class_counts']}")
    return 0


def cmd_partition(ctx: Context) -> int:
    manifest = ctx.manifest("manifest")
    pctx = ctx.partition_context()
    filters = ctx.config.get("filters")
    holdout = ctx.config.get("holdout", {"fraction": 0.1})
    dist = ctx.config.get("distribution")
    if ctx.dry_run:
        manifest.validate()
        print("partition: config ok")
        return 0
    train, val = make_splits(manifest, filters, holdout, ctx.seed(), pctx)
    write_dataset_manifest(train, ctx.out / "train.json")
    write_dataset_manifest(val, ctx.out / "validation.json")
    msg = f"partition: {len(train)} train / {len(val)} validation scenes"
    if dist:
        rows = class_distribution(manifest, _labeling(ctx), dist.get("granularity", "pixel"), dist.get("kind", "all"), pctx,
                                  SamplingConfig(**{"mode": "patch", **ctx.config.get("sampling", {})}), _prep(ctx))
        ctx.dump(rows, "class_distribution.json")
        msg += f"; class distribution over {len(rows)} partition(s)"
    print(msg)
    return 0


def _train_val(ctx: Context, cfg: ex.PipelineConfig, pctx: PartitionContext):
    data = ctx.require("data")
    train = list(ctx.manifest("train", data))
    val = list(ctx.manifest("validation", data)) if "validation" in data else None
    return ex.split_train_val(train, cfg, val, ctx.config.get("filters"), pctx)


def cmd_train(ctx: Context) -> int:
    cfg = ctx.pipeline()
    pctx = ctx.partition_context()
    tr, va = _train_val(ctx, cfg, pctx)
    if ctx.dry_run:
        print(f"train: config ok ({len(tr)} train / {len(va)} validation scenes, {cfg.paradigm} paradigm)")
        return 0
    trained = ex.fit_cell(cfg, tr, va)
    ex.save_trained(trained, ctx.out)
    best = min(r["val_loss"] for r in trained.log)
    print(f"train: {cfg.paradigm} model, {trained.n_train_samples} samples, {len(trained.log)} epochs, "
          f"best val loss {best:.4f} -> {ctx.out / ex.MODEL_FILE}")
    return 0


def _model_dir(ctx: Context, key: str = "model_dir") -> Path:
    return ctx.path(ctx.config[key]) if key in ctx.config else ctx.out


def cmd_evaluate(ctx: Context) -> int:
    trained = ex.load_trained(_model_dir(ctx))
    test = list(ctx.manifest("test", ctx.require("data")))
    if ctx.dry_run:
        print(f"evaluate: config ok ({len(test)} test scenes)")
        return 0
    cell = ex.score_cell(trained, test)
    ctx.dump(cell, "evaluation.json")
    ctx.dump({"metrics": cell["metrics"], "config": cell["config"],
              "provenance": {k: v for k, v in cell["provenance"].items()}}, "metrics.json")
    w = cell["metrics"]["weighted"]
    print("evaluate: " + ", ".join(f"{k} {w[k]:.4f}" for k in ex.METRIC_FIELDS))
    return 0


def _finish_report(ctx: Context, report: dict) -> int:
    ex.emit_report(report, ctx.out)
    cells = report["cells"]
    counts = {s: sum(c.get("status") == s for c in cells) for s in ("ok", "skipped", "error")}
    print(f"{report['experiment']}: {len(cells)} cells ({counts['ok']} ok, {counts['skipped']} skipped, "
          f"{counts['error']} error) -> {ctx.out / 'report.json'}")
    for i, c in enumerate(cells):
        if c.get("status") == "error":
            print(f"  cell {i} error: {c.get('message')}", file=sys.stderr)
    return 1 if ex.any_errors(report) else 0


def _experiment_inputs(ctx: Context):
    cfg = ctx.pipeline()
    pctx = ctx.partition_context()
    data = ctx.require("data")
    train = list(ctx.manifest("train", data))
    test = list(ctx.manifest("test", data))
    val = list(ctx.manifest("validation", data)) if "validation" in data else None
    return cfg, pctx, train, test, val


def cmd_transfer(ctx: Context) -> int:
    cfg, pctx, train, test, _ = _experiment_inputs(ctx)
    t = ctx.require("transfer")
    kind = ctx.require("kind", t)
    pctx.key(kind)
    if ctx.dry_run:
        print(f"transfer: config ok ({kind} partitions)")
        return 0
    report = ex.run_transferability(cfg, train, test, kind, pctx, t.get("train_keys"), t.get("test_keys"),
                                    tuple(t.get("composite_rows", ("All", "Baseline"))))
    report["name"] = ctx.config.get("name", "transfer")
    return _finish_report(ctx, report)


def cmd_sweep(ctx: Context) -> int:
    cfg, pctx, train, test, val = _experiment_inputs(ctx)
    s = ctx.require("sweep")
    axis, values = ctx.require("axis", s), ctx.require("values", s)
    if axis not in ex.SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {ex.SWEEP_AXES}, got {axis!r}")
    if ctx.dry_run:
        print(f"sweep: config ok ({axis} over {values})")
        return 0
    report = ex.run_sweep(axis, values, cfg, train, test, val, pctx)
    report["name"] = ctx.config.get("name", "sweep")
    return _finish_report(ctx, report)


def cmd_ablate_prep(ctx: Context) -> int:
    cfg, pctx, train, test, val = _experiment_inputs(ctx)
    rows = ctx.config.get("ablation", {}).get("rows", ex.DEFAULT_ABLATION_ROWS)
    for r in rows:
        ex.ablation_config(cfg, r)
    if ctx.dry_run:
        print(f"ablate-prep: config ok ({len(rows)} rows)")
        return 0
    report = ex.run_preparation_ablation(cfg, train, test, rows, val, pctx)
    report["name"] = ctx.config.get("name", "ablate-prep")
    return _finish_report(ctx, report)


def _test_stacks(ctx: Context, trained: ex.TrainedModel):
    test = list(ctx.manifest("test", ctx.require("data")))
    return ex.build_stacks(test, trained.config, trained.stats, ex.SceneCache())


def cmd_fair_compare(ctx: Context) -> int:
    patch = ex.load_trained(ctx.path(ctx.require("patch_model")))
    pixel = ex.load_trained(ctx.path(ctx.require("pixel_model")))
    if patch.model.kind != "patch" or pixel.model.kind != "pixel":
        raise ConfigError("patch_model must hold a patch model and pixel_model a pixel model")
    if patch.config.stage_hashes()["prepare"] != pixel.config.stage_hashes()["prepare"]:
        raise ConfigError("patch and pixel models were prepared with different settings")
    if patch.stats.normalization_id != pixel.stats.normalization_id:
        raise ConfigError("patch and pixel models use different normalization stats")
    fc = ctx.config.get("fair_compare", {})
    size = int(fc.get("patch_size", patch.config.sampling.patch_size))
    tiling = fc.get("tiling", "clamped")
    if ctx.dry_run:
        print(f"fair-compare: config ok (patch size {size}, {tiling} tiling)")
        return 0
    result = ex.fair_compare(patch.model, pixel.model, _test_stacks(ctx, patch), size, tiling)
    ctx.dump(result, "fair_compare.json")
    print(f"fair-compare: patch-mapped F1 {result['patch']['weighted']['f1']:.4f}, "
          f"pixel F1 {result['pixel']['weighted']['f1']:.4f}")
    return 0


def cmd_feature_ablation(ctx: Context) -> int:
    trained = ex.load_trained(_model_dir(ctx))
    baseline = ctx.config.get("baseline", "channel_mean")
    if baseline not in ("channel_mean", "zero"):
        raise ConfigError(f"baseline must be 'channel_mean' or 'zero', got {baseline!r}")
    if ctx.dry_run:
        print("feature-ablation: config ok")
        return 0
    stacks = _test_stacks(ctx, trained)
    if trained.config.paradigm == "patch":
        _, windows, targets = ex.patch_samples(stacks, trained.config, training=False)
    else:
        windows, targets = [s.features for s in stacks], [s.labels for s in stacks]
    result = ex.feature_ablation(trained.model, windows, targets, baseline)
    ctx.dump(result, "feature_ablation.json")
    top = max(result["overall"], key=result["overall"].get)
    print(f"feature-ablation: full F1 {result['score_full']:.4f}; largest drop {top} ({result['overall'][top]:.4f})")
    return 0


def cmd_report(ctx: Context) -> int:
    sources = ctx.require("reports")
    loaded = []
    for src in sources:
        with open(ctx.path(src), encoding="utf-8") as fh:
            rep = json.load(fh)
        if "cells" not in rep and "metrics" in rep:
            # a single evaluation becomes a one-cell report
            rep = {"experiment": "evaluate", "name": Path(src).stem, "cells": [rep]}
        loaded.append(rep)
    if ctx.dry_run:
        print(f"report: config ok ({len(loaded)} reports)")
        return 0
    if len(loaded) == 1:
        report = loaded[0]
    else:
        cells = [c | {"source": r.get("name", r.get("experiment"))} for r in loaded for c in r.get("cells", [])]
        report = {"experiment": "combined", "name": ctx.config.get("name", "combined"), "cells": cells,
                  "sources": [r.get("name", r.get("experiment")) for r in loaded]}
    return _finish_report(ctx, report)


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic scene containers"),
    "prepare": (cmd_prepare, "downscale scenes and fit normalization stats"),
    "labels": (cmd_labels, "rasterize chart labels"),
    "patches": (cmd_patches, "extract single-label patch records"),
    "partition": (cmd_partition, "filter and split a manifest; class distributions"),
    "train": (cmd_train, "train a reference model"),
    "evaluate": (cmd_evaluate, "score a trained model on a test manifest"),
    "transfer": (cmd_transfer, "train-partition x test-partition matrix"),
    "sweep": (cmd_sweep, "vary one pipeline setting"),
    "ablate-prep": (cmd_ablate_prep, "data preparation ablation table"),
    "fair-compare": (cmd_fair_compare, "patch vs pixel model at pixel granularity"),
    "feature-ablation": (cmd_feature_ablation, "per-channel attribution"),
    "report": (cmd_report, "re-emit or merge experiment reports"),
}


GLOBAL_DEFAULTS = {"config": None, "seed": None, "workers": 1, "out": None, "log_level": "WARNING", "dry_run": False}


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; only the top
    # level carries defaults so a flag given first is not reset by the subparser
    p = argparse.ArgumentParser(add_help=False, argument_default=None if defaults else argparse.SUPPRESS)
    p.add_argument("--config", help="JSON config for the subcommand")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="parallel workers (default 1)")
    p.add_argument("--out", help="output directory (default $ICEBENCH_OUT or ./icebench_out)")
    p.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--dry-run", action="store_true", help="validate configs without writing outputs")
    if defaults:
        p.set_defaults(**GLOBAL_DEFAULTS)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icebench", description="Sea-ice classification benchmark harness",
                                     parents=[_global_options(True)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, help=help_text, parents=[_global_options(False)])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        ctx = Context(args)
        return COMMANDS[args.command][0](ctx)
    except CONFIG_ERRORS as exc:
        print(f"icebench {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except IceBenchError as exc:
        print(f"icebench {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
