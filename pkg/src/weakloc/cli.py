"""Command-line front end: gen, train, eval, export-overlays, compare.

Every command is a thin shell over the library. Option precedence is
explicit flags, then a JSON config file (--config), then built-in
defaults; the WEAKLOC_SEED environment variable overrides the seed from
any source. The effective configuration is printed before any side
effect.

Exit codes: 0 ok, 2 usage/configuration, 3 missing or malformed
artifacts, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as datamod
from .errors import ArtifactError, ConfigError, LabelError, NumericsError, ShapeError, UsageError
from .metrics import MetricsReport, heatmap_to_bbox, render_comparison_table
from .models import SCHEMES, load_checkpoint
from .overlays import render_overlay, write_ppm
from .tensor import Tensor, softmax
from .training import RunConfig, evaluate, train
from .warp import BBoxParams, WarpKind, WarpParams, params_to_bbox

_USAGE_EXIT = 2
_ARTIFACT_EXIT = 3
_NUMERIC_EXIT = 4


def _merge_config(args: argparse.Namespace, keys: list[str]) -> dict:
    """flags > config file > defaults; None-valued flags mean 'not given'."""
    merged = {}
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"cannot read config file {args.config}: {exc}") from exc
    for key in keys:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
        elif key in file_cfg:
            merged[key] = file_cfg[key]
    env_seed = os.environ.get("WEAKLOC_SEED")
    if env_seed is not None and "seed" in keys:
        merged["seed"] = int(env_seed)
    return merged


def _print_effective(command: str, cfg: dict) -> None:
    print(f"[weakloc {command}] effective config: " + json.dumps(cfg, sort_keys=True))


def _cmd_gen(args) -> int:
    cfg = _merge_config(args, ["total", "profile", "classes", "seed", "image_size", "out"])
    cfg.setdefault("total", 1347)
    cfg.setdefault("profile", "paper")
    cfg.setdefault("classes", 3)
    cfg.setdefault("seed", 0)
    cfg.setdefault("image_size", 64)
    _print_effective("gen", cfg)
    if cfg["profile"] == "paper":
        counts = datamod.paper_profile(cfg["total"], cfg["classes"])
    elif cfg["profile"] == "balanced":
        counts = datamod.balanced_profile(cfg["total"], cfg["classes"])
    else:
        raise ConfigError(f"unknown profile {cfg['profile']!r}; expected paper or balanced")
    gen_cfg = datamod.GenConfig(class_counts=counts, master_seed=cfg["seed"], image_size=cfg["image_size"])
    dataset = datamod.generate(gen_cfg)
    dataset.save(cfg["out"])
    print(f"wrote {len(dataset.samples)} samples to {cfg['out']}")
    print("class counts:")
    for label in datamod.LABELS6:
        if label in counts:
            print(f"  {label:>2}: {counts[label]}")
    level3 = dataset.counts(3) if "N" in counts else None
    if level3:
        print("  family totals: " + ", ".join(f"{k}={v}" for k, v in sorted(level3.items())))
    return 0


def _cmd_train(args) -> int:
    keys = ["data", "out", "scheme", "classes", "epochs", "batch_size", "seed", "imbalance",
            "alpha", "flip_epoch", "lr", "lr_decay", "lr_decay_period", "pooling", "lse_sharpness"]
    cfg = _merge_config(args, keys)
    for required in ("data", "out", "scheme"):
        if required not in cfg:
            raise UsageError(f"train: --{required.replace('_', '-')} is required")
    run_kwargs = {k: v for k, v in cfg.items() if k not in ("data", "out")}
    run = RunConfig(**run_kwargs)
    _print_effective("train", {**cfg, **run.to_json_dict()})
    dataset = datamod.Dataset.load(cfg["data"])
    result = train(run, dataset, out_dir=cfg["out"])
    print(f"best epoch {result.best_epoch} with validation loss {result.best_val_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _merge_config(args, ["checkpoint", "data", "out", "ubm_checkpoint", "loc_only", "name"])
    for required in ("checkpoint", "data"):
        if required not in cfg:
            raise UsageError(f"eval: --{required.replace('_', '-')} is required")
    _print_effective("eval", cfg)
    model, meta = load_checkpoint(cfg["checkpoint"])
    classes = int(meta.get("run", {}).get("classes", model.config.num_classes))
    dataset = datamod.Dataset.load(cfg["data"])
    ubm_model = None
    if cfg.get("ubm_checkpoint"):
        ubm_model, _ = load_checkpoint(cfg["ubm_checkpoint"])
    report = evaluate(model, dataset, classes, ubm_model=ubm_model,
                      loc_only=bool(cfg.get("loc_only")), name=cfg.get("name", model.scheme))
    extra = [MetricsReport.from_json_dict(_read_json(p)) for p in (args.compare or [])]
    print(render_comparison_table([report] + extra))
    if cfg.get("out"):
        os.makedirs(cfg["out"], exist_ok=True)
        report.save_json(os.path.join(cfg["out"], "report.json"))
        with open(os.path.join(cfg["out"], "report.txt"), "w") as fh:
            fh.write(render_comparison_table([report] + extra) + "\n")
        print(f"wrote report to {cfg['out']}")
    return 0


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read report {path}: {exc}") from exc


def _cmd_compare(args) -> int:
    reports = [MetricsReport.from_json_dict(_read_json(p)) for p in args.reports]
    print(render_comparison_table(reports))
    return 0


def _cmd_export_overlays(args) -> int:
    cfg = _merge_config(args, ["checkpoint", "data", "out", "ubm_checkpoint"])
    for required in ("checkpoint", "data", "out"):
        if required not in cfg:
            raise UsageError(f"export-overlays: --{required.replace('_', '-')} is required")
    _print_effective("export-overlays", cfg)
    model, meta = load_checkpoint(cfg["checkpoint"])
    classes = int(meta.get("run", {}).get("classes", model.config.num_classes))
    if model.scheme in ("lbm", "ubm"):
        raise UsageError(
            f"scheme {model.scheme!r} produces neither boxes nor heatmaps; nothing to overlay"
        )
    dataset = datamod.Dataset.load(cfg["data"])
    records = [r for r in datamod.scenario_records(dataset, classes, "test") if r.label6 != "N"]
    os.makedirs(cfg["out"], exist_ok=True)
    size = model.config.image_size
    written = 0
    for rec in records:
        image = rec.image
        heat = None
        if model.scheme == "stl":
            xb = Tensor(datamod.stack_images([rec], resize_to=model.config.stl_size))
            logits, _, maps = model.forward(xb)
            c = int(np.argmax(softmax(logits).data[0]))
            heat = maps.data[0, c]
            box, _ = heatmap_to_bbox(heat, size, size)
        elif model.scheme == "globalpool":
            logits, maps = model.forward(Tensor(image[None]))
            c = int(np.argmax(softmax(logits).data[0]))
            heat = maps.data[0, c]
            box, _ = heatmap_to_bbox(heat, size, size)
        elif model.scheme == "suploc":
            row = model.forward(Tensor(image[None])).data[0]
            box = _clip_box(*map(float, row))
        else:  # astn / affstn
            _, params = model.forward(Tensor(image[None]))
            kind = WarpKind.SIMILARITY if model.scheme == "astn" else WarpKind.AFFINE
            try:
                box = params_to_bbox(WarpParams(kind, params.data[0]))
                box = _clip_box(box.t_r, box.t_c, box.s)
            except Exception:
                box = BBoxParams(0.0, 0.0, 1.0)
        rgb = render_overlay(image, truth_box=rec.roi, predicted_box=box, heatmap=heat)
        path = os.path.join(cfg["out"], f"overlay_{rec.index:06d}.ppm")
        write_ppm(path, rgb)
        written += 1
    print(f"wrote {written} overlays to {cfg['out']}")
    return 0


def _clip_box(t_r: float, t_c: float, s: float) -> BBoxParams:
    if not all(np.isfinite([t_r, t_c, s])) or s < 0 or abs(t_r) - s > 1 or abs(t_c) - s > 1:
        return BBoxParams(0.0, 0.0, 1.0)
    return BBoxParams(t_r, t_c, s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakloc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--total", type=int)
    p.add_argument("--profile", choices=["paper", "balanced"])
    p.add_argument("--classes", type=int, choices=[2, 3, 6])
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train one scheme on a generated dataset")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--scheme", choices=list(SCHEMES))
    p.add_argument("--classes", type=int, choices=[2, 3, 6])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--imbalance", choices=["wce", "augment", "none"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--flip-epoch", dest="flip_epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--lr-decay-period", dest="lr_decay_period", type=int)
    p.add_argument("--pooling", choices=["avg", "max", "lse"])
    p.add_argument("--lse-sharpness", dest="lse_sharpness", type=float)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--ubm-checkpoint", dest="ubm_checkpoint")
    p.add_argument("--loc-only", dest="loc_only", action="store_const", const=True)
    p.add_argument("--name")
    p.add_argument("--compare", nargs="*", metavar="REPORT_JSON")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-overlays", help="write PPM overlays for fractured test samples")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--ubm-checkpoint", dest="ubm_checkpoint")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_export_overlays)

    p = sub.add_parser("compare", help="merge report JSON files into one table")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LabelError, ShapeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return _ARTIFACT_EXIT
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
