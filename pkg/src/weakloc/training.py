"""Training loop and evaluation protocol for every scheme.

SGD with classic momentum, a stepped learning-rate schedule per scheme,
and model selection at the minimum validation loss. The warped-attention
schemes use a reduced learning rate on their localizer parameters instead
of constraining the warp values.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datamod
from .errors import ConfigError, NumericsError, UsageError
from .losses import AlphaSchedule, ClassWeights, class_weights, stl_total_loss, sup_loc_loss, wce_loss
from .metrics import MetricsReport, f1_report, heatmap_to_bbox, iou, map_score
from .models import (
    ModelConfig,
    SCHEMES,
    SchemeModel,
    ScoreMaps,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tape, Tensor, backward, softmax
from .warp import BBoxParams, WarpKind, WarpParams, crop_boxes, params_to_bbox


@dataclass(frozen=True)
class Schedule:
    """Stepped learning rate: base_lr * decay_factor ** (elapsed periods)."""

    base_lr: float
    decay_factor: float = 1.0
    decay_period: int | None = None

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.base_lr}")
        if not (self.decay_factor > 0):
            raise ConfigError(f"decay factor must be positive, got {self.decay_factor}")
        if self.decay_period is not None and self.decay_period < 1:
            raise ConfigError(f"decay period must be >= 1, got {self.decay_period}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.decay_period is None:
            return self.base_lr
        return self.base_lr * self.decay_factor ** ((epoch - 1) // self.decay_period)


DEFAULT_SCHEDULES = {
    "lbm": Schedule(1e-2, 0.5, 10),
    "ubm": Schedule(1e-2, 0.5, 10),
    "astn": Schedule(1e-2, 0.5, 10),
    "affstn": Schedule(1e-2, 0.5, 10),
    "suploc": Schedule(1e-2, 0.5, 10),
    "stl": Schedule(1e-2, 0.1, 15),
    "globalpool": Schedule(1e-3),
}


class SgdMomentum:
    """Classic momentum: v <- mu v + g, p <- p - lr v, per parameter group."""

    def __init__(self, groups: list[tuple[str, list[Tensor], float]], momentum: float = 0.9):
        self.groups = groups
        self.momentum = float(momentum)
        self.velocities = [[np.zeros_like(p.data) for p in params] for _, params, _ in groups]

    def zero_grads(self) -> None:
        for _, params, _ in self.groups:
            for p in params:
                p.grad = None

    def step(self, base_lr: float) -> None:
        for (name, params, lr_scale), vels in zip(self.groups, self.velocities):
            lr = base_lr * lr_scale
            for p, v in zip(params, vels):
                if p.grad is not None:
                    if p.grad.shape != p.data.shape:
                        raise UsageError(
                            f"gradient shape {p.grad.shape} does not match parameter {p.data.shape} in group {name}"
                        )
                    g = p.grad
                else:
                    g = 0.0
                v *= self.momentum
                v += g
                p.data = p.data - lr * v


@dataclass(frozen=True)
class RunConfig:
    """One training run: scheme, scenario and optimization settings."""

    scheme: str
    classes: int = 3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    imbalance: str = "wce"  # "wce" | "augment" | "none"
    alpha: float = 0.6
    flip_epoch: int | None = 15
    lr: float | None = None
    lr_decay: float | None = None
    lr_decay_period: int | None = None
    pooling: str = "avg"
    lse_sharpness: float = 10.0
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.classes not in (2, 3, 6):
            raise ConfigError(f"scenario must have 2, 3 or 6 classes, got {self.classes}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if self.imbalance not in ("wce", "augment", "none"):
            raise ConfigError(f"imbalance handling must be wce, augment or none, got {self.imbalance!r}")
        AlphaSchedule(self.alpha, self.flip_epoch)  # validates the range

    def schedule(self) -> Schedule:
        default = DEFAULT_SCHEDULES[self.scheme]
        return Schedule(
            self.lr if self.lr is not None else default.base_lr,
            self.lr_decay if self.lr_decay is not None else default.decay_factor,
            self.lr_decay_period if self.lr_decay_period is not None else default.decay_period,
        )

    def model_config(self, image_size: int) -> ModelConfig:
        if self.model is not None:
            return self.model
        return ModelConfig(
            num_classes=self.classes,
            image_size=image_size,
            stl_size=(image_size * 3) // 2,
            roi_size=image_size // 2,
            pooling=self.pooling,
            lse_sharpness=self.lse_sharpness,
        )

    def to_json_dict(self) -> dict:
        d = {
            "scheme": self.scheme,
            "classes": self.classes,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "imbalance": self.imbalance,
            "alpha": self.alpha,
            "flip_epoch": self.flip_epoch,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "lr_decay_period": self.lr_decay_period,
            "pooling": self.pooling,
            "lse_sharpness": self.lse_sharpness,
        }
        return d


@dataclass
class TrainResult:
    model: SchemeModel
    config: RunConfig
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)
    checkpoint_dir: str | None = None
    csv_path: str | None = None


def _prepare_inputs(records, scheme: str, mcfg: ModelConfig) -> np.ndarray:
    if scheme == "ubm":
        images = datamod.stack_images(records)
        return crop_boxes(images, [r.roi for r in records], mcfg.roi_size)
    if scheme == "stl":
        return datamod.stack_images(records, resize_to=mcfg.stl_size)
    return datamod.stack_images(records)


def _batch_loss(model, config: RunConfig, alpha_schedule: AlphaSchedule, epoch: int,
                xb: Tensor, yb: np.ndarray, boxes: np.ndarray | None,
                weights: ClassWeights | None):
    """Forward one batch and build its loss; returns (total, class_part, aux_part)."""
    scheme = config.scheme
    if scheme in ("lbm", "ubm"):
        loss = wce_loss(model.probs(xb), yb, weights)
        return loss, loss, None
    if scheme == "globalpool":
        logits, _ = model.forward(xb, with_maps=False)
        loss = wce_loss(softmax(logits), yb, weights)
        return loss, loss, None
    if scheme in ("astn", "affstn"):
        logits, _ = model.forward(xb)
        loss = wce_loss(softmax(logits), yb, weights)
        return loss, loss, None
    if scheme == "stl":
        logits, pooled, _ = model.forward(xb)
        class_part = wce_loss(softmax(logits), yb, weights)
        aux_part = wce_loss(softmax(pooled), yb, None)
        total = stl_total_loss(class_part, aux_part, alpha_schedule, epoch)
        return total, class_part, aux_part
    if scheme == "suploc":
        pred = model.forward(xb)
        loss = sup_loc_loss(boxes, pred)
        return loss, loss, None
    raise ConfigError(f"unknown scheme {scheme!r}")


def train(config: RunConfig, dataset: datamod.Dataset, out_dir: str | None = None) -> TrainResult:
    """Run the full optimization loop and keep the weights with minimal validation loss.

    Writes (when ``out_dir`` is given) a checkpoint directory, a per-epoch
    loss CSV and a run summary JSON. Raises :class:`NumericsError` on a
    non-finite loss instead of silently skipping it.
    """
    for split in ("train", "val", "test"):
        if not dataset.records(split):
            raise ConfigError(f"dataset has no {split!r} split")

    work = dataset
    if config.imbalance == "augment":
        work = datamod.balance_by_augmentation(dataset, config.classes)

    train_recs = datamod.scenario_records(work, config.classes, "train")
    val_recs = datamod.scenario_records(dataset, config.classes, "val")
    if not train_recs or not val_recs:
        raise ConfigError(f"scenario with {config.classes} classes has empty train or val split")

    class_names = datamod.scenario_classes(config.classes)
    weights = None
    if config.imbalance == "wce" and config.scheme != "suploc":
        counts = work.counts(config.classes, "train")
        weights = class_weights([counts[c] for c in class_names])

    mcfg = config.model_config(dataset.config.image_size)
    model = build_model(config.scheme, mcfg, seed=config.seed)
    alpha_schedule = AlphaSchedule(config.alpha, config.flip_epoch)
    schedule = config.schedule()

    x_train = _prepare_inputs(train_recs, config.scheme, mcfg)
    y_train = datamod.one_hot_labels(train_recs, config.classes)
    b_train = datamod.roi_targets(train_recs)
    x_val = _prepare_inputs(val_recs, config.scheme, mcfg)
    y_val = datamod.one_hot_labels(val_recs, config.classes)
    b_val = datamod.roi_targets(val_recs)

    groups = [(name, [model.named_params()[n] for n in names], scale)
              for name, names, scale in model.param_groups()]
    optimizer = SgdMomentum(groups, momentum=0.9)
    shuffle_rng = np.random.default_rng([config.seed, 0x7EA1])

    n = len(train_recs)
    best_val = math.inf
    best_epoch = 0
    best_state = model.state_dict()
    history: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        lr = schedule.lr_at(epoch)
        alpha_eff = alpha_schedule.value_at(epoch) if config.scheme == "stl" else 0.0
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(x_train[idx])
            yb = y_train[idx]
            bb = b_train[idx]
            with Tape() as tape:
                total, class_part, aux_part = _batch_loss(
                    model, config, alpha_schedule, epoch, xb, yb, bb, weights
                )
                value = total.item()
                if not math.isfinite(value):
                    raise NumericsError(
                        f"non-finite loss {value} at epoch {epoch}, batch {batches} "
                        f"(scheme {config.scheme}, lr {lr})"
                    )
                optimizer.zero_grads()
                backward(total, tape)
            optimizer.step(lr)
            sums += [value, class_part.item(), aux_part.item() if aux_part is not None else 0.0]
            batches += 1
        train_total, train_class, train_aux = (sums / batches).tolist()

        val_total, val_class, val_aux = _split_loss(
            model, config, alpha_schedule, epoch, x_val, y_val, b_val, weights
        )
        if not math.isfinite(val_total):
            raise NumericsError(f"non-finite validation loss at epoch {epoch}")
        history.append({
            "epoch": epoch, "split": "train", "loss_class": train_class,
            "loss_uloc": train_aux, "loss_total": train_total, "alpha_eff": alpha_eff,
        })
        history.append({
            "epoch": epoch, "split": "val", "loss_class": val_class,
            "loss_uloc": val_aux, "loss_total": val_total, "alpha_eff": alpha_eff,
        })
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_state = model.state_dict()

    model.load_state(best_state)
    result = TrainResult(model, config, best_epoch, best_val, history)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoint")
        meta = {
            "run": config.to_json_dict(),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "class_names": class_names if config.scheme != "suploc" else [],
        }
        save_checkpoint(ckpt_dir, model, meta)
        csv_path = os.path.join(out_dir, "losses.csv")
        _write_loss_csv(csv_path, history)
        with open(os.path.join(out_dir, "run.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        result.checkpoint_dir = ckpt_dir
        result.csv_path = csv_path
    return result


def _write_loss_csv(path: str, history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,split,loss_class,loss_uloc,loss_total,alpha_eff\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['split']},{row['loss_class']!r},"
                f"{row['loss_uloc']!r},{row['loss_total']!r},{row['alpha_eff']!r}\n"
            )


def _split_loss(model, config, alpha_schedule, epoch, x, y, boxes, weights,
                batch_size: int = 128) -> tuple[float, float, float]:
    totals = np.zeros(3)
    count = 0
    for start in range(0, len(x), batch_size):
        xb = Tensor(x[start : start + batch_size])
        yb = y[start : start + batch_size]
        bb = boxes[start : start + batch_size]
        total, class_part, aux_part = _batch_loss(model, config, alpha_schedule, epoch, xb, yb, bb, weights)
        m = len(yb)
        totals += [total.item() * m, class_part.item() * m,
                   (aux_part.item() if aux_part is not None else 0.0) * m]
        count += m
    return tuple((totals / count).tolist())


# ---------------------------------------------------------------------------
# evaluation


def _safe_box(t_r: float, t_c: float, s: float) -> tuple[BBoxParams, bool]:
    """Clamp a predicted triple into a usable box; fall back to the full image."""
    if not all(map(math.isfinite, (t_r, t_c, s))) or s < 0:
        return BBoxParams(0.0, 0.0, 1.0), True
    if abs(t_r) - s > 1.0 or abs(t_c) - s > 1.0:
        return BBoxParams(0.0, 0.0, 1.0), True
    return BBoxParams(t_r, t_c, s), False


def evaluate(model: SchemeModel, dataset: datamod.Dataset, classes: int,
             ubm_model: SchemeModel | None = None, loc_only: bool = False,
             name: str = "", batch_size: int = 64) -> MetricsReport:
    """Apply the evaluation protocol of one trained scheme to the test split.

    Classification metrics cover every test sample of the scenario;
    localization metrics (IoU-based AP over the fixed thresholds) cover
    only the fractured test samples. The box-regression scheme classifies
    through a companion ROI classifier when one is supplied.
    """
    records = datamod.scenario_records(dataset, classes, "test")
    if not records:
        raise UsageError("evaluate: empty test split for this scenario")
    class_names = datamod.scenario_classes(classes)
    mcfg = model.config
    scheme = model.scheme

    images = datamod.stack_images(records)
    pred_labels: list[str] = []
    boxes: list[BBoxParams | None] = []
    degenerate = 0

    for start in range(0, len(records), batch_size):
        recs = records[start : start + batch_size]
        batch_native = images[start : start + batch_size]
        if scheme == "ubm":
            xb = Tensor(crop_boxes(batch_native, [r.roi for r in recs], mcfg.roi_size))
            probs = model.probs(xb).data
            batch_boxes: list[BBoxParams | None] = [None] * len(recs)
        elif scheme == "lbm":
            probs = model.probs(Tensor(batch_native)).data
            batch_boxes = [None] * len(recs)
        elif scheme == "suploc":
            triples = model.forward(Tensor(batch_native)).data
            batch_boxes = []
            for row in triples:
                box, bad = _safe_box(*map(float, row))
                degenerate += bad
                batch_boxes.append(box)
            if ubm_model is not None:
                crops = crop_boxes(batch_native, batch_boxes, ubm_model.config.roi_size)
                probs = ubm_model.probs(Tensor(crops)).data
            else:
                probs = None
        elif scheme in ("astn", "affstn"):
            logits, params = model.forward(Tensor(batch_native))
            probs = softmax(logits).data
            kind = WarpKind.SIMILARITY if scheme == "astn" else WarpKind.AFFINE
            batch_boxes = []
            for row in params.data:
                try:
                    box = params_to_bbox(WarpParams(kind, np.asarray(row)))
                    box, bad = _safe_box(box.t_r, box.t_c, box.s)
                except Exception:
                    box, bad = BBoxParams(0.0, 0.0, 1.0), True
                degenerate += bad
                batch_boxes.append(box)
        elif scheme == "stl":
            xb = Tensor(datamod.stack_images(recs, resize_to=mcfg.stl_size))
            logits, _, maps = model.forward(xb)
            probs = softmax(logits).data
            batch_boxes = []
            for i in range(len(recs)):
                c = int(np.argmax(probs[i]))
                box, flag = heatmap_to_bbox(maps.data[i, c], mcfg.image_size, mcfg.image_size)
                degenerate += flag
                batch_boxes.append(box)
        elif scheme == "globalpool":
            logits, maps = model.forward(Tensor(batch_native))
            probs = softmax(logits).data
            batch_boxes = []
            for i in range(len(recs)):
                c = int(np.argmax(probs[i]))
                box, flag = heatmap_to_bbox(maps.data[i, c], mcfg.image_size, mcfg.image_size)
                degenerate += flag
                batch_boxes.append(box)
        else:
            raise ConfigError(f"evaluate: unsupported scheme {scheme!r}")

        if probs is not None:
            pred_labels.extend(class_names[int(np.argmax(p))] for p in probs)
        boxes.extend(batch_boxes)

    report = MetricsReport(name=name or scheme, n_samples=len(records))
    if pred_labels and not loc_only:
        truth = [datamod.scenario_label(r.label6, classes) for r in records]
        cls_report = f1_report(truth, pred_labels, labels=class_names, name=name or scheme)
        report.class_names = cls_report.class_names
        report.support = cls_report.support
        report.precision = cls_report.precision
        report.recall = cls_report.recall
        report.f1 = cls_report.f1
        report.weighted_f1 = cls_report.weighted_f1
        report.confusion = cls_report.confusion

    fractured = [(r, b) for r, b in zip(records, boxes) if r.label6 != "N" and b is not None]
    if fractured:
        ious = [iou(r.roi, b) for r, b in fractured]
        ap, mean_ap = map_score(ious)
        report.ap_per_threshold = ap
        report.map_value = mean_ap
        report.ious = ious
        report.degenerate_heatmaps = degenerate
    return report


def evaluate_checkpoint(checkpoint_dir: str, dataset: datamod.Dataset,
                        ubm_checkpoint_dir: str | None = None, loc_only: bool = False,
                        name: str = "") -> MetricsReport:
    model, meta = load_checkpoint(checkpoint_dir)
    classes = meta.get("run", {}).get("classes")
    if classes is None:
        classes = model.config.num_classes if model.config.num_classes in (2, 3, 6) else 3
    ubm_model = None
    if ubm_checkpoint_dir is not None:
        ubm_model, _ = load_checkpoint(ubm_checkpoint_dir)
    return evaluate(model, dataset, int(classes), ubm_model=ubm_model,
                    loc_only=loc_only, name=name or model.scheme)


def score_maps_for(model: SchemeModel, images: np.ndarray) -> list[ScoreMaps]:
    """Per-sample score maps of a heatmap-producing scheme."""
    if model.scheme == "stl":
        xb = Tensor(np.stack([
            datamod.resize_bilinear(im, model.config.stl_size, model.config.stl_size) for im in images
        ]) if images.shape[-1] != model.config.stl_size else images)
        _, _, maps = model.forward(xb)
        return [ScoreMaps.from_chw(m, "stl-branch") for m in maps.data]
    if model.scheme == "globalpool":
        _, maps = model.forward(Tensor(images))
        return [ScoreMaps.from_chw(m, "pooling-head") for m in maps.data]
    raise UsageError(f"scheme {model.scheme!r} does not produce score maps")
