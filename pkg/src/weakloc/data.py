"""Procedural dataset of images whose class is decided only inside a small ROI.

Each image holds a smooth background texture, a handful of distractor
strokes, and one bright disk placed uniformly at random. Inside the disk a
glyph encodes the label: subtypes A1/A2/A3 draw 1/2/3 straight dark
strokes, B1/B2/B3 draw 1/2/3 curved ones, and class N leaves the disk
intact. The ground-truth ROI is the disk's bounding square, so masking the
ROI removes every label-bearing pixel by construction.

Labels form a three-level hierarchy: the 7-way label (N plus six
subtypes) projects onto {A, B, N} and onto {fracture, normal}.

All randomness is drawn from per-sample streams seeded by (master_seed,
index) before any label-dependent branch, which is what makes the bundled
inverse decoder possible: it re-renders the six candidate glyphs with the
sample's own geometry and picks the best match.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArtifactError, ConfigError, LabelError
from .tensor import Tensor, load_tensor, save_tensor
from .warp import BBoxParams, WarpKind, affine_grid, bbox_to_pixels, grid_sample, resize_bilinear

LABELS6 = ("N", "A1", "A2", "A3", "B1", "B2", "B3")
FRACTURE_SUBTYPES = ("A1", "A2", "A3", "B1", "B2", "B3")
SPLITS = ("train", "val", "test")

# per-class counts at the reference total of 1347; A/B family totals are 327/453
BASE_PROFILE = {"N": 567, "A1": 187, "A2": 125, "A3": 15, "B1": 120, "B2": 241, "B3": 92}

_DISK_VALUE = 0.82
_GLYPH_VALUE = 0.06
_STROKE_WIDTH = 1.8
_CURVE_POINTS = 96


def label3(label6: str) -> str:
    """Project a 7-way label onto {A, B, N}."""
    if label6 == "N":
        return "N"
    if label6 not in FRACTURE_SUBTYPES:
        raise LabelError(f"unknown label {label6!r}")
    return label6[0]


def label2(label6: str) -> str:
    """Project a 7-way label onto {fracture, normal}."""
    return "normal" if label3(label6) == "N" else "fracture"


def scenario_classes(classes: int) -> list[str]:
    if classes == 2:
        return ["fracture", "normal"]
    if classes == 3:
        return ["A", "B", "N"]
    if classes == 6:
        return list(FRACTURE_SUBTYPES)
    raise ConfigError(f"scenario must have 2, 3 or 6 classes, got {classes}")


def scenario_label(label6: str, classes: int) -> str:
    if classes == 2:
        return label2(label6)
    if classes == 3:
        return label3(label6)
    if classes == 6:
        if label6 == "N":
            raise LabelError("the 6-class scenario only covers fractured samples")
        return label6
    raise ConfigError(f"scenario must have 2, 3 or 6 classes, got {classes}")


def _largest_remainder(targets: list[float], total: int) -> list[int]:
    floors = [int(math.floor(t)) for t in targets]
    leftover = total - sum(floors)
    order = sorted(range(len(targets)), key=lambda i: (-(targets[i] - floors[i]), i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def paper_profile(total: int = 1347, classes: int = 3) -> dict[str, int]:
    """The reference imbalance profile, rescaled to a given total.

    ``classes=6`` restricts the profile to the fracture subtypes; 2 and 3
    keep the full label set including normals.
    """
    labels = list(FRACTURE_SUBTYPES) if classes == 6 else list(LABELS6)
    base_total = sum(BASE_PROFILE[l] for l in labels)
    targets = [total * BASE_PROFILE[l] / base_total for l in labels]
    return dict(zip(labels, _largest_remainder(targets, total)))


def balanced_profile(total: int, classes: int = 3) -> dict[str, int]:
    labels = list(FRACTURE_SUBTYPES) if classes == 6 else list(LABELS6)
    targets = [total / len(labels)] * len(labels)
    return dict(zip(labels, _largest_remainder(targets, total)))


@dataclass(frozen=True)
class GenConfig:
    """Everything the generator needs; hashes into the manifest."""

    class_counts: dict[str, int]
    master_seed: int = 0
    image_size: int = 64
    disk_radius: tuple[float, float] = (9.0, 13.0)
    distractor_range: tuple[int, int] = (4, 9)
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        for label, count in self.class_counts.items():
            if label not in LABELS6:
                raise ConfigError(f"unknown class {label!r} in profile")
            if count < 5:
                raise ConfigError(f"class {label} needs at least 5 samples, got {count}")
        if self.image_size < 32:
            raise ConfigError(f"image size must be at least 32, got {self.image_size}")
        if 2.0 * (self.disk_radius[1] + 2.0) >= self.image_size:
            raise ConfigError("disk radius range does not fit inside the image")

    @property
    def total(self) -> int:
        return sum(self.class_counts.values())

    def to_json_dict(self) -> dict:
        d = {
            "class_counts": dict(self.class_counts),
            "master_seed": self.master_seed,
            "image_size": self.image_size,
            "disk_radius": list(self.disk_radius),
            "distractor_range": list(self.distractor_range),
            "split_ratios": list(self.split_ratios),
        }
        d["hash"] = hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()
        return d

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GenConfig":
        return cls(
            class_counts={k: int(v) for k, v in obj["class_counts"].items()},
            master_seed=int(obj["master_seed"]),
            image_size=int(obj["image_size"]),
            disk_radius=tuple(obj["disk_radius"]),
            distractor_range=tuple(int(v) for v in obj["distractor_range"]),
            split_ratios=tuple(obj["split_ratios"]),
        )


@dataclass
class SampleRecord:
    """One image with its labels, ground-truth ROI and provenance."""

    index: int
    label6: str
    roi: BBoxParams
    split: str = "train"
    sample_seed: int = 0
    source_index: int | None = None
    path: str | None = None
    image: np.ndarray | None = None  # (1, H, W) float64 in [0, 1]

    def to_json_dict(self) -> dict:
        return {
            "path": self.path,
            "label6": self.label6,
            "label3": label3(self.label6),
            "label2": label2(self.label6),
            "roi": self.roi.to_json(),
            "split": self.split,
            "source_index": self.source_index,
            "sample_seed": self.sample_seed,
        }


@dataclass
class Dataset:
    config: GenConfig
    samples: list[SampleRecord] = field(default_factory=list)

    def records(self, split: str | None = None) -> list[SampleRecord]:
        if split is None:
            return list(self.samples)
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]

    def counts(self, classes: int = 6, split: str | None = None) -> dict[str, int]:
        out = {c: 0 for c in scenario_classes(classes)}
        for s in self.records(split):
            if classes == 6 and s.label6 == "N":
                continue
            out[scenario_label(s.label6, classes)] += 1
        return out

    def manifest_dict(self) -> dict:
        return {
            "version": 1,
            "master_seed": self.config.master_seed,
            "config": self.config.to_json_dict(),
            "samples": [s.to_json_dict() for s in self.samples],
        }

    def save(self, out_dir: str) -> None:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        for s in self.samples:
            s.path = os.path.join("images", f"sample_{s.index:06d}.wltn")
            save_tensor(s.image, os.path.join(out_dir, s.path))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(self.manifest_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, in_dir: str) -> "Dataset":
        manifest_path = os.path.join(in_dir, "manifest.json")
        try:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
        config = GenConfig.from_json_dict(manifest["config"])
        samples = []
        for i, rec in enumerate(manifest["samples"]):
            image = load_tensor(os.path.join(in_dir, rec["path"]))
            samples.append(
                SampleRecord(
                    index=i,
                    label6=rec["label6"],
                    roi=BBoxParams.from_json(rec["roi"]),
                    split=rec["split"],
                    sample_seed=int(rec["sample_seed"]),
                    source_index=rec["source_index"],
                    path=rec["path"],
                    image=image,
                )
            )
        return cls(config, samples)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class _Geometry:
    bg_amp: np.ndarray
    bg_freq: np.ndarray
    bg_theta: np.ndarray
    bg_phase: np.ndarray
    disk_center: tuple[float, float]
    disk_radius: float
    base_angle: float
    angle_jitter: np.ndarray
    radial_offset: np.ndarray
    bend: float
    bend_sign: np.ndarray
    distractors: list[dict]


def _sample_geometry(rng: np.random.Generator, cfg: GenConfig) -> _Geometry:
    size = cfg.image_size
    bg_amp = rng.uniform(0.02, 0.07, size=3)
    bg_freq = rng.uniform(1.0, 3.5, size=3)
    bg_theta = rng.uniform(0.0, np.pi, size=3)
    bg_phase = rng.uniform(0.0, 2.0 * np.pi, size=3)

    radius = rng.uniform(*cfg.disk_radius)
    margin = radius + 1.5
    cr = rng.uniform(margin, size - 1 - margin)
    cc = rng.uniform(margin, size - 1 - margin)

    base_angle = rng.uniform(0.0, np.pi)
    angle_jitter = rng.uniform(-0.12, 0.12, size=3)
    radial_offset = rng.uniform(-0.25, 0.25, size=3)
    bend = rng.uniform(0.65, 0.9)
    bend_sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)

    n_distractors = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
    distractors = []
    for _ in range(n_distractors):
        distractors.append(
            {
                "center": (rng.uniform(0, size - 1), rng.uniform(0, size - 1)),
                "angle": rng.uniform(0.0, np.pi),
                "length": rng.uniform(8.0, 18.0),
                "bend": rng.uniform(0.0, 0.45) * rng.choice([-1.0, 1.0]),
                "value": rng.uniform(0.08, 0.28),
            }
        )
    return _Geometry(
        bg_amp, bg_freq, bg_theta, bg_phase, (cr, cc), radius,
        base_angle, angle_jitter, radial_offset, bend, bend_sign, distractors,
    )


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(size, dtype=np.float64)
    return np.meshgrid(rows, rows, indexing="ij")


def _curve_points(p0, ctrl, p1, n=_CURVE_POINTS) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t**2 * p1


def _stroke_alpha(size, points, width) -> np.ndarray:
    """Anti-aliased coverage of a polyline given by dense points, full-image."""
    r_lo = max(0, int(points[:, 0].min() - width - 1))
    r_hi = min(size - 1, int(points[:, 0].max() + width + 1))
    c_lo = max(0, int(points[:, 1].min() - width - 1))
    c_hi = min(size - 1, int(points[:, 1].max() + width + 1))
    alpha = np.zeros((size, size))
    if r_hi < r_lo or c_hi < c_lo:
        return alpha
    rr = np.arange(r_lo, r_hi + 1, dtype=np.float64)
    cc = np.arange(c_lo, c_hi + 1, dtype=np.float64)
    pr, pc = np.meshgrid(rr, cc, indexing="ij")
    d2 = (pr[..., None] - points[:, 0]) ** 2 + (pc[..., None] - points[:, 1]) ** 2
    dist = np.sqrt(d2.min(axis=-1))
    alpha[r_lo : r_hi + 1, c_lo : c_hi + 1] = np.clip(width + 0.5 - dist, 0.0, 1.0)
    return alpha


def _blend(img, alpha, value):
    np.multiply(img, 1.0 - alpha, out=img)
    img += alpha * value


def _render(geo: _Geometry, label6: str, cfg: GenConfig) -> tuple[np.ndarray, BBoxParams]:
    size = cfg.image_size
    pr, pc = _pixel_grid(size)
    rn = pr / ((size - 1) / 2.0) - 1.0
    cn = pc / ((size - 1) / 2.0) - 1.0

    img = np.full((size, size), 0.3)
    for a, f, th, ph in zip(geo.bg_amp, geo.bg_freq, geo.bg_theta, geo.bg_phase):
        img += a * np.cos(f * np.pi * (np.cos(th) * rn + np.sin(th) * cn) + ph)
    np.clip(img, 0.05, 0.95, out=img)

    cr, cc_ = geo.disk_center
    radius = geo.disk_radius
    inside_roi = (np.abs(pr - cr) <= radius) & (np.abs(pc - cc_) <= radius)

    for d in geo.distractors:
        dr = np.array([np.cos(d["angle"]), np.sin(d["angle"])])
        nr = np.array([-dr[1], dr[0]])
        half = d["length"] / 2.0
        p0 = np.array(d["center"]) - half * dr
        p1 = np.array(d["center"]) + half * dr
        ctrl = np.array(d["center"]) + d["bend"] * d["length"] * nr
        alpha = _stroke_alpha(size, _curve_points(p0, ctrl, p1), _STROKE_WIDTH)
        alpha[inside_roi] = 0.0  # distractors never touch the ROI
        _blend(img, alpha, d["value"])

    dist_center = np.sqrt((pr - cr) ** 2 + (pc - cc_) ** 2)
    disk_alpha = np.clip(radius + 0.5 - dist_center, 0.0, 1.0)
    _blend(img, disk_alpha, _DISK_VALUE)

    if label6 != "N":
        family, count = label6[0], int(label6[1])
        interior = np.clip(radius - 1.0 - dist_center, 0.0, 1.0)
        for i in range(count):
            angle = geo.base_angle + i * (np.pi / 3.0) + geo.angle_jitter[i]
            dr = np.array([np.cos(angle), np.sin(angle)])
            nr = np.array([-dr[1], dr[0]])
            anchor = np.array([cr, cc_]) + geo.radial_offset[i] * radius * nr
            half = 0.78 * radius
            p0 = anchor - half * dr
            p1 = anchor + half * dr
            if family == "A":
                ctrl = (p0 + p1) / 2.0
            else:
                ctrl = (p0 + p1) / 2.0 + geo.bend_sign[i] * geo.bend * radius * nr
            alpha = _stroke_alpha(size, _curve_points(p0, ctrl, p1), _STROKE_WIDTH) * interior
            _blend(img, alpha, _GLYPH_VALUE)

    half_px = (size - 1) / 2.0
    roi = BBoxParams(cr / half_px - 1.0, cc_ / half_px - 1.0, radius / half_px)
    return img[None, :, :], roi


def render_sample(cfg: GenConfig, index: int, label6: str) -> tuple[np.ndarray, BBoxParams]:
    """Render one sample deterministically from (master_seed, index)."""
    geo = _sample_geometry(np.random.default_rng([cfg.master_seed, index]), cfg)
    return _render(geo, label6, cfg)


def decode_subtype(cfg: GenConfig, record: SampleRecord, image: np.ndarray | None = None) -> str:
    """Recover the 6-way label of a clean sample from its ROI content.

    Re-renders the six candidate glyphs with the sample's own geometry and
    returns the candidate whose ROI patch matches best. Only meaningful
    for unaugmented samples.
    """
    img = image if image is not None else record.image
    geo = _sample_geometry(np.random.default_rng([cfg.master_seed, record.sample_seed]), cfg)
    r0, r1, c0, c1 = bbox_to_pixels(record.roi, cfg.image_size)
    patch = img[0, r0 : r1 + 1, c0 : c1 + 1]
    best, best_err = None, np.inf
    for cand in FRACTURE_SUBTYPES:
        cand_img, _ = _render(geo, cand, cfg)
        err = float(np.sum((cand_img[0, r0 : r1 + 1, c0 : c1 + 1] - patch) ** 2))
        if err < best_err:
            best, best_err = cand, err
    return best


# ---------------------------------------------------------------------------
# generation, splitting, augmentation


def generate(config: GenConfig) -> Dataset:
    """Render the configured class profile and assign stratified splits."""
    samples: list[SampleRecord] = []
    index = 0
    for label in LABELS6:
        for _ in range(config.class_counts.get(label, 0)):
            image, roi = render_sample(config, index, label)
            samples.append(
                SampleRecord(index=index, label6=label, roi=roi, sample_seed=index, image=image)
            )
            index += 1
    dataset = Dataset(config, samples)
    assign_splits(dataset, config.split_ratios, config.master_seed)
    return dataset


def assign_splits(dataset: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> Dataset:
    """Stratified per-class split; derived samples inherit their source's split.

    Per class the three split sizes are the largest-remainder rounding of
    the exact targets, so each class's fraction is within one sample of
    the requested ratio. Augmented derivatives never straddle splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng([seed, 0x51])
    base = [s for s in dataset.samples if s.source_index is None]
    by_class: dict[str, list[SampleRecord]] = {}
    for s in base:
        by_class.setdefault(s.label6, []).append(s)
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        counts = _largest_remainder([len(group) * r for r in ratios], len(group))
        cursor = 0
        for split, count in zip(SPLITS, counts):
            for k in range(count):
                group[order[cursor + k]].split = split
            cursor += count
    split_of = {s.index: s.split for s in base}
    for s in dataset.samples:
        if s.source_index is not None:
            s.split = split_of.get(s.source_index, s.split)
    return dataset


# augmentation ranges: zoom out 0.4-0.9 or in 1.3-1.9, rotation 5-15 degrees
# either way, translation up to half the image extent per axis
ZOOM_OUT = (0.4, 0.9)
ZOOM_IN = (1.3, 1.9)
ROTATION_DEG = (5.0, 15.0)
TRANSLATION = 1.0  # normalized units; the image spans [-1, 1]


def transform_sample(record: SampleRecord, zoom: float, rotation_deg: float,
                     t_r: float, t_c: float, new_index: int = -1) -> SampleRecord:
    """Apply one zoom/rotation/translation to image and ROI jointly.

    The image content is moved by p -> zoom * R(rotation) * p + t in
    normalized coordinates and resampled bilinearly with zero padding; the
    ROI center moves with it and its half-extent scales by the zoom (the
    ROI is a disk's bounding square, so rotation leaves it square).
    """
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # sampling maps output positions back to source: inverse of the content motion
    inv = np.array([[cos_t, sin_t], [-sin_t, cos_t]]) / zoom
    offset = -inv @ np.array([t_r, t_c])
    params = np.array([[inv[0, 0], inv[0, 1], inv[1, 0], inv[1, 1], offset[0], offset[1]]])
    size = record.image.shape[-1]
    grid = affine_grid(Tensor(params), WarpKind.AFFINE, size, size)
    warped = grid_sample(Tensor(record.image[None]), grid).data[0]

    center = np.array([record.roi.t_r, record.roi.t_c])
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    new_center = zoom * (rot @ center) + np.array([t_r, t_c])
    new_roi = BBoxParams(float(new_center[0]), float(new_center[1]), zoom * record.roi.s)
    return SampleRecord(
        index=new_index,
        label6=record.label6,
        roi=new_roi,
        split=record.split,
        sample_seed=record.sample_seed,
        source_index=record.index,
        image=warped,
    )


def _roi_inside(roi: BBoxParams) -> bool:
    return (
        roi.t_r - roi.s >= -1.0
        and roi.t_r + roi.s <= 1.0
        and roi.t_c - roi.s >= -1.0
        and roi.t_c + roi.s <= 1.0
    )


def augment(record: SampleRecord, rng: np.random.Generator, new_index: int = -1,
            max_tries: int = 100) -> SampleRecord:
    """Random zoom/rotation/translation that keeps the ROI inside the image.

    Parameters are redrawn until the transformed ROI stays in frame; after
    ``max_tries`` failures an untouched copy is returned instead.
    """
    for _ in range(max_tries):
        zoom = rng.uniform(*ZOOM_OUT) if rng.random() < 0.5 else rng.uniform(*ZOOM_IN)
        rot = rng.uniform(*ROTATION_DEG) * (-1.0 if rng.random() < 0.5 else 1.0)
        t_r = rng.uniform(-TRANSLATION, TRANSLATION)
        t_c = rng.uniform(-TRANSLATION, TRANSLATION)
        center = np.array([record.roi.t_r, record.roi.t_c])
        theta = math.radians(rot)
        rotm = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        new_center = zoom * (rotm @ center) + np.array([t_r, t_c])
        candidate = BBoxParams(float(new_center[0]), float(new_center[1]), zoom * record.roi.s)
        if _roi_inside(candidate):
            return transform_sample(record, zoom, rot, t_r, t_c, new_index=new_index)
    clone = replace(record, index=new_index, source_index=record.index, image=record.image.copy())
    return clone


def balance_by_augmentation(dataset: Dataset, classes: int = 6) -> Dataset:
    """Top up under-represented training classes with augmented copies.

    Only the train split changes; copies carry their source index and
    inherit the source's split, so no sample family crosses splits. The
    result matches the largest per-class train count exactly.
    """
    class_list = scenario_classes(classes)
    groups: dict[str, list[SampleRecord]] = {c: [] for c in class_list}
    for rec in dataset.records("train"):
        if classes == 6 and rec.label6 == "N":
            continue
        groups[scenario_label(rec.label6, classes)].append(rec)
    sizes = {c: len(g) for c, g in groups.items()}
    if not sizes or min(sizes.values()) == 0:
        raise ConfigError(f"cannot balance: empty training class among {sizes}")
    target = max(sizes.values())
    new_samples = list(dataset.samples)
    next_index = max(s.index for s in dataset.samples) + 1
    for cls in class_list:
        sources = sorted(groups[cls], key=lambda s: s.index)
        deficit = target - len(sources)
        for k in range(deficit):
            src = sources[k % len(sources)]
            rng = np.random.default_rng([dataset.config.master_seed, 0xBA1A, src.index, k // len(sources)])
            new_samples.append(augment(src, rng, new_index=next_index))
            next_index += 1
    return Dataset(dataset.config, new_samples)


# ---------------------------------------------------------------------------
# batching helpers used by the training harness


def stack_images(records: list[SampleRecord], resize_to: int | None = None) -> np.ndarray:
    """Stack sample images into (N, 1, H, W), optionally resized."""
    if resize_to is None:
        return np.stack([r.image for r in records])
    return np.stack([resize_bilinear(r.image, resize_to, resize_to) for r in records])


def one_hot_labels(records: list[SampleRecord], classes: int) -> np.ndarray:
    names = scenario_classes(classes)
    index = {c: i for i, c in enumerate(names)}
    out = np.zeros((len(records), len(names)))
    for i, rec in enumerate(records):
        out[i, index[scenario_label(rec.label6, classes)]] = 1.0
    return out


def roi_targets(records: list[SampleRecord]) -> np.ndarray:
    return np.array([[r.roi.t_r, r.roi.t_c, r.roi.s] for r in records])


def scenario_records(dataset: Dataset, classes: int, split: str) -> list[SampleRecord]:
    recs = dataset.records(split)
    if classes == 6:
        recs = [r for r in recs if r.label6 != "N"]
    return recs
