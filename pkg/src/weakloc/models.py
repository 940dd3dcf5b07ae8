"""The six model schemes over a shared small convolutional backbone.

All schemes share one backbone family (stride-2 conv blocks with ReLU, no
normalization) sized for CPU training:

* ``lbm``        classify the full image (no localization)
* ``ubm``        classify a ground-truth ROI crop
* ``suploc``     regress the ROI box (t_r, t_c, s) under direct supervision
* ``astn``       joint localizer + classifier through a 3-parameter
                 similarity warp, trained only from the class loss
* ``affstn``     same with a 6-parameter affine warp
* ``stl``        shared trunk with a classification branch and an
                 auxiliary global-pooling localization branch
* ``globalpool`` transition conv, global pooling, linear prediction;
                 score maps come from the prediction weights

Localizer heads initialize to the identity warp (zero weights, identity
bias), so the warped schemes start out classifying the whole image.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArtifactError, ConfigError, UsageError
from .tensor import (
    PoolingConfig,
    Tensor,
    add_channel_bias,
    conv2d,
    global_pool_nchw,
    linear,
    load_tensor,
    matmul,
    permute,
    relu,
    reshape,
    save_tensor,
    softmax,
)
from .warp import WarpKind, affine_grid, grid_sample

SCHEMES = ("lbm", "ubm", "suploc", "astn", "affstn", "stl", "globalpool")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs shared by every scheme."""

    num_classes: int
    image_size: int = 64
    roi_size: int = 32
    stl_size: int = 96
    channels: tuple[int, ...] = (8, 16, 32)
    stl_shared_channels: tuple[int, ...] = (8, 16)
    stl_branch_channels: int = 32
    hidden: int = 64
    localizer_hidden: int = 32
    transition_dim: int = 32
    pooling: str = "avg"
    lse_sharpness: float = 10.0
    localizer_lr_scale: float = 1e-4

    def pooling_config(self) -> PoolingConfig:
        return PoolingConfig(self.pooling, self.lse_sharpness)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["stl_shared_channels"] = list(self.stl_shared_channels)
        return d

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["channels"] = tuple(obj["channels"])
        obj["stl_shared_channels"] = tuple(obj["stl_shared_channels"])
        return cls(**obj)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2dLayer:
    def __init__(self, rng, c_in, c_out, kernel=3, stride=2, padding=1):
        fan_in = c_in * kernel * kernel
        self.weights = Tensor(_he(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return add_channel_bias(conv2d(x, self.weights, self.stride, self.padding), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.weights, "b": self.bias}

    @staticmethod
    def out_size(size, kernel=3, stride=2, padding=1) -> int:
        return (size + 2 * padding - kernel) // stride + 1


class DenseLayer:
    def __init__(self, rng, d_in, d_out, zero_weights=False, bias_values=None):
        w = np.zeros((d_in, d_out)) if zero_weights else _he(rng, (d_in, d_out), d_in)
        b = np.zeros(d_out) if bias_values is None else np.asarray(bias_values, dtype=np.float64)
        self.weights = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weights, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.weights, "b": self.bias}


class ConvStack:
    """Chain of stride-2 conv blocks with ReLU."""

    def __init__(self, rng, c_in, channels, input_size):
        self.layers = []
        size = input_size
        prev = c_in
        for c_out in channels:
            self.layers.append(Conv2dLayer(rng, prev, c_out))
            size = Conv2dLayer.out_size(size)
            prev = c_out
        if size < 2:
            raise ConfigError(
                f"backbone collapses to {size}x{size} spatial cells for input {input_size}; "
                "score maps need at least 2x2"
            )
        self.out_size = size
        self.out_channels = prev

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = relu(layer(x))
        return x

    @property
    def flat_dim(self) -> int:
        return self.out_channels * self.out_size * self.out_size

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out


def _prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


@dataclass
class ScoreMaps:
    """Per-class spatial activations, channels last: (S, S, C)."""

    maps: np.ndarray
    source: str

    @classmethod
    def from_chw(cls, chw: np.ndarray, source: str) -> "ScoreMaps":
        return cls(np.transpose(chw, (1, 2, 0)), source)

    @property
    def num_classes(self) -> int:
        return self.maps.shape[2]

    def channel(self, c: int) -> np.ndarray:
        return self.maps[:, :, c]


class SchemeModel:
    scheme: str = ""

    def __init__(self, config: ModelConfig):
        self.config = config

    def named_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def param_groups(self) -> list[tuple[str, list[str], float]]:
        return [("main", list(self.named_params()), 1.0)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data, copy=True) for k, v in self.named_params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, tensor in params.items():
            if name not in state:
                raise ArtifactError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ArtifactError(
                    f"parameter {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
                )
            tensor.data = arr.copy()

    def param_count(self) -> int:
        return sum(t.size for t in self.named_params().values())


class ImageClassifier(SchemeModel):
    """Backbone, a hidden dense layer, then the class head."""

    def __init__(self, config: ModelConfig, rng, scheme: str = "lbm", input_size: int | None = None):
        super().__init__(config)
        self.scheme = scheme
        self.input_size = input_size if input_size is not None else (
            config.roi_size if scheme == "ubm" else config.image_size
        )
        self.backbone = ConvStack(rng, 1, config.channels, self.input_size)
        self.fc = DenseLayer(rng, self.backbone.flat_dim, config.hidden)
        self.head = DenseLayer(rng, config.hidden, config.num_classes)

    def logits(self, images: Tensor) -> Tensor:
        feats = reshape(self.backbone(images), (images.shape[0], self.backbone.flat_dim))
        return self.head(relu(self.fc(feats)))

    def probs(self, images: Tensor) -> Tensor:
        return softmax(self.logits(images))

    def named_params(self) -> dict[str, Tensor]:
        out = _prefixed("backbone", self.backbone.params())
        out.update(_prefixed("fc", self.fc.params()))
        out.update(_prefixed("head", self.head.params()))
        return out


class BoxRegressor(SchemeModel):
    """Directly supervised (t_r, t_c, s) regressor, initialized to the full-image box."""

    scheme = "suploc"

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config)
        self.backbone = ConvStack(rng, 1, config.channels, config.image_size)
        self.fc = DenseLayer(rng, self.backbone.flat_dim, config.hidden)
        self.out = DenseLayer(rng, config.hidden, 3, zero_weights=True, bias_values=[0.0, 0.0, 1.0])

    def forward(self, images: Tensor) -> Tensor:
        feats = reshape(self.backbone(images), (images.shape[0], self.backbone.flat_dim))
        return self.out(relu(self.fc(feats)))

    def named_params(self) -> dict[str, Tensor]:
        out = _prefixed("backbone", self.backbone.params())
        out.update(_prefixed("fc", self.fc.params()))
        out.update(_prefixed("out", self.out.params()))
        return out


_IDENTITY_BIAS = {
    WarpKind.SIMILARITY: (0.0, 0.0, 1.0),
    WarpKind.AFFINE: (1.0, 0.0, 0.0, 1.0, 0.0, 0.0),
}


class SpatialTransformerClassifier(SchemeModel):
    """Localizer network -> differentiable crop -> classifier network.

    The localizer regresses warp parameters (3 for similarity, 6 for
    affine); the crop and the classifier sit on the same tape, so the
    classification loss alone trains the localizer.
    """

    def __init__(self, config: ModelConfig, rng, kind: WarpKind):
        super().__init__(config)
        self.kind = WarpKind(kind)
        self.scheme = "astn" if self.kind == WarpKind.SIMILARITY else "affstn"
        n_params = 3 if self.kind == WarpKind.SIMILARITY else 6
        self.loc_backbone = ConvStack(rng, 1, config.channels, config.image_size)
        self.loc_fc = DenseLayer(rng, self.loc_backbone.flat_dim, config.localizer_hidden)
        self.loc_out = DenseLayer(
            rng, config.localizer_hidden, n_params,
            zero_weights=True, bias_values=_IDENTITY_BIAS[self.kind],
        )
        self.clf_backbone = ConvStack(rng, 1, config.channels, config.roi_size)
        self.clf_fc = DenseLayer(rng, self.clf_backbone.flat_dim, config.hidden)
        self.clf_head = DenseLayer(rng, config.hidden, config.num_classes)

    def warp_params(self, images: Tensor) -> Tensor:
        feats = reshape(self.loc_backbone(images), (images.shape[0], self.loc_backbone.flat_dim))
        return self.loc_out(relu(self.loc_fc(feats)))

    def classify_crops(self, crops: Tensor) -> Tensor:
        feats = reshape(self.clf_backbone(crops), (crops.shape[0], self.clf_backbone.flat_dim))
        return self.clf_head(relu(self.clf_fc(feats)))

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        params = self.warp_params(images)
        grid = affine_grid(params, self.kind, self.config.roi_size, self.config.roi_size)
        crops = grid_sample(images, grid)
        return self.classify_crops(crops), params

    def named_params(self) -> dict[str, Tensor]:
        out = _prefixed("loc.backbone", self.loc_backbone.params())
        out.update(_prefixed("loc.fc", self.loc_fc.params()))
        out.update(_prefixed("loc.out", self.loc_out.params()))
        out.update(_prefixed("clf.backbone", self.clf_backbone.params()))
        out.update(_prefixed("clf.fc", self.clf_fc.params()))
        out.update(_prefixed("clf.head", self.clf_head.params()))
        return out

    def param_groups(self):
        names = self.named_params()
        loc = [n for n in names if n.startswith("loc.")]
        clf = [n for n in names if n.startswith("clf.")]
        return [("classifier", clf, 1.0), ("localizer", loc, self.config.localizer_lr_scale)]


def _identity(x: Tensor) -> Tensor:
    return x


class SelfTransferModel(SchemeModel):
    """Shared trunk with a classification branch and a score-map branch.

    The input is an enlarged image so the trunk keeps a big spatial grid;
    the localization branch maps it to one activation map per class and
    average-pools those into class scores. ``regularizer_hook`` sits where
    a dropout-style layer would go in the classification branch and
    defaults to the identity.
    """

    scheme = "stl"

    def __init__(self, config: ModelConfig, rng, regularizer_hook=None):
        super().__init__(config)
        self.shared = ConvStack(rng, 1, config.stl_shared_channels, config.stl_size)
        self.cls_fc = DenseLayer(rng, self.shared.flat_dim, config.hidden)
        self.cls_out = DenseLayer(rng, config.hidden, config.num_classes)
        self.loc_conv = Conv2dLayer(rng, self.shared.out_channels, config.stl_branch_channels,
                                    kernel=3, stride=1, padding=1)
        self.loc_proj = Conv2dLayer(rng, config.stl_branch_channels, config.num_classes,
                                    kernel=1, stride=1, padding=0)
        self.regularizer_hook = regularizer_hook or _identity
        self.map_size = self.shared.out_size

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.shared(images)
        flat = reshape(feats, (images.shape[0], self.shared.flat_dim))
        hidden = self.regularizer_hook(relu(self.cls_fc(flat)))
        logits = self.cls_out(hidden)
        maps = self.loc_proj(relu(self.loc_conv(feats)))
        pooled = global_pool_nchw(maps, PoolingConfig("avg"))
        return logits, pooled, maps

    def named_params(self) -> dict[str, Tensor]:
        out = _prefixed("shared", self.shared.params())
        out.update(_prefixed("cls.fc", self.cls_fc.params()))
        out.update(_prefixed("cls.out", self.cls_out.params()))
        out.update(_prefixed("loc.conv", self.loc_conv.params()))
        out.update(_prefixed("loc.proj", self.loc_proj.params()))
        return out

    def branch_param_names(self) -> dict[str, list[str]]:
        names = self.named_params()
        return {
            "shared": [n for n in names if n.startswith("shared.")],
            "classification": [n for n in names if n.startswith("cls.")],
            "localization": [n for n in names if n.startswith("loc.")],
        }


class GlobalPoolClassifier(SchemeModel):
    """Transition conv, global pooling, bias-free linear prediction.

    Score maps are the prediction weights convolved with the transition
    maps, i.e. for each class the weighted sum of transition channels at
    every spatial cell. The prediction layer carries no bias so that with
    average pooling the class score equals the spatial mean of its map.
    """

    scheme = "globalpool"

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config)
        self.backbone = ConvStack(rng, 1, config.channels, config.image_size)
        self.transition = Conv2dLayer(rng, self.backbone.out_channels, config.transition_dim,
                                      kernel=1, stride=1, padding=0)
        self.prediction = Tensor(
            _he(rng, (config.transition_dim, config.num_classes), config.transition_dim),
            requires_grad=True,
        )
        self.map_size = self.backbone.out_size

    def forward(self, images: Tensor, with_maps: bool = True):
        trans = relu(self.transition(self.backbone(images)))
        pooled = global_pool_nchw(trans, self.config.pooling_config())
        logits = matmul(pooled, self.prediction)
        if not with_maps:
            return logits, None
        kernels = reshape(permute(self.prediction, (1, 0)),
                          (self.config.num_classes, self.config.transition_dim, 1, 1))
        maps = conv2d(trans, kernels, stride=1, padding=0)
        return logits, maps

    def transition_maps(self, images: Tensor) -> Tensor:
        return relu(self.transition(self.backbone(images)))

    def named_params(self) -> dict[str, Tensor]:
        out = _prefixed("backbone", self.backbone.params())
        out.update(_prefixed("transition", self.transition.params()))
        out["prediction.w"] = self.prediction
        return out


def build_model(scheme: str, config: ModelConfig, seed: int = 0) -> SchemeModel:
    rng = np.random.default_rng([seed, 0x30DE1])
    if scheme == "lbm":
        return ImageClassifier(config, rng, scheme="lbm")
    if scheme == "ubm":
        return ImageClassifier(config, rng, scheme="ubm")
    if scheme == "suploc":
        return BoxRegressor(config, rng)
    if scheme == "astn":
        return SpatialTransformerClassifier(config, rng, WarpKind.SIMILARITY)
    if scheme == "affstn":
        return SpatialTransformerClassifier(config, rng, WarpKind.AFFINE)
    if scheme == "stl":
        return SelfTransferModel(config, rng)
    if scheme == "globalpool":
        return GlobalPoolClassifier(config, rng)
    raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# ---------------------------------------------------------------------------
# checkpoints: one directory with a JSON manifest plus one tensor file per parameter

_CHECKPOINT_MANIFEST = "checkpoint.json"


def save_checkpoint(out_dir: str, model: SchemeModel, meta: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    params = model.named_params()
    files = {}
    for name, tensor in params.items():
        fname = name.replace(".", "_") + ".wltn"
        save_tensor(tensor, os.path.join(out_dir, fname))
        files[name] = fname
    manifest = {
        "format": "weakloc-checkpoint",
        "version": 1,
        "scheme": model.scheme,
        "model_config": model.config.to_json_dict(),
        "meta": meta or {},
        "params": files,
    }
    with open(os.path.join(out_dir, _CHECKPOINT_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(in_dir: str) -> tuple[SchemeModel, dict]:
    path = os.path.join(in_dir, _CHECKPOINT_MANIFEST)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if manifest.get("format") != "weakloc-checkpoint":
        raise ArtifactError(f"not a checkpoint manifest: {path}")
    config = ModelConfig.from_json_dict(manifest["model_config"])
    model = build_model(manifest["scheme"], config, seed=0)
    state = {}
    for name, fname in manifest["params"].items():
        state[name] = load_tensor(os.path.join(in_dir, fname))
    model.load_state(state)
    return model, manifest.get("meta", {})
