"""Training objectives: weighted cross-entropy, box regression, blended totals.

Batch reduction is the mean over samples throughout, so learning rates do
not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LabelError, ShapeError
from .tensor import Tensor, add, clamp_min, log, mul, reshape, scale, tsum
from .warp import BBoxParams

LOG_FLOOR = 1e-12  # clamp inside cross-entropy so saturated probabilities stay finite


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, proportional to inverse class frequency.

    w_c = z / freq(c), with z chosen so the weights sum to the number of
    classes; balanced data therefore recovers unit weights.
    """

    weights: np.ndarray
    z: float
    freqs: np.ndarray

    def per_sample(self, labels_onehot: np.ndarray) -> np.ndarray:
        """Weight of each sample's true class, shape (N,)."""
        return labels_onehot @ self.weights

    @classmethod
    def unit(cls, num_classes: int) -> "ClassWeights":
        freqs = np.ones(num_classes, dtype=np.int64)
        return cls(np.ones(num_classes), 1.0, freqs)


def class_weights(freqs) -> ClassWeights:
    """Inverse-frequency class weights normalized to sum to the class count."""
    freqs = np.asarray(freqs, dtype=np.int64)
    if freqs.ndim != 1 or freqs.size == 0:
        raise LabelError(f"class_weights: need a 1-d list of counts, got shape {tuple(freqs.shape)}")
    if np.any(freqs < 1):
        empty = int(np.argmin(freqs))
        raise LabelError(f"class_weights: class {empty} has no samples")
    inv = 1.0 / freqs
    z = freqs.size / inv.sum()
    return ClassWeights(z * inv, float(z), freqs)


@dataclass(frozen=True)
class AlphaSchedule:
    """Blend factor for the auxiliary localization branch.

    The effective value equals ``alpha`` until ``flip_epoch`` (1-based), at
    which point it is complemented to 1 - alpha for the rest of training.
    ``flip_epoch=None`` disables the flip.
    """

    alpha: float
    flip_epoch: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.flip_epoch is not None and self.flip_epoch < 1:
            raise ConfigError(f"flip epoch must be positive, got {self.flip_epoch}")

    def value_at(self, epoch: int) -> float:
        if self.flip_epoch is not None and epoch >= self.flip_epoch:
            return 1.0 - self.alpha
        return self.alpha


def _check_one_hot(labels: np.ndarray, shape) -> None:
    if labels.shape != shape:
        raise LabelError(f"labels shape {tuple(labels.shape)} does not match predictions {tuple(shape)}")
    if not np.all((labels == 0.0) | (labels == 1.0)) or not np.all(labels.sum(axis=1) == 1.0):
        raise LabelError("labels must be one-hot rows")


def wce_loss(probs: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """Class-weighted cross-entropy over a batch of probability rows.

    With ``weights=None`` (or unit weights) this is the standard
    cross-entropy. Probabilities are clamped at ``LOG_FLOOR`` before the
    log; the result is the batch mean of -sum_c w_c y_c log(p_c).
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    _check_one_hot(labels, probs.shape)
    n, c = probs.shape
    if weights is None:
        mask = labels
    else:
        if weights.weights.shape != (c,):
            raise LabelError(f"weights cover {weights.weights.shape[0]} classes, predictions have {c}")
        mask = labels * weights.weights[None, :]
    picked = mul(log(clamp_min(probs, LOG_FLOOR)), Tensor(mask))
    return scale(tsum(picked), -1.0 / n)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Unweighted cross-entropy; identical to :func:`wce_loss` with unit weights."""
    return wce_loss(probs, labels, None)


def _as_box_array(value) -> np.ndarray:
    if isinstance(value, BBoxParams):
        return np.array([[value.t_r, value.t_c, value.s]], dtype=np.float64)
    if isinstance(value, Tensor):
        data = value.data
    else:
        data = np.asarray(value, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    return data


def sup_loc_loss(truth, pred) -> Tensor:
    """Half squared distance between box parameter triples, batch-averaged.

    Accepts :class:`BBoxParams`, raw (3,) arrays or (N, 3) tensors on
    either side; the predicted side may be a tracked tensor, keeping the
    loss differentiable for training a box regressor.
    """
    truth_arr = _as_box_array(truth)
    pred_t = pred if isinstance(pred, Tensor) else Tensor(_as_box_array(pred))
    if pred_t.ndim == 1:
        pred_t = reshape(pred_t, (1, pred_t.size))
    if pred_t.shape != truth_arr.shape:
        raise ShapeError(f"sup_loc_loss: shapes differ, {tuple(pred_t.shape)} vs {tuple(truth_arr.shape)}")
    n = truth_arr.shape[0]
    diff = add(pred_t, Tensor(-truth_arr))
    return scale(tsum(mul(diff, diff)), 0.5 / n)


def stl_total_loss(class_loss: Tensor, loc_loss: Tensor, schedule: AlphaSchedule, epoch: int) -> Tensor:
    """Blend the classification and auxiliary localization losses.

    total = (1 - a) * class_loss + a * loc_loss with a taken from the
    schedule at the given (1-based) epoch.
    """
    a = schedule.value_at(epoch)
    return add(scale(class_loss, 1.0 - a), scale(loc_loss, a))
