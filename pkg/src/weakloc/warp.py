"""Differentiable spatial warping in normalized image coordinates.

Coordinate convention used everywhere in this package: an H x W image
spans [-1, 1] x [-1, 1], and pixel (i, j) sits at

    row = -1 + 2 i / (H - 1),    col = -1 + 2 j / (W - 1)

so corner pixels land exactly on the corners of the square. Axis-aligned
boxes are (t_r, t_c, s): center plus half-extent, both in normalized
units. A similarity warp (t_r, t_c, s) reads the source square
[t_r - s, t_r + s] x [t_c - s, t_c + s]; the identity is (0, 0, 1).

Sampling uses bilinear interpolation with zero padding outside the image,
which keeps gradients defined for any grid position.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DegenerateTransformError, ShapeError
from .tensor import Tensor, record_op, reshape


class WarpKind(str, Enum):
    SIMILARITY = "similarity"
    AFFINE = "affine"


_PARAM_COUNT = {WarpKind.SIMILARITY: 3, WarpKind.AFFINE: 6}


@dataclass(frozen=True)
class BBoxParams:
    """Axis-aligned square box: center (t_r, t_c) and half-extent s, normalized."""

    t_r: float
    t_c: float
    s: float

    def __post_init__(self):
        for name in ("t_r", "t_c", "s"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ConfigError(f"box field {name} is not finite: {v}")
        if self.s < 0.0:
            raise ConfigError(f"box half-extent must be >= 0, got {self.s}")
        if abs(self.t_r) - self.s > 1.0 or abs(self.t_c) - self.s > 1.0:
            raise ConfigError(
                f"box ({self.t_r}, {self.t_c}, {self.s}) does not intersect the image square"
            )

    def to_json(self) -> dict:
        return {"t_r": self.t_r, "t_c": self.t_c, "s": self.s}

    @classmethod
    def from_json(cls, obj: dict) -> "BBoxParams":
        return cls(float(obj["t_r"]), float(obj["t_c"]), float(obj["s"]))


class WarpParams:
    """Parameters of a target-to-source warp.

    Similarity: (t_r, t_c, s) with s > 0. Affine: (a_rr, a_rc, a_cr,
    a_cc, t_r, t_c), mapping a target lattice point (r', c') to the
    source position (a_rr r' + a_rc c' + t_r, a_cr r' + a_cc c' + t_c).
    Values may be a plain array or a tracked :class:`Tensor`, in which
    case grid generation stays differentiable with respect to them.
    """

    __slots__ = ("kind", "values")

    def __init__(self, kind: WarpKind | str, values):
        kind = WarpKind(kind)
        tensor = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=np.float64))
        expected = _PARAM_COUNT[kind]
        if tensor.shape != (expected,):
            raise ShapeError(f"{kind.value} warp needs {expected} parameters, got shape {tuple(tensor.shape)}")
        if kind == WarpKind.SIMILARITY:
            if not (float(tensor.data[2]) > 0.0):
                raise ConfigError(f"similarity scale must be positive, got {float(tensor.data[2])}")
        else:
            a_rr, a_rc, a_cr, a_cc = (float(v) for v in tensor.data[:4])
            if abs(a_rr * a_cc - a_rc * a_cr) < 1e-12:
                raise DegenerateTransformError(
                    f"affine block [[{a_rr}, {a_rc}], [{a_cr}, {a_cc}]] is singular"
                )
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", tensor)

    @classmethod
    def similarity(cls, t_r: float, t_c: float, s: float) -> "WarpParams":
        return cls(WarpKind.SIMILARITY, np.array([t_r, t_c, s], dtype=np.float64))

    @classmethod
    def affine(cls, a_rr, a_rc, a_cr, a_cc, t_r, t_c) -> "WarpParams":
        return cls(WarpKind.AFFINE, np.array([a_rr, a_rc, a_cr, a_cc, t_r, t_c], dtype=np.float64))

    @classmethod
    def from_bbox(cls, box: BBoxParams) -> "WarpParams":
        return cls.similarity(box.t_r, box.t_c, box.s)

    def matrix_values(self) -> np.ndarray:
        """The 6-value affine form of these parameters."""
        if self.kind == WarpKind.AFFINE:
            return np.array(self.values.data, copy=True)
        t_r, t_c, s = (float(v) for v in self.values.data)
        return np.array([s, 0.0, 0.0, s, t_r, t_c], dtype=np.float64)

    def as_affine(self) -> "WarpParams":
        return WarpParams(WarpKind.AFFINE, self.matrix_values())

    def __repr__(self) -> str:
        return f"WarpParams({self.kind.value}, {np.array2string(self.values.data, precision=4)})"


@dataclass
class SamplingGrid:
    """Source positions for each cell of a regular target lattice.

    ``coords`` has shape (grid_h, grid_w, 2) holding normalized (row, col)
    source coordinates; the target lattice itself always spans the full
    [-1, 1] square of the output.
    """

    grid_h: int
    grid_w: int
    coords: Tensor


def _target_lattice(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows = -1.0 + 2.0 * np.arange(h, dtype=np.float64) / (h - 1)
    cols = -1.0 + 2.0 * np.arange(w, dtype=np.float64) / (w - 1)
    return np.meshgrid(rows, cols, indexing="ij")


def affine_grid(params: Tensor, kind: WarpKind | str, out_h: int, out_w: int) -> Tensor:
    """Map a regular (out_h, out_w) target lattice through a batch of warps.

    ``params`` is (N, 3) for similarity or (N, 6) for affine; the result is
    an (N, out_h, out_w, 2) tensor of normalized source coordinates,
    differentiable with respect to the parameters.
    """
    kind = WarpKind(kind)
    if out_h < 2 or out_w < 2:
        raise ConfigError(f"grid size must be at least 2 per axis, got {out_h}x{out_w}")
    if params.ndim != 2 or params.shape[1] != _PARAM_COUNT[kind]:
        raise ShapeError(
            f"affine_grid: {kind.value} params must be (N, {_PARAM_COUNT[kind]}), got {tuple(params.shape)}"
        )
    rr, cc = _target_lattice(out_h, out_w)
    p = params.data
    if kind == WarpKind.SIMILARITY:
        src_r = p[:, 0, None, None] + p[:, 2, None, None] * rr
        src_c = p[:, 1, None, None] + p[:, 2, None, None] * cc

        def rule(g):
            gp = np.zeros_like(p)
            g_r, g_c = g[..., 0], g[..., 1]
            gp[:, 0] = g_r.sum(axis=(1, 2))
            gp[:, 1] = g_c.sum(axis=(1, 2))
            gp[:, 2] = (g_r * rr).sum(axis=(1, 2)) + (g_c * cc).sum(axis=(1, 2))
            return ((params, gp),)

    else:
        det = p[:, 0] * p[:, 3] - p[:, 1] * p[:, 2]
        if np.any(np.abs(det) < 1e-12):
            raise DegenerateTransformError("affine_grid: singular 2x2 block in the batch")
        src_r = p[:, 0, None, None] * rr + p[:, 1, None, None] * cc + p[:, 4, None, None]
        src_c = p[:, 2, None, None] * rr + p[:, 3, None, None] * cc + p[:, 5, None, None]

        def rule(g):
            gp = np.zeros_like(p)
            g_r, g_c = g[..., 0], g[..., 1]
            gp[:, 0] = (g_r * rr).sum(axis=(1, 2))
            gp[:, 1] = (g_r * cc).sum(axis=(1, 2))
            gp[:, 2] = (g_c * rr).sum(axis=(1, 2))
            gp[:, 3] = (g_c * cc).sum(axis=(1, 2))
            gp[:, 4] = g_r.sum(axis=(1, 2))
            gp[:, 5] = g_c.sum(axis=(1, 2))
            return ((params, gp),)

    out = np.stack([src_r, src_c], axis=-1)
    return record_op((params,), out, rule)


def grid_sample(images: Tensor, grid: Tensor) -> Tensor:
    """Bilinearly sample (N, C, H, W) images at (N, h, w, 2) source positions.

    Positions outside [-1, 1] read zeros. Differentiable with respect to
    both image values and grid coordinates.
    """
    if images.ndim != 4:
        raise ShapeError(f"grid_sample: images must be NCHW, got {tuple(images.shape)}")
    if grid.ndim != 4 or grid.shape[3] != 2 or grid.shape[0] != images.shape[0]:
        raise ShapeError(
            f"grid_sample: grid must be (N, h, w, 2) with matching batch, got {tuple(grid.shape)}"
        )
    n, c, h, w = images.shape
    gh, gw = grid.shape[1], grid.shape[2]

    pr = (grid.data[..., 0] + 1.0) * ((h - 1) / 2.0)
    pc = (grid.data[..., 1] + 1.0) * ((w - 1) / 2.0)
    r0 = np.floor(pr)
    c0 = np.floor(pc)
    wr = pr - r0
    wc = pc - c0
    r0i = r0.astype(np.int64)
    c0i = c0.astype(np.int64)
    r1i = r0i + 1
    c1i = c0i + 1

    def corner(ri, ci):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = images.data[np.arange(n)[:, None, None], :, ri.clip(0, h - 1), ci.clip(0, w - 1)]
        vals = vals * valid[..., None]  # (N, gh, gw, C)
        return vals, valid

    v00, m00 = corner(r0i, c0i)
    v01, m01 = corner(r0i, c1i)
    v10, m10 = corner(r1i, c0i)
    v11, m11 = corner(r1i, c1i)

    w00 = (1.0 - wr) * (1.0 - wc)
    w01 = (1.0 - wr) * wc
    w10 = wr * (1.0 - wc)
    w11 = wr * wc

    out_nhwc = v00 * w00[..., None] + v01 * w01[..., None] + v10 * w10[..., None] + v11 * w11[..., None]
    out = out_nhwc.transpose(0, 3, 1, 2)

    def rule(g):
        gn = g.transpose(0, 2, 3, 1)  # (N, gh, gw, C)
        pairs = []
        if images.requires_grad:
            buf = np.zeros((n, h, w, c))
            nb = np.arange(n)[:, None, None]
            for vals_mask, ri, ci, wgt in (
                (m00, r0i, c0i, w00),
                (m01, r0i, c1i, w01),
                (m10, r1i, c0i, w10),
                (m11, r1i, c1i, w11),
            ):
                np.add.at(
                    buf,
                    (nb, ri.clip(0, h - 1), ci.clip(0, w - 1)),
                    gn * (wgt * vals_mask)[..., None],
                )
            pairs.append((images, buf.transpose(0, 3, 1, 2)))
        if grid.requires_grad:
            d_wr = (v10 - v00) * (1.0 - wc)[..., None] + (v11 - v01) * wc[..., None]
            d_wc = (v01 - v00) * (1.0 - wr)[..., None] + (v11 - v10) * wr[..., None]
            g_pr = (gn * d_wr).sum(axis=-1) * ((h - 1) / 2.0)
            g_pc = (gn * d_wc).sum(axis=-1) * ((w - 1) / 2.0)
            pairs.append((grid, np.stack([g_pr, g_pc], axis=-1)))
        return pairs

    return record_op((images, grid), out, rule)


def grid_generate(params: WarpParams, grid_h: int, grid_w: int) -> SamplingGrid:
    """Build the sampling grid of a single warp over a (grid_h, grid_w) lattice."""
    vec = reshape(params.values, (1, _PARAM_COUNT[params.kind]))
    coords = affine_grid(vec, params.kind, grid_h, grid_w)
    return SamplingGrid(grid_h, grid_w, reshape(coords, (grid_h, grid_w, 2)))


def bilinear_sample(image: Tensor, grid: SamplingGrid) -> Tensor:
    """Sample a single (C, H, W) image on a :class:`SamplingGrid`."""
    if image.ndim != 3:
        raise ShapeError(f"bilinear_sample: image must be CHW, got {tuple(image.shape)}")
    c, h, w = image.shape
    batched = reshape(image, (1, c, h, w))
    coords = reshape(grid.coords, (1, grid.grid_h, grid.grid_w, 2))
    out = grid_sample(batched, coords)
    return reshape(out, (c, grid.grid_h, grid.grid_w))


def params_to_bbox(params: WarpParams) -> BBoxParams:
    """Axis-aligned square box covered by a warp.

    Similarity parameters are read off directly. For an affine warp the
    four corners of the target square are mapped to the source, the tight
    axis-aligned hull is taken, and the result is squared by keeping the
    center and growing the shorter side to max(width, height).
    """
    if params.kind == WarpKind.SIMILARITY:
        t_r, t_c, s = (float(v) for v in params.values.data)
        return BBoxParams(t_r, t_c, s)
    a_rr, a_rc, a_cr, a_cc, t_r, t_c = (float(v) for v in params.values.data)
    corners_r = []
    corners_c = []
    for r in (-1.0, 1.0):
        for c in (-1.0, 1.0):
            corners_r.append(a_rr * r + a_rc * c + t_r)
            corners_c.append(a_cr * r + a_cc * c + t_c)
    r_lo, r_hi = min(corners_r), max(corners_r)
    c_lo, c_hi = min(corners_c), max(corners_c)
    side = max(r_hi - r_lo, c_hi - c_lo)
    return BBoxParams((r_lo + r_hi) / 2.0, (c_lo + c_hi) / 2.0, side / 2.0)


def bbox_to_pixels(box: BBoxParams, size: int) -> tuple[int, int, int, int]:
    """Clipped integer pixel extents (r0, r1, c0, c1), inclusive, of a box."""
    half = (size - 1) / 2.0
    r0 = int(np.floor((box.t_r - box.s + 1.0) * half))
    r1 = int(np.ceil((box.t_r + box.s + 1.0) * half))
    c0 = int(np.floor((box.t_c - box.s + 1.0) * half))
    c1 = int(np.ceil((box.t_c + box.s + 1.0) * half))
    clip = lambda v: max(0, min(size - 1, v))
    return clip(r0), clip(r1), clip(c0), clip(c1)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (H, W) or (C, H, W) array with align-corners bilinear interpolation."""
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"resize_bilinear: expected 2-d or 3-d input, got shape {tuple(arr.shape)}")
    if out_h < 2 or out_w < 2:
        raise ConfigError(f"resize target must be at least 2x2, got {out_h}x{out_w}")
    c, h, w = arr.shape
    rr, cc = _target_lattice(out_h, out_w)
    pr = (rr + 1.0) * ((h - 1) / 2.0)
    pc = (cc + 1.0) * ((w - 1) / 2.0)
    r0 = np.floor(pr).astype(np.int64).clip(0, max(h - 2, 0))
    c0 = np.floor(pc).astype(np.int64).clip(0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (pr - r0)[None]
    wc = (pc - c0)[None]
    v00 = arr[:, r0, c0]
    v01 = arr[:, r0, c1]
    v10 = arr[:, r1, c0]
    v11 = arr[:, r1, c1]
    out = (
        v00 * (1.0 - wr) * (1.0 - wc)
        + v01 * (1.0 - wr) * wc
        + v10 * wr * (1.0 - wc)
        + v11 * wr * wc
    )
    return out[0] if squeeze else out


def crop_boxes(images: np.ndarray, boxes: list[BBoxParams], out_size: int) -> np.ndarray:
    """Forward-only bilinear crops of (N, C, H, W) images at per-sample boxes."""
    params = np.array([[b.t_r, b.t_c, b.s] for b in boxes], dtype=np.float64)
    grid = affine_grid(Tensor(params), WarpKind.SIMILARITY, out_size, out_size)
    return grid_sample(Tensor(images), grid).data
