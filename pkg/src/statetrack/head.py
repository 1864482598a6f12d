"""Three-branch fully-convolutional box head, box encoding/decoding on the
token grid, the Gaussian classification target, and the training losses
(weighted focal + l1 + generalized IoU) with their analytic gradients.

Map layout: cls is (..., gh, gw) indexed [row=y][col=x]; offset and size are
(..., 2, gh, gw) with channel 0 = x / width and channel 1 = y / height.
Decoding follows the verbatim pairing (width scaled by the search height,
height by the width); ``size_axis_swap`` flips that pairing.  All presets are
square so the flag is observable only on non-square configs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError
from .scan import outer_grad

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
GAUSS_MIN_OVERLAP = 0.7
GAUSS_SIGMA_FLOOR = 0.5


@dataclass
class Box:
    """Center-format box: (cx, cy) center and (w, h) extent, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box extent must be positive, got {self.w}x{self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# 3x3 same-padding conv2d with im2col, supporting leading batch dims


def _im2col(x: np.ndarray) -> np.ndarray:
    """x: (..., C, H, W) -> columns (..., H*W, C*9) for a 3x3 window."""
    c, h, w = x.shape[-3:]
    pad = np.zeros(x.shape[:-2] + (h + 2, w + 2), dtype=x.dtype)
    pad[..., 1:h + 1, 1:w + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(-2, -1))
    # win: (..., C, H, W, 3, 3) -> (..., H, W, C, 3, 3)
    win = np.moveaxis(win, -5, -3)
    return win.reshape(x.shape[:-3] + (h * w, c * 9))


def _col2im(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    dwin = dcols.reshape(dcols.shape[:-2] + (h, w, c, 3, 3))
    dwin = np.moveaxis(dwin, -3, -5)  # (..., C, H, W, 3, 3)
    dpad = np.zeros(dcols.shape[:-2] + (c, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dpad[..., ky:ky + h, kx:kx + w] += dwin[..., ky, kx]
    return dpad[..., 1:h + 1, 1:w + 1]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 same conv; x: (..., C, H, W); w: (C_out, C*9); returns (out, cols)."""
    c, h, wd = x.shape[-3:]
    cols = _im2col(x)
    out = cols @ w.T + b
    out = np.moveaxis(out.reshape(x.shape[:-3] + (h, wd, w.shape[0])), -1, -3)
    return out, cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray,
                    c_in: int, h: int, wd: int):
    dmat = np.moveaxis(dout, -3, -1).reshape(dout.shape[:-3] + (h * wd, w.shape[0]))
    dw = outer_grad(dmat, cols)
    db = dmat.reshape(-1, w.shape[0]).sum(axis=0)
    dcols = dmat @ w
    dx = _col2im(dcols, c_in, h, wd)
    return dx, dw, db


@dataclass
class Conv2dParams:
    w: np.ndarray  # (C_out, C_in*9)
    b: np.ndarray  # (C_out,)


@dataclass
class HeadParams:
    """Three branches of four stacked 3x3 convs; ReLU between layers and a
    sigmoid on each branch output."""

    cls: list[Conv2dParams]
    offset: list[Conv2dParams]
    size: list[Conv2dParams]

    @classmethod
    def init(cls, d_model: int, width: int, rng: np.random.Generator,
             dtype=np.float32) -> "HeadParams":
        def branch(out_ch: int, final_bias: float) -> list[Conv2dParams]:
            dims = [d_model, width, width, width, out_ch]
            layers = []
            for i in range(4):
                fan_in = dims[i] * 9
                std = 0.01 if i == 3 else math.sqrt(2.0 / fan_in)
                w = rng.normal(0, std, (dims[i + 1], fan_in)).astype(dtype)
                b = np.zeros(dims[i + 1], dtype=dtype)
                if i == 3:
                    b[:] = final_bias
                layers.append(Conv2dParams(w, b))
            return layers

        return cls(cls=branch(1, -2.0),  # classification prior below 0.5
                   offset=branch(2, 0.0),
                   size=branch(2, 0.0))

    def named(self, prefix: str = ""):
        for f in fields(self):
            for i, layer in enumerate(getattr(self, f.name)):
                yield f"{prefix}{f.name}.{i}.w", layer.w
                yield f"{prefix}{f.name}.{i}.b", layer.b

    def zeros_like(self) -> "HeadParams":
        def z(layers):
            return [Conv2dParams(np.zeros_like(l.w), np.zeros_like(l.b))
                    for l in layers]
        return HeadParams(z(self.cls), z(self.offset), z(self.size))


@dataclass
class HeadMaps:
    cls: np.ndarray     # (..., gh, gw) in (0, 1)
    offset: np.ndarray  # (..., 2, gh, gw) in (0, 1)
    size: np.ndarray    # (..., 2, gh, gw) in (0, 1)


@dataclass
class _BranchTape:
    cols: list[np.ndarray]
    pre_act: list[np.ndarray]
    sig_out: np.ndarray


@dataclass
class HeadTape:
    params: HeadParams
    grid: tuple[int, int]
    branches: dict[str, _BranchTape]


def _sigmoid(x):
    half = np.asarray(0.5, dtype=x.dtype)
    return half * (np.tanh(half * x) + np.asarray(1, dtype=x.dtype))


def _branch_forward(x, layers):
    cols_list, pre_list = [], []
    cur = x
    for i, layer in enumerate(layers):
        out, cols = conv2d(cur, layer.w, layer.b)
        cols_list.append(cols)
        pre_list.append(out)
        cur = np.maximum(out, 0) if i < 3 else out
    sig = _sigmoid(cur)
    return sig, _BranchTape(cols_list, pre_list, sig)


def _branch_backward(dsig, tape: _BranchTape, layers, d_model, grid):
    gh, gw = grid
    sig = tape.sig_out
    dcur = dsig * sig * (1 - sig)
    grads = []
    widths = [d_model] + [l.b.shape[0] for l in layers[:-1]]
    for i in range(3, -1, -1):
        if i < 3:
            dcur = dcur * (tape.pre_act[i] > 0)
        dx, dw, db = conv2d_backward(dcur, tape.cols[i], layers[i].w,
                                     widths[i], gh, gw)
        grads.append(Conv2dParams(dw, db))
        dcur = dx
    return dcur, grads[::-1]


def head_forward(search_features: np.ndarray, grid: tuple[int, int],
                 params: HeadParams, with_tape: bool = False):
    """search_features: (..., L_s, D_model) with L_s == gh * gw, row-major."""
    gh, gw = grid
    if search_features.shape[-2] != gh * gw:
        raise ContractError(
            f"token count {search_features.shape[-2]} != grid {gh}x{gw}")
    d_model = search_features.shape[-1]
    x = np.moveaxis(
        search_features.reshape(search_features.shape[:-2] + (gh, gw, d_model)),
        -1, -3)
    cls_map, t_cls = _branch_forward(x, params.cls)
    off_map, t_off = _branch_forward(x, params.offset)
    size_map, t_size = _branch_forward(x, params.size)
    maps = HeadMaps(cls_map[..., 0, :, :], off_map, size_map)
    if not with_tape:
        return maps
    tape = HeadTape(params, grid, {"cls": t_cls, "offset": t_off, "size": t_size})
    return maps, tape


def head_backward(tape: HeadTape, dmaps: HeadMaps):
    gh, gw = tape.grid
    p = tape.params
    d_model = p.cls[0].w.shape[1] // 9
    dx_cls, g_cls = _branch_backward(dmaps.cls[..., None, :, :],
                                     tape.branches["cls"], p.cls, d_model,
                                     tape.grid)
    dx_off, g_off = _branch_backward(dmaps.offset, tape.branches["offset"],
                                     p.offset, d_model, tape.grid)
    dx_size, g_size = _branch_backward(dmaps.size, tape.branches["size"],
                                       p.size, d_model, tape.grid)
    dx = dx_cls + dx_off + dx_size
    dfeats = np.moveaxis(dx, -3, -1).reshape(dx.shape[:-3] + (gh * gw, d_model))
    return dfeats, HeadParams(g_cls, g_off, g_size)


# ---------------------------------------------------------------------------
# box encoding / decoding on the token grid


def decode_box(maps: HeadMaps, patch: int, search_hw: tuple[int, int],
               size_axis_swap: bool = False, cell: tuple[int, int] | None = None,
               ) -> Box:
    """Peak cell (argmax of cls, row-major tie-break) plus sub-cell offset and
    normalized size.  ``cell`` pins the cell instead of taking the argmax,
    which is how training evaluates the regression maps at the target cell."""
    hs, ws = search_hw
    if cell is None:
        flat = int(np.argmax(maps.cls))
        yc, xc = divmod(flat, maps.cls.shape[-1])
    else:
        xc, yc = cell
    x = (xc + float(maps.offset[0, yc, xc])) * patch
    y = (yc + float(maps.offset[1, yc, xc])) * patch
    if size_axis_swap:
        w = float(maps.size[0, yc, xc]) * ws
        h = float(maps.size[1, yc, xc]) * hs
    else:
        w = float(maps.size[0, yc, xc]) * hs
        h = float(maps.size[1, yc, xc]) * ws
    return Box(x, y, w, h)


def peak_cell(box: Box, patch: int, grid: tuple[int, int]) -> tuple[int, int]:
    gh, gw = grid
    xc = min(max(int(box.cx // patch), 0), gw - 1)
    yc = min(max(int(box.cy // patch), 0), gh - 1)
    return xc, yc


def encode_box(box: Box, patch: int, grid: tuple[int, int],
               search_hw: tuple[int, int], size_axis_swap: bool = False):
    """Inverse of decode_box at the quantized peak cell: returns the cell,
    the fractional offset pair and the normalized size pair."""
    hs, ws = search_hw
    xc, yc = peak_cell(box, patch, grid)
    off = (box.cx / patch - xc, box.cy / patch - yc)
    if size_axis_swap:
        size = (box.w / ws, box.h / hs)
    else:
        size = (box.w / hs, box.h / ws)
    return (xc, yc), off, size


def gaussian_radius(height: float, width: float,
                    min_overlap: float = GAUSS_MIN_OVERLAP) -> float:
    """Largest center displacement keeping IoU >= min_overlap (the standard
    three-case quadratic bound used by heatmap heads)."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (-b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def gaussian_target(gt_box: Box, grid: tuple[int, int], patch: int) -> np.ndarray:
    """Size-adaptive Gaussian centered on the quantized peak cell, so the
    peak value is exactly 1 and focal positives are well defined."""
    gh, gw = grid
    if not (0 <= gt_box.cx < gw * patch and 0 <= gt_box.cy < gh * patch):
        raise ContractError("gt center lies outside the search region")
    xc, yc = peak_cell(gt_box, patch, grid)
    radius = gaussian_radius(gt_box.h / patch, gt_box.w / patch)
    sigma = max(GAUSS_SIGMA_FLOOR, (2 * radius + 1) / 6)
    ys, xs = np.mgrid[0:gh, 0:gw]
    d2 = (xs - xc) ** 2 + (ys - yc) ** 2
    return np.exp(-d2 / (2 * sigma ** 2))


# ---------------------------------------------------------------------------
# losses


def focal_loss(pred: np.ndarray, target: np.ndarray,
               alpha: float = FOCAL_ALPHA, beta: float = FOCAL_BETA):
    """Weighted focal loss for Gaussian heatmaps; returns (loss, dpred)."""
    eps = 1e-12
    p = np.clip(pred.astype(np.float64), eps, 1 - eps)
    pos = target >= 1.0
    n_pos = max(1, int(np.count_nonzero(pos)))
    neg_w = np.power(1 - target, beta)
    pos_term = np.power(1 - p, alpha) * np.log(p)
    neg_term = neg_w * np.power(p, alpha) * np.log(1 - p)
    loss = -(np.sum(pos_term[pos]) + np.sum(neg_term[~pos])) / n_pos

    dpos = alpha * np.power(1 - p, alpha - 1) * np.log(p) - np.power(1 - p, alpha) / p
    dneg = -neg_w * (alpha * np.power(p, alpha - 1) * np.log(1 - p)
                     - np.power(p, alpha) / (1 - p))
    dpred = np.where(pos, dpos, dneg) / n_pos
    return float(loss), dpred


def giou(pred: np.ndarray, gt: np.ndarray):
    """Generalized IoU of two corner-format boxes; returns (giou, dpred).

    pred, gt: (x0, y0, x1, y1) with x1 > x0, y1 > y0.  Gradients are the
    piecewise-smooth derivatives w.r.t. pred.
    """
    px0, py0, px1, py1 = (float(v) for v in pred)
    gx0, gy0, gx1, gy1 = (float(v) for v in gt)
    iw = min(px1, gx1) - max(px0, gx0)
    ih = min(py1, gy1) - max(py0, gy0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_p = (px1 - px0) * (py1 - py0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    union = area_p + area_g - inter
    cw = max(px1, gx1) - min(px0, gx0)
    ch = max(py1, gy1) - min(py0, gy0)
    hull = cw * ch
    iou_v = inter / union
    value = iou_v - (hull - union) / hull

    # d inter / d pred
    dI = np.zeros(4)
    if iw > 0 and ih > 0:
        dI[0] = -ih if px0 > gx0 else 0.0
        dI[2] = ih if px1 < gx1 else 0.0
        dI[1] = -iw if py0 > gy0 else 0.0
        dI[3] = iw if py1 < gy1 else 0.0
    dA = np.array([-(py1 - py0), -(px1 - px0), (py1 - py0), (px1 - px0)])
    dU = dA - dI
    dHull = np.zeros(4)
    dHull[0] = -ch if px0 < gx0 else 0.0
    dHull[2] = ch if px1 > gx1 else 0.0
    dHull[1] = -cw if py0 < gy0 else 0.0
    dHull[3] = cw if py1 > gy1 else 0.0
    dIoU = (dI * union - inter * dU) / union ** 2
    dPenalty = ((dHull - dU) * hull - (hull - union) * dHull) / hull ** 2
    return float(value), dIoU - dPenalty


@dataclass
class LossBreakdown:
    total: float
    focal: float
    l1: float
    giou: float


def training_loss(maps: HeadMaps, gt_map: np.ndarray, gt_box: Box,
                  patch: int, search_hw: tuple[int, int],
                  lambda_l1: float = 2.0, lambda_giou: float = 5.0,
                  size_axis_swap: bool = False):
    """Full objective for one sample; the regression terms are evaluated at
    the ground-truth peak cell.  Returns (breakdown, dmaps)."""
    if gt_box.w <= 0 or gt_box.h <= 0:
        raise ContractError("degenerate ground-truth box")
    hs, ws = search_hw
    grid = maps.cls.shape[-2:]
    f_loss, dcls = focal_loss(maps.cls, gt_map)

    xc, yc = peak_cell(gt_box, patch, grid)
    pred = decode_box(maps, patch, search_hw, size_axis_swap, cell=(xc, yc))
    norm = np.array([ws, hs, ws, hs], dtype=np.float64)
    pb = pred.as_array() / norm
    gb = gt_box.as_array() / norm

    diff = pb - gb
    l1 = float(np.mean(np.abs(diff)))
    dl1_db = np.sign(diff) / 4.0

    pc = np.array([pb[0] - pb[2] / 2, pb[1] - pb[3] / 2,
                   pb[0] + pb[2] / 2, pb[1] + pb[3] / 2])
    gc = np.array([gb[0] - gb[2] / 2, gb[1] - gb[3] / 2,
                   gb[0] + gb[2] / 2, gb[1] + gb[3] / 2])
    giou_v, dgiou_dc = giou(pc, gc)
    # corners -> center/extent chain
    dgiou_db = np.array([
        dgiou_dc[0] + dgiou_dc[2],
        dgiou_dc[1] + dgiou_dc[3],
        (-dgiou_dc[0] + dgiou_dc[2]) / 2,
        (-dgiou_dc[1] + dgiou_dc[3]) / 2,
    ])

    db = lambda_l1 * dl1_db - lambda_giou * dgiou_db  # loss uses (1 - giou)
    db_pixels = db / norm

    doff = np.zeros_like(maps.offset)
    dsize = np.zeros_like(maps.size)
    doff[0, yc, xc] = db_pixels[0] * patch
    doff[1, yc, xc] = db_pixels[1] * patch
    if size_axis_swap:
        dsize[0, yc, xc] = db_pixels[2] * ws
        dsize[1, yc, xc] = db_pixels[3] * hs
    else:
        dsize[0, yc, xc] = db_pixels[2] * hs
        dsize[1, yc, xc] = db_pixels[3] * ws

    total = f_loss + lambda_l1 * l1 + lambda_giou * (1 - giou_v)
    breakdown = LossBreakdown(total, f_loss, l1, 1 - giou_v)
    return breakdown, HeadMaps(dcls.astype(maps.cls.dtype),
                               doff.astype(maps.offset.dtype),
                               dsize.astype(maps.size.dtype))
