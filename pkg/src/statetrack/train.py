"""Desk-scale trainer: sequence pool sampling, the AdamW update with cosine
learning-rate decay to zero, and the training loop with NaN abort."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError
from .head import Box
from .model import Model, ModelConfig, TrainingSample
from .synth import SyntheticConfig, generate_sequence
from .tracker import crop_region


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 16
    base_lr: float = 4e-5     # block-stack rate; the head runs 10x higher
    head_lr: float = 4e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pool_sequences: int = 32
    center_jitter: float = 0.10   # search-crop center shift, fraction of side
    scale_jitter: float = 0.25    # log-uniform crop scale range
    seed: int = 0


def cosine_lr(step: int, total: int, peak: float) -> float:
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Decoupled-weight-decay adaptive optimizer over a flat param dict."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr_scale: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * np.square(g)
            lr = (c.head_lr if name.startswith("head.") else c.base_lr) * lr_scale
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p
            p -= (lr * update).astype(p.dtype)


def build_pool(synth_cfg: SyntheticConfig, count: int,
               rng: np.random.Generator) -> list[tuple[np.ndarray, list[Box]]]:
    seeds = rng.integers(0, 2 ** 31 - 1, size=count)
    return [generate_sequence(replace(synth_cfg, seed=int(s))) for s in seeds]


def draw_sample(pool, cfg: ModelConfig, train_cfg: TrainConfig,
                rng: np.random.Generator) -> TrainingSample:
    """One training unit: k templates cropped at their ground-truth boxes and
    a later search frame cropped around a jittered box, so the target sits
    off-center and localization has something to learn."""
    frames, boxes = pool[int(rng.integers(len(pool)))]
    k = cfg.n_templates
    idx = np.sort(rng.choice(len(frames), size=k + 1, replace=False))
    templates, t_boxes = [], []
    for i in idx[:k]:
        crop, tf = crop_region(frames[i], boxes[i], cfg.template_factor ** 2,
                               cfg.template_size)
        templates.append(crop)
        t_boxes.append(tf.box_to_crop(boxes[i]))

    s_idx = int(idx[-1])
    gt = boxes[s_idx]
    for attempt in range(8):
        side = cfg.search_factor * math.sqrt(gt.w * gt.h)
        shift = 0.0 if attempt == 7 else train_cfg.center_jitter
        scale = 1.0 if attempt == 7 else math.exp(
            rng.uniform(-train_cfg.scale_jitter, train_cfg.scale_jitter))
        anchor = Box(gt.cx + float(rng.uniform(-shift, shift)) * side,
                     gt.cy + float(rng.uniform(-shift, shift)) * side,
                     gt.w * scale, gt.h * scale)
        crop, tf = crop_region(frames[s_idx], anchor, cfg.search_factor ** 2,
                               cfg.search_size)
        gt_crop = tf.box_to_crop(gt)
        margin = cfg.patch / 2
        if (margin <= gt_crop.cx <= cfg.search_size - margin
                and margin <= gt_crop.cy <= cfg.search_size - margin):
            return TrainingSample(np.stack(templates), t_boxes, crop, gt_crop)
    raise NumericError("could not place the target inside the search crop")


@dataclass
class TrainRow:
    step: int
    lr_scale: float
    total: float
    focal: float
    l1: float
    giou: float


def train(model: Model, train_cfg: TrainConfig, synth_cfg: SyntheticConfig,
          log_every: int = 0) -> list[TrainRow]:
    """Run the training loop; deterministic per seed.  Raises NumericError
    with a diagnostic if the loss leaves the finite domain."""
    from .model import flatten_params

    rng = np.random.default_rng(train_cfg.seed)
    pool = build_pool(synth_cfg, train_cfg.pool_sequences, rng)
    params = flatten_params(model.params)
    opt = AdamW(params, train_cfg)
    history: list[TrainRow] = []
    for step in range(train_cfg.steps):
        samples = [draw_sample(pool, model.cfg, train_cfg, rng)
                   for _ in range(train_cfg.batch_size)]
        breakdown, grads = model.batch_loss_and_grads(samples)
        if not math.isfinite(breakdown.total):
            raise NumericError(
                f"non-finite loss at step {step}: total={breakdown.total}, "
                f"focal={breakdown.focal}, l1={breakdown.l1}, "
                f"giou={breakdown.giou}")
        scale = 0.5 * (1.0 + math.cos(math.pi * step / train_cfg.steps))
        opt.step(params, grads, scale)
        row = TrainRow(step, scale, breakdown.total, breakdown.focal,
                       breakdown.l1, breakdown.giou)
        history.append(row)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  lr_scale {scale:.3f}  "
                  f"loss {breakdown.total:.4f}  focal {breakdown.focal:.4f}  "
                  f"l1 {breakdown.l1:.4f}  giou {breakdown.giou:.4f}")
    return history
