"""Synthetic tracking sequences: a textured target moving over a static
background among distractors, with optional occlusion.  Generation is fully
deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .head import Box


@dataclass
class SyntheticConfig:
    image_size: int = 128
    object_size: tuple[int, int] = (16, 28)   # target side range, pixels
    velocity: float = 2.0                     # speed magnitude, px/frame
    velocity_angle: float | None = None       # radians; None draws per seed
    jitter: float = 0.2                       # per-frame velocity noise std
    n_distractors: int = 3
    distractor_similarity: float = 0.4        # 0 = unrelated, 1 = identical
    occluder_prob: float = 0.0                # chance per frame to start one
    occluder_duration: int = 5
    n_frames: int = 60
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.object_size
        if not (4 <= lo <= hi < self.image_size // 2):
            raise ContractError("object size range must fit the image")
        if self.n_frames < 1:
            raise ContractError("need at least one frame")


def _texture(rng: np.random.Generator, h: int, w: int,
             base: np.ndarray) -> np.ndarray:
    """(3, h, w) patch: base color plus a fixed random pattern and a border."""
    pat = rng.uniform(-0.15, 0.15, (3, h, w))
    tex = np.clip(base[:, None, None] + pat, 0.0, 1.0)
    tex[:, 0, :] = tex[:, -1, :] = 0.95
    tex[:, :, 0] = tex[:, :, -1] = 0.95
    return tex


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.55, (3, size // 16, size // 16))
    return np.kron(coarse, np.ones((16, 16)))[:, :size, :size]


def _paste(canvas: np.ndarray, patch: np.ndarray, cx: float, cy: float) -> None:
    _, h, w = patch.shape
    size = canvas.shape[1]
    x0 = int(round(cx - w / 2))
    y0 = int(round(cy - h / 2))
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    dx1, dy1 = min(size, x0 + w), min(size, y0 + h)
    if dx1 <= dx0 or dy1 <= dy0:
        return
    canvas[:, dy0:dy1, dx0:dx1] = patch[:, sy0:sy0 + dy1 - dy0,
                                        sx0:sx0 + dx1 - dx0]


class _Mover:
    """Bouncing constant-velocity point with optional jitter."""

    def __init__(self, rng, size, half_w, half_h, speed, angle=None):
        self.size = size
        self.half_w, self.half_h = half_w, half_h
        margin_x, margin_y = half_w + 1, half_h + 1
        self.x = float(rng.uniform(margin_x, size - margin_x))
        self.y = float(rng.uniform(margin_y, size - margin_y))
        if angle is None:
            angle = rng.uniform(0, 2 * np.pi)
        self.vx = speed * np.cos(angle)
        self.vy = speed * np.sin(angle)

    def step(self, rng, jitter):
        if jitter > 0:
            self.vx += float(rng.normal(0, jitter))
            self.vy += float(rng.normal(0, jitter))
        self.x += self.vx
        self.y += self.vy
        lo_x, hi_x = self.half_w + 1, self.size - self.half_w - 1
        lo_y, hi_y = self.half_h + 1, self.size - self.half_h - 1
        if self.x < lo_x or self.x > hi_x:
            self.vx = -self.vx
            self.x = float(np.clip(self.x, lo_x, hi_x))
        if self.y < lo_y or self.y > hi_y:
            self.vy = -self.vy
            self.y = float(np.clip(self.y, lo_y, hi_y))


def generate_sequence(cfg: SyntheticConfig) -> tuple[np.ndarray, list[Box]]:
    """Render (frames, gt_boxes): frames (T, 3, H, W) float32 in [0, 1]."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    background = _smooth_background(rng, size)

    w = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    h = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    target_color = rng.uniform(0.6, 1.0, 3)
    target_tex = _texture(rng, h, w, target_color)
    target = _Mover(rng, size, w / 2, h / 2, cfg.velocity, cfg.velocity_angle)

    distractors = []
    for _ in range(cfg.n_distractors):
        dw = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        dh = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        blend = cfg.distractor_similarity
        color = blend * target_color + (1 - blend) * rng.uniform(0.0, 0.6, 3)
        tex = _texture(rng, dh, dw, color)
        distractors.append((tex, _Mover(rng, size, dw / 2, dh / 2,
                                        cfg.velocity)))

    occluder_tex = np.full((3, h + 6, w + 6), 0.5)
    occluded_left = 0

    frames = np.empty((cfg.n_frames, 3, size, size), dtype=np.float32)
    boxes: list[Box] = []
    for t in range(cfg.n_frames):
        if t > 0:
            target.step(rng, cfg.jitter)
            for _, mover in distractors:
                mover.step(rng, cfg.jitter)
        canvas = background.copy()
        for tex, mover in distractors:
            _paste(canvas, tex, mover.x, mover.y)
        _paste(canvas, target_tex, target.x, target.y)
        if occluded_left > 0:
            _paste(canvas, occluder_tex, target.x, target.y)
            occluded_left -= 1
        elif cfg.occluder_prob > 0 and rng.uniform() < cfg.occluder_prob:
            occluded_left = cfg.occluder_duration
        frames[t] = canvas.astype(np.float32)
        boxes.append(Box(target.x, target.y, float(w), float(h)))
    return frames, boxes
