"""Session-level tracking: cropping with coordinate transforms, hidden-state
memory with uniform sampling and averaging, scheduled template updates, and
eviction.  The model is consulted through two calls only (scan a template
crop into states, locate the target in a search crop), so a stub model can
drive every session-level test.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .block import BlockState
from .errors import ContractError
from .head import Box
from .scan import HiddenState

log = logging.getLogger(__name__)


@dataclass
class CropTransform:
    """Affine map between crop pixels and image pixels: square crop of side
    ``side`` starting at (x0, y0) in the image, resized to ``out`` pixels."""

    x0: float
    y0: float
    side: float
    out: int

    @property
    def scale(self) -> float:
        return self.out / self.side

    def to_image(self, x: float, y: float) -> tuple[float, float]:
        return self.x0 + x / self.scale, self.y0 + y / self.scale

    def to_crop(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x0) * self.scale, (y - self.y0) * self.scale

    def box_to_image(self, box: Box) -> Box:
        cx, cy = self.to_image(box.cx, box.cy)
        return Box(cx, cy, box.w / self.scale, box.h / self.scale)

    def box_to_crop(self, box: Box) -> Box:
        cx, cy = self.to_crop(box.cx, box.cy)
        return Box(cx, cy, box.w * self.scale, box.h * self.scale)


def _bilinear_resample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                       fill: np.ndarray) -> np.ndarray:
    """Sample image (C, H, W) at pixel-center coordinates (ys x xs grid);
    samples whose center falls outside the image read the fill value."""
    c, h, w = image.shape
    fx = xs - 0.5
    fy = ys - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = (fx - x0)[None, :]
    wy = (fy - y0)[:, None]

    def gather(yi, xi):
        inside = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        vals = image[:, np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
        return np.where(inside, vals, fill[:, None, None])

    out = ((1 - wy) * (1 - wx) * gather(y0, x0)
           + (1 - wy) * wx * gather(y0, x0 + 1)
           + wy * (1 - wx) * gather(y0 + 1, x0)
           + wy * wx * gather(y0 + 1, x0 + 1))
    center_out = ((ys < 0) | (ys > h))[:, None] | ((xs < 0) | (xs > w))[None, :]
    return np.where(center_out, fill[:, None, None], out).astype(image.dtype)


def crop_region(image: np.ndarray, box: Box, area_factor: float,
                out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Square crop of ``area_factor`` times the box area, centered on the box,
    resized to out_size; out-of-image regions read the image mean.  A box
    fully outside the image is clamped back to at least one pixel of overlap.
    """
    c, h, w = image.shape
    cx = float(np.clip(box.cx, 1 - box.w / 2, w - 1 + box.w / 2))
    cy = float(np.clip(box.cy, 1 - box.h / 2, h - 1 + box.h / 2))
    side = float(np.sqrt(area_factor * box.w * box.h))
    side = max(side, 2.0)
    x0, y0 = cx - side / 2, cy - side / 2
    tf = CropTransform(x0, y0, side, out_size)
    xs = x0 + (np.arange(out_size) + 0.5) * side / out_size
    ys = y0 + (np.arange(out_size) + 0.5) * side / out_size
    fill = image.reshape(c, -1).mean(axis=1)
    return _bilinear_resample(image, xs, ys, fill), tf


def sample_memory_indices(memory_size: int, n_sample: int) -> list[int]:
    """Evenly spaced 1-based memory indices, deduplicated preserving order
    when the memory is smaller than the sample count."""
    if memory_size < 1:
        raise ContractError("memory must be non-empty")
    if memory_size == 1 or n_sample == 1:
        return [1]
    raw = [i * (memory_size - 1) // (n_sample - 1) + 1 for i in range(n_sample)]
    seen: dict[int, None] = {}
    for idx in raw:
        seen.setdefault(idx)
    return list(seen)


def average_states(states: list[list[BlockState]]) -> list[BlockState]:
    """Elementwise arithmetic mean per block and direction."""
    if not states:
        raise ContractError("cannot average an empty state list")
    n_blocks = len(states[0])
    out = []
    for i in range(n_blocks):
        fwd = np.mean([s[i].forward.h for s in states], axis=0)
        bwd = np.mean([s[i].backward.h for s in states], axis=0)
        out.append(BlockState(HiddenState(fwd, tag="post-interaction"),
                              HiddenState(bwd, tag="post-interaction")))
    return out


@dataclass
class MemoryEntry:
    frame_index: int
    states: list[BlockState]


def evict(memory: list[MemoryEntry]) -> None:
    """Drop the later element of the adjacent pair whose frame indexes are
    closest; ties break toward the later pair.  The initial-frame entry is
    structurally safe because only later pair members are removed."""
    best_gap, best_pos = None, None
    for i in range(len(memory) - 1):
        gap = memory[i + 1].frame_index - memory[i].frame_index
        if best_gap is None or gap <= best_gap:
            best_gap, best_pos = gap, i
    del memory[best_pos + 1]


@dataclass
class TrackerSettings:
    update_interval: int = 20
    memory_cap: int = 50
    n_sample: int = 10


@dataclass
class TraceRow:
    frame_index: int
    box: Box
    cls_peak: float
    memory_size: int
    scan_count: int


@dataclass
class TrackSession:
    model: object
    settings: TrackerSettings
    active_states: list[BlockState]
    memory: list[MemoryEntry]
    frame_counter: int
    last_box: Box
    scan_count: int
    template_ordinal: int
    trace: list[TraceRow] = field(default_factory=list)

    def check_invariants(self) -> None:
        if len(self.memory) > self.settings.memory_cap:
            raise ContractError("memory exceeded its cap")
        idx = [e.frame_index for e in self.memory]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ContractError("memory frame indexes are not increasing")


def init_session(frame: np.ndarray, box: Box, model,
                 settings: TrackerSettings | None = None) -> TrackSession:
    """Scan the initial template from the learnable states and seed the
    memory with the resulting per-block states at frame index 1."""
    settings = settings or TrackerSettings()
    cfg = model.cfg
    crop, tf = crop_region(frame, box, cfg.template_factor ** 2,
                           cfg.template_size)
    states = model.template_states(crop, tf.box_to_crop(box), None, 0)
    return TrackSession(
        model=model, settings=settings, active_states=states,
        memory=[MemoryEntry(1, states)], frame_counter=1, last_box=box,
        scan_count=1, template_ordinal=1)


def track_frame(session: TrackSession, frame: np.ndarray) -> Box:
    """Process one frame: crop around the previous box, seed the backbone
    with the active states, decode, and update the template on schedule."""
    cfg = session.model.cfg
    session.frame_counter += 1
    crop, tf = crop_region(frame, session.last_box, cfg.search_factor ** 2,
                           cfg.search_size)
    box_crop, peak = session.model.search_box(crop, session.active_states)
    box = tf.box_to_image(box_crop)
    session.last_box = box
    if session.frame_counter % session.settings.update_interval == 0:
        update_template(session, frame, box)
    session.check_invariants()
    session.trace.append(TraceRow(session.frame_counter, box, peak,
                                  len(session.memory), session.scan_count))
    return box


def update_template(session: TrackSession, frame: np.ndarray, box: Box) -> None:
    """Scan a new template at the predicted box seeded by the current active
    states, push it into memory, evict past the cap, then set the active
    states to the mean of the uniformly sampled memory."""
    cfg = session.model.cfg
    if not np.isfinite([box.cx, box.cy, box.w, box.h]).all() or box.w * box.h < 1:
        log.warning("skipping template update at frame %d: degenerate box",
                    session.frame_counter)
        return
    crop, tf = crop_region(frame, box, cfg.template_factor ** 2,
                           cfg.template_size)
    states = session.model.template_states(
        crop, tf.box_to_crop(box), session.active_states,
        session.template_ordinal)
    session.scan_count += 1
    session.template_ordinal += 1
    session.memory.append(MemoryEntry(session.frame_counter, states))
    if len(session.memory) > session.settings.memory_cap:
        evict(session.memory)
    picked = sample_memory_indices(len(session.memory),
                                   session.settings.n_sample)
    session.active_states = average_states(
        [session.memory[i - 1].states for i in picked])


def track_sequence(model, frames: np.ndarray, init_box: Box,
                   settings: TrackerSettings | None = None) -> TrackSession:
    """Run a full session over frames; frame 0 initializes, the rest are
    tracked.  Returns the finished session (predictions in the trace)."""
    session = init_session(frames[0], init_box, model, settings)
    for frame in frames[1:]:
        track_frame(session, frame)
    return session


TRACE_FIELDS = ["frame_index", "x", "y", "w", "h", "cls_peak", "memory_size",
                "scan_count"]


def write_trace(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for r in rows:
            writer.writerow([r.frame_index,
                             f"{r.box.cx:.4f}", f"{r.box.cy:.4f}",
                             f"{r.box.w:.4f}", f"{r.box.h:.4f}",
                             f"{r.cls_peak:.6f}", r.memory_size, r.scan_count])
