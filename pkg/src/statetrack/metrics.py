"""Tracking metrics: average overlap and thresholded success rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .head import Box, iou


@dataclass
class Metrics:
    ao: float
    sr50: float
    sr75: float
    overlaps: np.ndarray  # IoU per frame

    def __post_init__(self):
        if not (0 <= self.ao <= 1 and 0 <= self.sr50 <= 1 and 0 <= self.sr75 <= 1):
            raise ContractError("metrics out of [0, 1]")
        if self.sr75 > self.sr50 + 1e-12:
            raise ContractError("SR_0.75 cannot exceed SR_0.5")


def compute_metrics(pred_boxes: list[Box], gt_boxes: list[Box]) -> Metrics:
    """AO = mean IoU; SR_tau = fraction of frames with IoU > tau."""
    if len(pred_boxes) != len(gt_boxes):
        raise ContractError(
            f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground truths")
    if not pred_boxes:
        raise ContractError("empty sequences have no metrics")
    overlaps = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    return Metrics(float(overlaps.mean()),
                   float(np.mean(overlaps > 0.5)),
                   float(np.mean(overlaps > 0.75)),
                   overlaps)
