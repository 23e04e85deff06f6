"""Task metrics and the clamped one-step reward."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor_core import RejectedInputError

SCORE_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    ymin: float
    xmin: float
    ymax: float
    xmax: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.ymin < self.ymax and self.xmin < self.xmax):
            raise RejectedInputError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.ymax - self.ymin) * (self.xmax - self.xmin)

    def coords(self):
        return (self.ymin, self.xmin, self.ymax, self.xmax)


def iou(a: Box, b: Box) -> float:
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    return float(inter / (a.area + b.area - inter))


def iou_matrix(gt, preds) -> np.ndarray:
    return np.array([[iou(g, p) for p in preds] for g in gt]).reshape(len(gt), len(preds))


def greedy_match(gt, preds) -> dict[int, int]:
    """gt index -> pred index, taking the highest remaining IoU first.

    Ties break on the lowest (gt, pred) index pair; zero-overlap pairs are
    never matched.
    """
    ious = iou_matrix(gt, preds)
    matches = {}
    while ious.size and ious.max() > 0:
        g, p = np.unravel_index(np.argmax(ious), ious.shape)  # first max = lexicographic tie-break
        matches[int(g)] = int(p)
        ious[g, :] = -1
        ious[:, p] = -1
    return matches


def box_overlap_metric(gt, preds) -> float:
    """Average over ground-truth boxes of the IoU with the greedily matched
    prediction (score > 0.5); unmatched ground truth scores 0.

    With no ground truth the frame scores 1 if nothing survives the score
    filter and 0 otherwise.
    """
    kept = [p for p in preds if p.score > SCORE_THRESHOLD]
    if not gt:
        return 0.0 if kept else 1.0
    matches = greedy_match(gt, kept)
    return sum(iou(gt[g], kept[p]) for g, p in matches.items()) / len(gt)


def _check_masks(gt, pred):
    if gt.shape != pred.shape:
        raise RejectedInputError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return gt.astype(bool), pred.astype(bool)


def mask_miou(gt, pred) -> float:
    """Foreground intersection-over-union (the J measure); 1.0 if both empty."""
    gt, pred = _check_masks(gt, pred)
    union = np.count_nonzero(gt | pred)
    if union == 0:
        return 1.0
    return np.count_nonzero(gt & pred) / union


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 8-neighbour; the frame edge is not a boundary."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, np.ones((3, 3), bool), border_value=1)


def _disk(radius):
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def boundary_f_measure(gt, pred, tolerance_px: int = 1) -> float:
    gt, pred = _check_masks(gt, pred)
    gb, pb = mask_boundary(gt), mask_boundary(pred)
    if not gb.any() and not pb.any():
        return 1.0
    if not gb.any() or not pb.any():
        return 0.0
    disk = _disk(tolerance_px)
    gt_zone = ndimage.binary_dilation(gb, disk) if tolerance_px else gb
    pred_zone = ndimage.binary_dilation(pb, disk) if tolerance_px else pb
    precision = np.count_nonzero(pb & gt_zone) / np.count_nonzero(pb)
    recall = np.count_nonzero(gb & pred_zone) / np.count_nonzero(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def td0_reward(f_curr: float, f_prev: float) -> float:
    """max(0, f_t - f_{t-1}): credit only for improving on the stale prediction."""
    return max(0.0, f_curr - f_prev)


# -- ground-truth text files ---------------------------------------------------------

def format_boxes(boxes, with_scores=False) -> str:
    parts = []
    for b in boxes:
        vals = b.coords() + ((b.score,) if with_scores else ())
        parts.append(" ".join(f"{v:.6f}" for v in vals))
    return " ".join(parts)


def parse_boxes(line: str, with_scores=False) -> list[Box]:
    vals = [float(v) for v in line.split()]
    step = 5 if with_scores else 4
    if len(vals) % step:
        raise RejectedInputError(f"box line has {len(vals)} numbers, not a multiple of {step}")
    return [Box(*vals[i:i + step]) for i in range(0, len(vals), step)]


def write_box_file(path, frames, with_scores=False):
    Path(path).write_text("".join(format_boxes(b, with_scores) + "\n" for b in frames))


def read_box_file(path, with_scores=False):
    return [parse_boxes(line, with_scores) for line in Path(path).read_text().split("\n")[:-1]]
