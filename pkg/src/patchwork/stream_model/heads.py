"""Anchor grids, box decoding, NMS and the training losses of both heads."""

from __future__ import annotations

import numpy as np

from ..rewards import Box, SCORE_THRESHOLD, iou

NMS_IOU = 0.5
POS_IOU = 0.5
NEG_IOU = 0.4
LOG_CLIP = 4.0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def anchor_grid(rows, cols, size):
    """(rows*cols, 4) anchors as (cy, cx, h, w), row-major."""
    cy = (np.arange(rows) + 0.5) / rows
    cx = (np.arange(cols) + 0.5) / cols
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    s = np.full(rows * cols, size)
    return np.stack([yy.ravel(), xx.ravel(), s, s], axis=1)


def all_anchors(levels):
    return [anchor_grid(r, c, s) for r, c, s in levels]


def _corners(cy, cx, h, w):
    return cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2


def iou_anchors(anchors, boxes):
    """IoU between (A, 4) anchors and (G, 4) corner boxes -> (A, G)."""
    ay0, ax0, ay1, ax1 = _corners(*anchors.T)
    g = np.asarray(boxes, float).reshape(-1, 4)
    ih = np.minimum(ay1[:, None], g[None, :, 2]) - np.maximum(ay0[:, None], g[None, :, 0])
    iw = np.minimum(ax1[:, None], g[None, :, 3]) - np.maximum(ax0[:, None], g[None, :, 1])
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    area_a = (ay1 - ay0) * (ax1 - ax0)
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    return inter / (area_a[:, None] + area_g[None, :] - inter)


def decode(raw, anchors):
    """raw (A, 5) -> list of Box, clamped into the unit square."""
    score = sigmoid(raw[:, 0].astype(np.float64))
    acy, acx, ah, aw = anchors.T
    cy = acy + raw[:, 1] * ah
    cx = acx + raw[:, 2] * aw
    h = ah * np.exp(np.clip(raw[:, 3], -LOG_CLIP, LOG_CLIP))
    w = aw * np.exp(np.clip(raw[:, 4], -LOG_CLIP, LOG_CLIP))
    y0, x0, y1, x1 = (np.clip(v, 0.0, 1.0) for v in _corners(cy, cx, h, w))
    boxes = []
    for i in range(len(raw)):
        if y1[i] > y0[i] and x1[i] > x0[i]:
            boxes.append(Box(float(y0[i]), float(x0[i]), float(y1[i]), float(x1[i]), float(score[i])))
    return boxes


def nms(boxes, threshold=NMS_IOU):
    """Greedy suppression by descending score (stable for equal scores)."""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def postprocess(boxes, score_threshold=SCORE_THRESHOLD):
    return nms([b for b in boxes if b.score > score_threshold])


# -- losses ------------------------------------------------------------------------

def bce_with_logits(z, target):
    """Elementwise loss and gradient wrt the logit."""
    z = z.astype(np.float64)
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - target


def seg_loss(logits, masks, pos_weight=2.0):
    """Weighted mean BCE over pixels; returns (loss, grad wrt logits)."""
    target = masks.astype(np.float64).reshape(logits.shape)
    loss, grad = bce_with_logits(logits, target)
    weight = np.where(target > 0, pos_weight, 1.0)
    n = logits.size
    return float((loss * weight).sum() / n), (grad * weight / n).astype(logits.dtype)


def assign_targets(anchors_flat, gt_boxes):
    """Per anchor: label 1/0/-1 (positive/negative/ignored) and regression target."""
    n = len(anchors_flat)
    labels = np.zeros(n)
    reg = np.zeros((n, 4))
    if not gt_boxes:
        return labels, reg
    g = np.array([b.coords() for b in gt_boxes], float)
    ious = iou_anchors(anchors_flat, g)
    best_gt = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[(best >= NEG_IOU) & (best < POS_IOU)] = -1
    labels[best >= POS_IOU] = 1
    forced = ious.argmax(axis=0)
    labels[forced] = 1
    best_gt[forced] = np.arange(len(g))
    gy0, gx0, gy1, gx1 = g[best_gt].T
    acy, acx, ah, aw = anchors_flat.T
    reg[:, 0] = ((gy0 + gy1) / 2 - acy) / ah
    reg[:, 1] = ((gx0 + gx1) / 2 - acx) / aw
    reg[:, 2] = np.log((gy1 - gy0) / ah)
    reg[:, 3] = np.log((gx1 - gx0) / aw)
    return labels, reg


def _smooth_l1(d):
    a = np.abs(d)
    return np.where(a < 1, 0.5 * d * d, a - 0.5), np.clip(d, -1, 1)


def det_loss(raw_levels, gt_per_image, anchors):
    """SSD-style loss: BCE on scores plus smooth-L1 on positives, both
    normalised by the positive count.  Returns (loss, grads per level)."""
    anchors_flat = np.concatenate(anchors)
    sizes = [len(a) for a in anchors]
    n = raw_levels[0].shape[0]
    flat = np.concatenate([r.reshape(n, -1, 5) for r in raw_levels], axis=1).astype(np.float64)
    grad = np.zeros_like(flat)
    total, npos = 0.0, 0
    for i in range(n):
        labels, reg = assign_targets(anchors_flat, gt_per_image[i])
        valid = labels >= 0
        pos = labels > 0
        bl, bg = bce_with_logits(flat[i, :, 0], (labels > 0).astype(float))
        total += bl[valid].sum()
        grad[i, :, 0] = np.where(valid, bg, 0)
        d = flat[i, pos, 1:] - reg[pos]
        rl, rg = _smooth_l1(d)
        total += rl.sum()
        grad[i, pos, 1:] = rg
        npos += int(pos.sum())
    norm = max(npos, 1)
    grad /= norm
    out, start = [], 0
    for r, size in zip(raw_levels, sizes):
        out.append(grad[:, start:start + size].reshape(r.shape).astype(r.dtype))
        start += size
    return total / norm, out
