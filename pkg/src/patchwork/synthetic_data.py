"""Synthetic video episodes with exact ground truth.

Two generators:

* ``moving_shapes_scene`` renders coloured rectangles/ellipses moving over a
  textured background.  Scenario families mirror typical attention
  behaviours: ``stay`` (one slow object inside a window), ``large`` (one
  object bigger than a window), ``multi`` (several objects far apart).
* ``pan_scan_video`` turns a still image into a fake video by moving a view
  window from one sampled box to another at a Gaussian-distributed speed.

Positions are integer pixels, so boxes, masks and pixels agree exactly.
Values are float32 RGB in [0, 1].
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm
from .rewards import Box, read_box_file, write_box_file
from .tensor_core import DTYPE, RejectedInputError

SCENARIOS = ("stay", "large", "multi")
DEFAULT_OUTLINE = 2


@dataclass
class Episode:
    frames: list
    gt_boxes: list
    gt_masks: list
    seed: int = 0
    scenario: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.frames) == len(self.gt_boxes) == len(self.gt_masks)):
            raise RejectedInputError("ground truth not aligned with frames")
        if self.frames and any(f.shape != self.frames[0].shape for f in self.frames):
            raise RejectedInputError("frames differ in size")
        if self.frames and any(m.shape != self.frames[0].shape[:2] for m in self.gt_masks):
            raise RejectedInputError("mask size differs from frame size")

    def __len__(self):
        return len(self.frames)

    @property
    def dims(self):
        return self.frames[0].shape[:2]


@dataclass
class SceneObject:
    shape: str  # "rect" | "ellipse"
    size: tuple  # (rows, cols)
    pos: np.ndarray  # top-left, float pixels
    vel: np.ndarray
    color: np.ndarray

    def extent(self):
        y0, x0 = (int(v) for v in np.rint(self.pos))
        return y0, x0, y0 + self.size[0], x0 + self.size[1]


def _background(rng, dims, distractors):
    h, w = dims
    coarse = rng.uniform(0.15, 0.55, (4, 4, 3))
    bg = np.stack([ndimage.zoom(coarse[:, :, c], (h / 4, w / 4), order=1, mode="nearest") for c in range(3)], -1)
    bg = bg + rng.normal(0, 0.04, (h, w, 3))
    for _ in range(distractors):
        s = int(rng.integers(3, 6))
        y, x = int(rng.integers(0, h - s)), int(rng.integers(0, w - s))
        bg[y:y + s, x:x + s] = _saturated_color(rng)
    return np.clip(bg, 0, 1)


def _saturated_color(rng):
    return np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.0)))


def object_mask(obj: SceneObject, dims) -> np.ndarray:
    """Pixels covered by the object, clipped to the frame."""
    h, w = dims
    y0, x0, y1, x1 = obj.extent()
    mask = np.zeros(dims, bool)
    if obj.shape == "rect":
        mask[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
        return mask
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    ry, rx = obj.size[0] / 2, obj.size[1] / 2
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def object_box(obj: SceneObject, dims):
    h, w = dims
    y0, x0, y1, x1 = obj.extent()
    y0, x0, y1, x1 = max(y0, 0), max(x0, 0), min(y1, h), min(x1, w)
    if y1 <= y0 or x1 <= x0:
        return None
    return Box(y0 / h, x0 / w, y1 / h, x1 / w)


def render(background, objects, outline=DEFAULT_OUTLINE):
    """Paint objects over the background.

    ``outline > 0`` paints only a band of that many pixels along each
    object's edge; the ground-truth mask is always the filled region, so
    whether a pixel belongs to an object depends on evidence some distance
    away.  ``outline = 0`` paints solid shapes.
    """
    dims = background.shape[:2]
    img = background.copy()
    union = np.zeros(dims, bool)
    boxes = []
    for obj in objects:
        m = object_mask(obj, dims)
        paint = m
        if outline > 0:
            paint = m & ~ndimage.binary_erosion(m, np.ones((3, 3), bool), iterations=outline, border_value=0)
        img[paint] = obj.color
        union |= m
        box = object_box(obj, dims)
        if box is not None:
            boxes.append(box)
    return img.astype(DTYPE), boxes, union


def _spawn(rng, scenario, num_objects, dims, speed):
    h, w = dims
    if scenario == "large":
        sizes = [tuple(int(v) for v in rng.integers(int(0.5 * h), int(0.7 * h) + 1, 2)) for _ in range(num_objects)]
    elif scenario == "stay":
        sizes = [tuple(int(v) for v in rng.integers(max(2, h // 8), max(3, h // 4), 2)) for _ in range(num_objects)]
    else:
        sizes = [tuple(int(v) for v in rng.integers(max(2, h // 8), max(3, h // 4) + 1, 2)) for _ in range(num_objects)]
    # multi: one object per quadrant, quadrants drawn without replacement
    quads = rng.permutation(4)
    objs = []
    for i, size in enumerate(sizes):
        if scenario == "multi":
            qy, qx = divmod(int(quads[i % 4]), 2)
            y = rng.uniform(qy * h / 2, max(qy * h / 2, (qy + 1) * h / 2 - size[0]))
            x = rng.uniform(qx * w / 2, max(qx * w / 2, (qx + 1) * w / 2 - size[1]))
        elif scenario == "stay":
            # keep the object inside one half-frame window
            qy, qx = rng.integers(0, 2, 2)
            y = rng.uniform(qy * h / 2, (qy + 1) * h / 2 - size[0])
            x = rng.uniform(qx * w / 2, (qx + 1) * w / 2 - size[1])
        else:
            y, x = rng.uniform(0, h - size[0]), rng.uniform(0, w - size[1])
        v = speed * (0.1 if scenario == "stay" else 1.0)
        objs.append(SceneObject(
            shape="rect" if rng.random() < 0.5 else "ellipse",
            size=size,
            pos=np.array([y, x]),
            vel=rng.normal(0, v, 2),
            color=_saturated_color(rng),
        ))
    return objs


def _advance(obj, rng, dims, jitter):
    h, w = dims
    obj.vel = obj.vel + rng.normal(0, jitter, 2)
    pos = obj.pos + obj.vel
    lim = np.array([h - obj.size[0], w - obj.size[1]], float)
    for ax in range(2):
        if pos[ax] < 0 or pos[ax] > lim[ax]:
            obj.vel[ax] = -obj.vel[ax]
            pos[ax] = np.clip(pos[ax], 0, lim[ax])
    obj.pos = pos


def moving_shapes_scene(seed, num_frames=20, num_objects=None, dims=(64, 64), scenario="multi",
                        speed=1.5, jitter=0.3, distractors=4, outline=DEFAULT_OUTLINE) -> Episode:
    if scenario not in SCENARIOS:
        raise RejectedInputError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    if num_objects is None:
        num_objects = int(rng.integers(2, 4)) if scenario == "multi" else 1
    bg = _background(rng, dims, distractors)
    objs = _spawn(rng, scenario, num_objects, dims, speed)
    frames, boxes, masks = [], [], []
    for t in range(num_frames):
        if t:
            for obj in objs:
                _advance(obj, rng, dims, jitter if scenario != "stay" else jitter * 0.1)
        img, b, m = render(bg, objs, outline)
        frames.append(img)
        boxes.append(b)
        masks.append(m)
    return Episode(frames, boxes, masks, seed=seed, scenario=scenario,
                   meta={"objects": [(o.shape, o.size) for o in objs]})


def still_image(seed, dims=(128, 128), num_objects=3, distractors=8, outline=DEFAULT_OUTLINE):
    """A single frame of a larger canvas, the input to ``pan_scan_video``."""
    rng = np.random.default_rng(seed)
    bg = _background(rng, dims, distractors)
    objs = []
    for _ in range(num_objects):
        size = tuple(int(v) for v in rng.integers(dims[0] // 10, dims[0] // 3, 2))
        pos = np.array([rng.uniform(0, dims[0] - size[0]), rng.uniform(0, dims[1] - size[1])])
        objs.append(SceneObject("rect" if rng.random() < 0.5 else "ellipse", size, pos,
                                np.zeros(2), _saturated_color(rng)))
    return render(bg, objs, outline)


# -- pan and scan --------------------------------------------------------------------------

def _covered_fraction(window, box: Box, dims):
    """Fraction of a relative-coordinate box's area inside a pixel window (top, left, size)."""
    h, w = dims
    top, left, sh, sw = window
    by0, bx0, by1, bx1 = box.ymin * h, box.xmin * w, box.ymax * h, box.xmax * w
    ih = min(by1, top + sh) - max(by0, top)
    iw = min(bx1, left + sw) - max(bx0, left)
    if ih <= 0 or iw <= 0:
        return 0.0
    return ih * iw / ((by1 - by0) * (bx1 - bx0))


def _enough_content(window, boxes, mask, dims, min_overlap):
    if boxes:
        return any(_covered_fraction(window, b, dims) >= min_overlap for b in boxes)
    if mask is not None and mask.any():
        top, left, sh, sw = (int(round(v)) for v in window)
        return mask[top:top + sh, left:left + sw].sum() >= min_overlap * mask.sum()
    return False


def transform_box(box: Box, window, dims):
    """Map an image-relative box into the relative coordinates of a view window, clipped."""
    h, w = dims
    top, left, sh, sw = window
    y0 = (box.ymin * h - top) / sh
    x0 = (box.xmin * w - left) / sw
    y1 = (box.ymax * h - top) / sh
    x1 = (box.xmax * w - left) / sw
    y0, x0, y1, x1 = max(y0, 0.0), max(x0, 0.0), min(y1, 1.0), min(x1, 1.0)
    if y1 <= y0 or x1 <= x0:
        return None
    return Box(y0, x0, y1, x1)


def _sample_grid(window, frame_dims):
    top, left, sh, sw = window
    fh, fw = frame_dims
    ys = top + (np.arange(fh) + 0.5) * sh / fh - 0.5
    xs = left + (np.arange(fw) + 0.5) * sw / fw - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def pan_scan_video(image, gt_boxes=None, gt_mask=None, num_frames=20, speed_sigma=2.0, seed=0,
                   frame_dims=(64, 64), view_scale=(0.5, 0.8), min_overlap=0.3,
                   views=None) -> Episode:
    """Fake video panning across a still ``image``.

    ``views`` optionally fixes the two (top, left, rows, cols) view boxes;
    otherwise both are sampled until one of them holds at least
    ``min_overlap`` of a ground-truth box (or of the foreground pixels).
    The speed in image pixels per frame is |N(0, speed_sigma)| truncated at
    three sigma.
    """
    image = np.asarray(image, DTYPE)
    dims = image.shape[:2]
    gt_boxes = list(gt_boxes or [])
    fh, fw = frame_dims
    if dims[0] < fh or dims[1] < fw:
        raise RejectedInputError(f"image {dims} smaller than frame {frame_dims}")
    rng = np.random.default_rng(seed)
    aspect = fw / fh

    def sample_view():
        sh = rng.uniform(*view_scale) * min(dims[0], dims[1] / aspect)
        sh = max(sh, 1.0)
        sw = sh * aspect
        return (rng.uniform(0, dims[0] - sh), rng.uniform(0, dims[1] - sw), sh, sw)

    if views is None:
        for _ in range(1000):
            va, vb = sample_view(), sample_view()
            if _enough_content(va, gt_boxes, gt_mask, dims, min_overlap) or \
                    _enough_content(vb, gt_boxes, gt_mask, dims, min_overlap):
                break
        else:
            raise RejectedInputError("could not sample a view overlapping the ground truth")
    else:
        va, vb = views
    for v in (va, vb):
        if v[0] < 0 or v[1] < 0 or v[0] + v[2] > dims[0] + 1e-9 or v[1] + v[3] > dims[1] + 1e-9:
            raise RejectedInputError(f"view {v} leaves the image")
    speed = abs(float(np.clip(rng.normal(0, speed_sigma), -3 * speed_sigma, 3 * speed_sigma))) if speed_sigma > 0 else 0.0
    dist = float(np.hypot(vb[0] - va[0], vb[1] - va[1]))
    frames, boxes, masks, windows = [], [], [], []
    for t in range(num_frames):
        p = min(1.0, t * speed / dist) if dist > 0 else 0.0
        win = tuple((1 - p) * a + p * b for a, b in zip(va, vb))
        gy, gx = _sample_grid(win, frame_dims)
        frames.append(np.stack([ndimage.map_coordinates(image[:, :, c], [gy, gx], order=1, mode="nearest")
                                for c in range(image.shape[2])], -1).astype(DTYPE))
        boxes.append([b for b in (transform_box(g, win, dims) for g in gt_boxes) if b is not None])
        if gt_mask is not None:
            iy = np.floor(gy + 0.5).astype(int).clip(0, dims[0] - 1)
            ix = np.floor(gx + 0.5).astype(int).clip(0, dims[1] - 1)
            masks.append(gt_mask.astype(bool)[iy, ix])
        else:
            masks.append(np.zeros(frame_dims, bool))
        windows.append(win)
    return Episode(frames, boxes, masks, seed=seed, scenario="pan-scan",
                   meta={"views": (va, vb), "speed": speed, "windows": windows})


def pan_scan_episode(seed, num_frames=20, frame_dims=(64, 64), speed_sigma=3.0):
    image, boxes, mask = still_image(seed, (2 * frame_dims[0], 2 * frame_dims[1]))
    return pan_scan_video(image, boxes, mask, num_frames, speed_sigma, seed, frame_dims)


# -- files ---------------------------------------------------------------------------

def save_episode(episode: Episode, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, (frame, mask) in enumerate(zip(episode.frames, episode.gt_masks)):
        pnm.write_pnm(d / f"frame_{t:04d}.ppm", pnm.frame_to_uint8(frame))
        pnm.write_pnm(d / f"mask_{t:04d}.pgm", pnm.mask_to_uint8(mask))
    write_box_file(d / "boxes.txt", episode.gt_boxes)


def load_episode(directory, seed=0, scenario="") -> Episode:
    d = Path(directory)
    frames = [pnm.uint8_to_frame(pnm.read_pnm(p)) for p in sorted(d.glob("frame_*.ppm"))]
    masks = [pnm.read_pnm(p) > 127 for p in sorted(d.glob("mask_*.pgm"))]
    return Episode(frames, read_box_file(d / "boxes.txt"), masks, seed=seed, scenario=scenario)
