"""Analytic FLOPs and max/avg latency of keyframe schedules.

A multiply-add counts as 2 FLOPs; a conv layer costs
``2 * output_elements * kernel_ops`` where ``kernel_ops`` is the number of
multiply-adds per output element (kh*kw*cin, or kh*kw for depthwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attention import ActionSpace
from .tensor_core import RejectedInputError

MEGA = 1_000_000


@dataclass(frozen=True)
class ConvCost:
    out_rows: int
    out_cols: int
    out_channels: int
    kernel_ops: int

    @property
    def flops(self) -> int:
        return 2 * self.out_rows * self.out_cols * self.out_channels * self.kernel_ops


def _ceil_div(a, b):
    return -(-a // b)


def model_layers(model, task="seg", space: ActionSpace | None = None, attention=True) -> list[tuple[str, ConvCost]]:
    """Every conv one streaming step executes, with its shape.

    ``space=None`` uses the model's own action space; a (1,1) space is the
    stateless full-frame network.  ``attention`` adds the Q-net of the
    model's own space.
    """
    space = space or model.space
    h, w, _ = model.input_dims
    rel = space.rel_size
    rows, cols = int(h * rel), int(w * rel)
    out = []
    for L in model.layers:
        r, c = rows // L.in_stride, cols // L.in_stride
        ro, co = r // L.stride, c // L.stride
        if L.t != 1:
            out.append((f"b{L.index}.expand", ConvCost(r, c, L.hidden, L.cin)))
        out.append((f"b{L.index}.dw", ConvCost(ro, co, L.hidden, 9)))
        out.append((f"b{L.index}.proj", ConvCost(ro, co, L.cout, L.hidden)))
    s = model.out_stride
    fr, fc = rows // s, cols // s
    if task == "seg" and model.seg_head == "subpixel":
        ch = model.feature_channels
        out.append(("seg.hid", ConvCost(fr, fc, ch, ch)))
        out.append(("seg.out", ConvCost(fr, fc, s * s, ch)))
    elif task == "seg":
        for t_idx, li in enumerate(model.seg_taps):
            st = model.layers[li].out_stride
            out.append((f"seg.t{t_idx}", ConvCost(rows // st, cols // st, 1, model.layers[li].cout)))
    else:
        ch = model.feature_channels
        out.append(("det.h0", ConvCost(fr, fc, 5, ch)))
        gr, gc = h // s, w // s
        for lvl in range(1, model.pyramid_levels + 1):
            gr, gc = _ceil_div(gr, 2), _ceil_div(gc, 2)
            out.append((f"det.p{lvl}.dw", ConvCost(gr, gc, ch, 9)))
            out.append((f"det.p{lvl}.pw", ConvCost(gr, gc, ch, ch)))
            out.append((f"det.h{lvl}", ConvCost(gr, gc, 5, ch)))
    if attention:
        q = model.qnet
        mh, mw, mc = q.memory_shape
        h1, w1 = _ceil_div(mh, 2), _ceil_div(mw, 2)
        h2, w2 = _ceil_div(h1, 2), _ceil_div(w1, 2)
        c1, c2 = q.widths
        out.append(("qnet.c1", ConvCost(h1, w1, c1, 9 * mc)))
        out.append(("qnet.c2", ConvCost(h2, w2, c2, 9 * c1)))
        out.append(("qnet.fc", ConvCost(1, 1, q.num_actions, q.feature_size + q.num_actions)))
    return out


def count_flops(model_or_layers, **kwargs) -> int:
    """FLOPs per frame of a model (see ``model_layers``) or of a list of ConvCost."""
    if isinstance(model_or_layers, (list, tuple)):
        items = model_or_layers
    else:
        items = [c for _, c in model_layers(model_or_layers, **kwargs)]
    return sum(c.flops for c in items)


# -- variants and schedules ------------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    depth_multiplier: float = 1.0
    flip: bool = False
    resolution_scale: float = 1.0
    interval: int = 1  # K
    delay: int = 0  # d
    space: ActionSpace | None = None  # None = single-frame

    def __post_init__(self):
        if self.depth_multiplier <= 0:
            raise RejectedInputError("depth multiplier must be > 0")
        if not 0 < self.resolution_scale <= 1:
            raise RejectedInputError("resolution scale must be in (0, 1]")
        if self.interval < 1 or self.delay < 0:
            raise RejectedInputError("interval must be >= 1 and delay >= 0")
        if self.delay >= self.interval:
            raise RejectedInputError(f"delay {self.delay} must be smaller than interval {self.interval}")

    @property
    def span(self) -> int:
        """Frames a keyframe's work is pipelined over."""
        return min(self.delay + 1, self.interval)


def variant_cost(base_cost, v: VariantSpec, head_cost=0.0) -> float:
    """Keyframe cost: depth scales the non-head part quadratically, resolution
    scales area, flip runs the model twice."""
    body = (base_cost - head_cost) * v.depth_multiplier ** 2
    cost = (body + head_cost) * v.resolution_scale ** 2
    return cost * (2 if v.flip else 1)


@dataclass
class LatencyProfile:
    costs: list  # FLOPs per frame (integers)
    max: float
    avg: float
    mean: float  # plain per-frame mean of ``costs``

    def __post_init__(self):
        if not self.max >= self.avg >= 0:
            raise RejectedInputError(f"profile violates max >= avg >= 0: {self.max}, {self.avg}")


def latency_profile(base_cost, v: VariantSpec, num_frames=None, head_cost=0.0, unit=MEGA) -> LatencyProfile:
    """Per-frame costs of keyframes every K frames, each spread over
    min(d+1, K) consecutive frames.

    ``base_cost`` and the returned max/avg are in ``unit`` FLOPs (MFLOPs by
    default); the sequence itself is integer FLOPs so total work is
    conserved exactly.  ``max`` is the peak per-frame cost, rounded up at
    FLOP granularity.  ``avg`` follows the tabulated convention
    ``T / (K * min(d+1, K))``; ``mean`` is the arithmetic mean of the
    sequence, ``T / K``.
    """
    total = int(round(variant_cost(base_cost, v, head_cost) * unit))
    K, span = v.interval, v.span
    num_frames = K if num_frames is None else num_frames
    if num_frames < 1:
        raise RejectedInputError("need at least one frame")
    base, rem = divmod(total, span)
    chunk = [base + (1 if i < rem else 0) for i in range(span)] + [0] * (K - span)
    costs = [chunk[t % K] for t in range(num_frames)]
    peak = _ceil_div(total, span) / unit
    avg = total / (K * span) / unit
    mean = sum(costs) / num_frames / unit
    return LatencyProfile(costs, peak, avg, mean)


# -- frontier ------------------------------------------------------------------------

@dataclass
class FrontierRow:
    id: str
    method: str
    max_mflops: float
    avg_mflops: float
    metric: float
    pareto: bool = False


def frontier(points) -> list[FrontierRow]:
    """``points``: iterable of (id, method, LatencyProfile, metric).

    Sorted by max latency; a row is Pareto-optimal if no other row has
    max <= and metric >= with at least one strict.
    """
    rows = [FrontierRow(i, m, p.max, p.avg, float(metric)) for i, m, p, metric in points]
    for r in rows:
        r.pareto = not any(
            o is not r and o.max_mflops <= r.max_mflops and o.metric >= r.metric
            and (o.max_mflops < r.max_mflops or o.metric > r.metric)
            for o in rows
        )
    rows.sort(key=lambda r: (r.max_mflops, -r.metric, r.id))
    return rows


def frontier_csv(rows) -> str:
    lines = ["id,method,max_mflops,avg_mflops,metric,pareto"]
    for r in rows:
        lines.append(f"{r.id},{r.method},{r.max_mflops:.4f},{r.avg_mflops:.4f},{r.metric:.4f},{int(r.pareto)}")
    return "\n".join(lines) + "\n"


def rounded(x) -> int:
    """Round half up, as tabulated values are printed."""
    return int(math.floor(x + 0.5))
