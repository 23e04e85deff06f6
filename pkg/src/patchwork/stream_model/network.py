"""Bottleneck backbone with segmentation and detection heads.

One forward implementation serves both the stateless full-frame network and
the stateful crop network: the only difference is how each depthwise conv
gets its enlarged input.  ``pad`` is a callable ``pad(layer_index, h) ->
x_hat``; the stateless version zero-pads by the kernel radius, the stateful
version runs a patchwork cell.  Backward passes are hand-derived; in the
stateful case gradients stop at the cell ring (memory is treated as a
constant), which is the truncation the joint fine-tuning stage uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor_core as tc
from ..attention import ActionSpace, QNet
from ..cell import CellGeometry

TASKS = ("seg", "det")
SEG_HEADS = ("subpixel", "taps")


class BuildError(ValueError):
    """The architecture cannot be laid out for the requested action space."""


@dataclass(frozen=True)
class BlockSpec:
    t: int  # expansion
    c: int  # output channels
    n: int  # repeats
    s: int  # stride of the first repeat

    def __post_init__(self):
        if self.s not in (1, 2) or self.t < 1 or self.c < 1 or self.n < 1:
            raise BuildError(f"invalid block spec {self}")


DEFAULT_BLOCKS = (BlockSpec(1, 8, 1, 2), BlockSpec(4, 12, 2, 2), BlockSpec(4, 24, 2, 2), BlockSpec(4, 32, 1, 1))


@dataclass(frozen=True)
class LayerSpec:
    index: int
    cin: int
    cout: int
    t: int
    stride: int
    in_stride: int  # cumulative stride of this layer's input

    @property
    def hidden(self) -> int:
        return self.cin * self.t

    @property
    def out_stride(self) -> int:
        return self.in_stride * self.stride

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.cin == self.cout


def expand_blocks(blocks, in_channels) -> list[LayerSpec]:
    layers, cin, stride = [], in_channels, 1
    for spec in blocks:
        for r in range(spec.n):
            s = spec.s if r == 0 else 1
            layers.append(LayerSpec(len(layers), cin, spec.c, spec.t, s, stride))
            cin, stride = spec.c, stride * s
    return layers


def relu6(z):
    return np.clip(z, 0, 6)


def relu6_grad(z):
    return (z > 0) & (z < 6)


def depth_to_space(z, s):
    """(..., h, w, s*s) -> (..., h*s, w*s, 1), block entries in row-major order."""
    *lead, h, w, _ = z.shape
    return z.reshape(*lead, h, w, s, s).swapaxes(-3, -2).reshape(*lead, h * s, w * s, 1)


def space_to_depth(g, s):
    *lead, hh, ww, _ = g.shape
    return g.reshape(*lead, hh // s, s, ww // s, s).swapaxes(-3, -2).reshape(*lead, hh // s, ww // s, s * s)


def _count(tally, name, out_shape, kernel_ops):
    if tally is not None:
        out_elems = int(np.prod(out_shape[-3:]))
        tally.append((name, 2 * out_elems * kernel_ops))


class StreamModel:
    """Weights and layout of the desk-scale network.

    Parameters live in ``params`` (trainable) and ``norms`` (fixed per-channel
    affine normalisation, calibrated once and then frozen).
    """

    def __init__(self, input_dims=(64, 64, 3), blocks=DEFAULT_BLOCKS, space=ActionSpace(2, 1), seed=0,
                 pyramid_levels=2, qnet_widths=(8, 16), tap_layer=-1, history_decay=0.7,
                 seg_head="subpixel", params=None, norms=None, qnet=None):
        if seg_head not in SEG_HEADS:
            raise BuildError(f"unknown segmentation head {seg_head!r}")
        self.seg_head = seg_head
        self.input_dims = tuple(input_dims)
        self.blocks = tuple(blocks)
        self.layers = expand_blocks(self.blocks, self.input_dims[2])
        self.pyramid_levels = pyramid_levels
        self.tap_layer = tap_layer
        self.history_decay = history_decay
        self.qnet_widths = tuple(qnet_widths)
        self.seed = seed
        self.out_stride = self.layers[-1].out_stride
        self.feature_channels = self.layers[-1].cout
        h, w, _ = self.input_dims
        if h % self.out_stride or w % self.out_stride:
            raise BuildError(f"input {h}x{w} not divisible by total stride {self.out_stride}")
        self.seg_taps = self._seg_taps()
        self.space = space
        self.validate_space(space)
        if params is None:
            params, norms = self._init_params(np.random.default_rng(seed))
        self.params = params
        self.norms = norms
        if qnet is None:
            qnet = QNet(self.tap_shape(), space.num_actions, self.qnet_widths, seed=seed + 1)
        self.qnet = qnet

    # -- layout ----------------------------------------------------------------------

    def _seg_taps(self):
        """Last layer at each distinct output stride."""
        taps = {}
        for L in self.layers:
            taps[L.out_stride] = L.index
        return [taps[s] for s in sorted(taps)]

    def validate_space(self, space: ActionSpace):
        h, w, _ = self.input_dims
        for L in self.layers:
            rows, cols = h // L.in_stride, w // L.in_stride
            if rows % space.M or cols % space.M:
                raise BuildError(f"layer {L.index}: state {rows}x{cols} not divisible by M={space.M}")
            if (rows // space.M) % L.stride or (cols // space.M) % L.stride:
                raise BuildError(f"layer {L.index}: window offsets not aligned to stride {L.stride}")
        fr, fc = h // self.out_stride, w // self.out_stride
        if fr % space.M or fc % space.M:
            raise BuildError(f"final state {fr}x{fc} not divisible by M={space.M}")

    def with_space(self, space: ActionSpace, qnet=None) -> "StreamModel":
        """Same weights under another action space (a fresh Q-net if sizes change)."""
        if qnet is None and space.num_actions == self.space.num_actions:
            qnet = self.qnet
        return StreamModel(self.input_dims, self.blocks, space, self.seed, self.pyramid_levels,
                           self.qnet_widths, self.tap_layer, self.history_decay, self.seg_head,
                           params=self.params, norms=self.norms, qnet=qnet)

    def cell_geometries(self, space: ActionSpace | None = None) -> list[CellGeometry]:
        space = space or self.space
        h, w, _ = self.input_dims
        rel = space.rel_size
        geoms = []
        for L in self.layers:
            rows, cols = h // L.in_stride, w // L.in_stride
            geoms.append(CellGeometry(int(rows * rel), int(cols * rel), rel, rel, 1))
        return geoms

    def restore_geometry(self, space: ActionSpace | None = None) -> CellGeometry:
        space = space or self.space
        h, w, _ = self.input_dims
        rel = space.rel_size
        s = self.out_stride
        return CellGeometry(int(h // s * rel), int(w // s * rel), rel, rel, 0)

    def final_dims(self):
        h, w, _ = self.input_dims
        return h // self.out_stride, w // self.out_stride

    def tap_shape(self):
        if self.tap_layer in (-1, len(self.layers)):
            fr, fc = self.final_dims()
            return (fr, fc, self.feature_channels)
        L = self.layers[self.tap_layer]
        h, w, _ = self.input_dims
        return (h // L.in_stride, w // L.in_stride, L.hidden)

    def det_levels(self):
        """(grid rows, grid cols, anchor size) per detection level; level 0 is the crop head."""
        fr, fc = self.final_dims()
        h = self.input_dims[0]
        levels = []
        for lvl in range(self.pyramid_levels + 1):
            gr, gc = max(fr >> lvl, 1), max(fc >> lvl, 1)
            levels.append((gr, gc, min(2.0 * self.out_stride * (1 << lvl) / h, 0.9)))
        return levels

    # -- parameters ----------------------------------------------------------------------

    def _init_params(self, rng):
        p, n = {}, {}

        def he(shape, fan_in):
            return rng.normal(0, np.sqrt(2.0 / fan_in), shape).astype(tc.DTYPE)

        def norm(name, ch):
            n[name + ".scale"] = np.ones(ch, tc.DTYPE)
            n[name + ".shift"] = np.zeros(ch, tc.DTYPE)

        for L in self.layers:
            pre = f"b{L.index}"
            if L.t != 1:
                p[pre + ".expand.w"] = he((1, 1, L.cin, L.hidden), L.cin)
                p[pre + ".expand.b"] = np.zeros(L.hidden, tc.DTYPE)
                norm(pre + ".expand", L.hidden)
            p[pre + ".dw.w"] = he((3, 3, L.hidden), 9)
            p[pre + ".dw.b"] = np.zeros(L.hidden, tc.DTYPE)
            norm(pre + ".dw", L.hidden)
            p[pre + ".proj.w"] = he((1, 1, L.hidden, L.cout), L.hidden)
            p[pre + ".proj.b"] = np.zeros(L.cout, tc.DTYPE)
            norm(pre + ".proj", L.cout)
        c = self.feature_channels
        if self.seg_head == "subpixel":
            s = self.out_stride
            p["seg.hid.w"] = he((1, 1, c, c), c)
            p["seg.hid.b"] = np.zeros(c, tc.DTYPE)
            p["seg.out.w"] = (rng.normal(0, 0.01, (1, 1, c, s * s))).astype(tc.DTYPE)
            p["seg.out.b"] = np.zeros(s * s, tc.DTYPE)
        else:
            for s_idx, li in enumerate(self.seg_taps):
                ct = self.layers[li].cout
                p[f"seg.t{s_idx}.w"] = (rng.normal(0, 0.01, (1, 1, ct, 1))).astype(tc.DTYPE)
                p[f"seg.t{s_idx}.b"] = np.zeros(1, tc.DTYPE)
        for lvl in range(1, self.pyramid_levels + 1):
            pre = f"det.p{lvl}"
            p[pre + ".dw.w"] = he((3, 3, c), 9)
            p[pre + ".dw.b"] = np.zeros(c, tc.DTYPE)
            norm(pre + ".dw", c)
            p[pre + ".pw.w"] = he((1, 1, c, c), c)
            p[pre + ".pw.b"] = np.zeros(c, tc.DTYPE)
            norm(pre + ".pw", c)
        for lvl in range(self.pyramid_levels + 1):
            p[f"det.h{lvl}.w"] = (rng.normal(0, 0.01, (1, 1, c, 5))).astype(tc.DTYPE)
            p[f"det.h{lvl}.b"] = np.array([-2.0, 0, 0, 0, 0], tc.DTYPE)
        return p, n

    def conv(self, name, depthwise=False):
        return tc.ConvWeights(self.params[name + ".w"], self.params[name + ".b"], depthwise)

    @property
    def dtype(self):
        """Working precision: that of the weights (float32 unless converted)."""
        return next(iter(self.params.values())).dtype

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def backbone_param_names(self):
        return [k for k in self.params if k.startswith("b")]

    # -- layers ------------------------------------------------------------------------

    def _affine(self, name, z, calibrate):
        if calibrate:
            axes = tuple(range(z.ndim - 1))
            mean = z.mean(axis=axes)
            std = z.std(axis=axes) + 1e-3
            self.norms[name + ".scale"] = (1.0 / std).astype(tc.DTYPE)
            self.norms[name + ".shift"] = (-mean / std).astype(tc.DTYPE)
        return z * self.norms[name + ".scale"] + self.norms[name + ".shift"]

    def block_forward(self, i, x, pad, calibrate=False, tally=None):
        """One bottleneck; returns (output, cache)."""
        L = self.layers[i]
        pre = f"b{i}"
        if L.t != 1:
            w = self.conv(pre + ".expand")
            z_e = self._affine(pre + ".expand", tc.pointwise_conv(x, w), calibrate)
            _count(tally, pre + ".expand", z_e.shape, L.cin)
            h = relu6(z_e)
        else:
            z_e, h = None, x
        xh = pad(i, h)
        z_d = self._affine(pre + ".dw", tc.depthwise_conv_valid(xh, self.conv(pre + ".dw", True), L.stride), calibrate)
        _count(tally, pre + ".dw", z_d.shape, 9)
        h2 = relu6(z_d)
        y = self._affine(pre + ".proj", tc.pointwise_conv(h2, self.conv(pre + ".proj")), calibrate)
        _count(tally, pre + ".proj", y.shape, L.hidden)
        if L.residual:
            y = y + x
        return y, (x, z_e, h, xh, z_d, h2)

    def block_backward(self, i, cache, gy, grads):
        L = self.layers[i]
        pre = f"b{i}"
        x, z_e, h, xh, z_d, h2 = cache
        gz = gy * self.norms[pre + ".proj.scale"]
        gh2, grads[pre + ".proj.w"], grads[pre + ".proj.b"] = tc.conv2d_valid_backward(h2, self.conv(pre + ".proj"), 1, gz)
        gz = gh2 * relu6_grad(z_d) * self.norms[pre + ".dw.scale"]
        gxh, grads[pre + ".dw.w"], grads[pre + ".dw.b"] = tc.depthwise_conv_valid_backward(
            xh, self.conv(pre + ".dw", True), L.stride, gz)
        gh = gxh[..., 1:-1, 1:-1, :]
        if L.t != 1:
            gz = gh * relu6_grad(z_e) * self.norms[pre + ".expand.scale"]
            gx, grads[pre + ".expand.w"], grads[pre + ".expand.b"] = tc.conv2d_valid_backward(
                x, self.conv(pre + ".expand"), 1, gz)
        else:
            gx = gh
        if L.residual:
            gx = gx + gy
        return gx

    @staticmethod
    def same_pad(i, h):
        return tc.zero_pad(h, 1)

    def backbone_forward(self, x, pad=None, calibrate=False, tally=None):
        pad = pad or self.same_pad
        outs, caches = [], []
        for i in range(len(self.layers)):
            x, c = self.block_forward(i, x, pad, calibrate, tally)
            outs.append(x)
            caches.append(c)
        return outs, caches

    def backbone_backward(self, caches, grad_outs, grads):
        """``grad_outs[i]`` is the gradient w.r.t. layer i's output (or None)."""
        g = None
        for i in reversed(range(len(self.layers))):
            gi = grad_outs[i]
            if g is not None:
                gi = g if gi is None else gi + g
            if gi is None:
                g = None
                continue
            g = self.block_backward(i, caches[i], gi, grads)
        return g

    # -- segmentation head -------------------------------------------------------------------

    def seg_forward(self, outs, tally=None):
        """Per-pixel logits (n, H, W, 1) for whatever region ``outs`` cover.

        ``subpixel``: every final feature decodes its own stride x stride
        pixel block through a 1x1 hidden layer.  ``taps``: nearest-upsampled
        sum of 1x1 logits from the last layer at each stride.
        """
        if self.seg_head == "subpixel":
            f = outs[-1]
            c = self.feature_channels
            z = tc.pointwise_conv(f, self.conv("seg.hid"))
            _count(tally, "seg.hid", z.shape, c)
            blocks = tc.pointwise_conv(relu6(z), self.conv("seg.out"))
            _count(tally, "seg.out", blocks.shape, c)
            return depth_to_space(blocks, self.out_stride)
        logits = None
        for s_idx, li in enumerate(self.seg_taps):
            s = self.layers[li].out_stride
            z = tc.pointwise_conv(outs[li], self.conv(f"seg.t{s_idx}"))
            _count(tally, f"seg.t{s_idx}", z.shape, self.layers[li].cout)
            up = np.repeat(np.repeat(z, s, axis=-3), s, axis=-2)
            logits = up if logits is None else logits + up
        return logits

    def seg_backward(self, outs, glogits, grads, grad_outs):
        if self.seg_head == "subpixel":
            f = outs[-1]
            z = tc.pointwise_conv(f, self.conv("seg.hid"))
            g = space_to_depth(glogits, self.out_stride)
            gh, grads["seg.out.w"], grads["seg.out.b"] = tc.conv2d_valid_backward(relu6(z), self.conv("seg.out"), 1, g)
            gx, grads["seg.hid.w"], grads["seg.hid.b"] = tc.conv2d_valid_backward(
                f, self.conv("seg.hid"), 1, gh * relu6_grad(z))
            grad_outs[-1] = gx if grad_outs[-1] is None else grad_outs[-1] + gx
            return
        for s_idx, li in enumerate(self.seg_taps):
            s = self.layers[li].out_stride
            n, hh, ww, _ = glogits.shape
            g = glogits.reshape(n, hh // s, s, ww // s, s, 1).sum(axis=(2, 4))
            gx, grads[f"seg.t{s_idx}.w"], grads[f"seg.t{s_idx}.b"] = tc.conv2d_valid_backward(
                outs[li], self.conv(f"seg.t{s_idx}"), 1, g)
            grad_outs[li] = gx if grad_outs[li] is None else grad_outs[li] + gx

    # -- detection head ---------------------------------------------------------------------

    def pyramid_forward(self, restored, calibrate=False, tally=None):
        feats, caches = [], []
        x = restored
        for lvl in range(1, self.pyramid_levels + 1):
            pre = f"det.p{lvl}"
            xp = tc.zero_pad(x, 1)
            z_d = self._affine(pre + ".dw", tc.depthwise_conv_valid(xp, self.conv(pre + ".dw", True), 2), calibrate)
            _count(tally, pre + ".dw", z_d.shape, 9)
            h = relu6(z_d)
            z_p = self._affine(pre + ".pw", tc.pointwise_conv(h, self.conv(pre + ".pw")), calibrate)
            _count(tally, pre + ".pw", z_p.shape, h.shape[-1])
            caches.append((x, xp, z_d, h, z_p))
            x = relu6(z_p)
            feats.append(x)
        return feats, caches

    def det_forward(self, final_crop, restored, calibrate=False, tally=None):
        """Raw head outputs per level: level 0 on the crop, the rest on the restored map."""
        c = self.feature_channels
        raw = [tc.pointwise_conv(final_crop, self.conv("det.h0"))]
        _count(tally, "det.h0", raw[0].shape, c)
        feats, pcache = self.pyramid_forward(restored, calibrate, tally)
        for lvl, f in enumerate(feats, start=1):
            raw.append(tc.pointwise_conv(f, self.conv(f"det.h{lvl}")))
            _count(tally, f"det.h{lvl}", raw[-1].shape, c)
        return raw, (final_crop, restored, feats, pcache)

    def det_backward(self, cache, graw, grads):
        """Returns (grad wrt final crop features, grad wrt restored map)."""
        final_crop, restored, feats, pcache = cache
        g_final, grads["det.h0.w"], grads["det.h0.b"] = tc.conv2d_valid_backward(final_crop, self.conv("det.h0"), 1, graw[0])
        g = None
        for lvl in range(self.pyramid_levels, 0, -1):
            pre = f"det.p{lvl}"
            gf, grads[f"det.h{lvl}.w"], grads[f"det.h{lvl}.b"] = tc.conv2d_valid_backward(
                feats[lvl - 1], self.conv(f"det.h{lvl}"), 1, graw[lvl])
            g = gf if g is None else g + gf
            x, xp, z_d, h, z_p = pcache[lvl - 1]
            gz = g * relu6_grad(z_p) * self.norms[pre + ".pw.scale"]
            gh, grads[pre + ".pw.w"], grads[pre + ".pw.b"] = tc.conv2d_valid_backward(h, self.conv(pre + ".pw"), 1, gz)
            gz = gh * relu6_grad(z_d) * self.norms[pre + ".dw.scale"]
            gxp, grads[pre + ".dw.w"], grads[pre + ".dw.b"] = tc.depthwise_conv_valid_backward(
                xp, self.conv(pre + ".dw", True), 2, gz)
            g = gxp[..., 1:-1, 1:-1, :]
        return g_final, g

    # -- whole network, stateless ---------------------------------------------------------------

    def forward_full(self, x, tasks=TASKS, calibrate=False, tally=None):
        outs, caches = self.backbone_forward(x, calibrate=calibrate, tally=tally)
        result = {"features": outs[-1], "outs": outs, "caches": caches}
        if "seg" in tasks:
            result["seg"] = self.seg_forward(outs, tally)
        if "det" in tasks:
            result["det"], result["det_cache"] = self.det_forward(outs[-1], outs[-1], calibrate, tally)
        return result

    def backward_full(self, result, grad_seg=None, grad_det=None):
        grads = {}
        outs = result["outs"]
        grad_outs = [None] * len(self.layers)
        if grad_seg is not None:
            self.seg_backward(outs, grad_seg, grads, grad_outs)
        if grad_det is not None:
            g_final, g_rest = self.det_backward(result["det_cache"], grad_det, grads)
            g = g_final + g_rest
            grad_outs[-1] = g if grad_outs[-1] is None else grad_outs[-1] + g
        self.backbone_backward(result["caches"], grad_outs, grads)
        return grads

    def calibrate(self, frames):
        """Set the fixed normalisation from a batch of frames (stage-1 start)."""
        self.forward_full(frames, calibrate=True)
