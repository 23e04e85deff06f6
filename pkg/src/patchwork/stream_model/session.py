"""Stateful streaming inference over attention windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor_core as tc
from ..attention import ActionHistory, Policy, q_values, select_action, update_history
from ..cell import CellState, clone, feature_propagate, state_update
from . import heads
from .network import TASKS, StreamModel

MODES = ("incremental", "input-cell")


class SessionError(RuntimeError):
    pass


@dataclass
class StepResult:
    output: object  # list[Box] for det, full-frame bool mask for seg
    action: int  # window processed this frame
    next_action: int
    q: np.ndarray | None
    flops: int


@dataclass
class CropRecord:
    """Everything a step computed, kept for the joint fine-tuning backward."""

    action: int
    window_px: tuple  # (top, left, rows, cols) in input pixels
    outs: list
    caches: list
    seg_logits: np.ndarray | None = None
    det_raw: list | None = None
    det_cache: tuple | None = None
    det_anchors: list | None = None


def receptive_radius(model: StreamModel) -> int:
    """Input-pixel radius of a final feature, rounded up to the total stride."""
    rf = sum(L.in_stride for L in model.layers)
    s = model.out_stride
    return -(-rf // s) * s


class StreamSession:
    """Cell memories, restore memory, output-mask memory and action history.

    ``context=False`` replaces every state ring by zeros (the ablation);
    ``mode="input-cell"`` keeps one memory of raw pixels and recomputes the
    receptive field around each window statelessly.
    """

    def __init__(self, model: StreamModel, policy: Policy = Policy("scanning"), task="seg", seed=0,
                 context=True, mode="incremental"):
        if task not in TASKS:
            raise tc.RejectedInputError(f"unknown task {task!r}")
        if mode not in MODES:
            raise tc.RejectedInputError(f"unknown session mode {mode!r}")
        self.model = model
        self.space = model.space
        self.policy = policy
        self.task = task
        self.seed = seed
        self.context = context
        self.mode = mode
        self.qnet = model.qnet
        self.reset()

    # -- state -------------------------------------------------------------------

    def reset(self):
        m = self.model
        dt = m.dtype
        self.cells = [CellState.zeros(g, L.hidden, dt) for g, L in zip(m.cell_geometries(self.space), m.layers)]
        self.restore = CellState.zeros(m.restore_geometry(self.space), m.feature_channels, dt)
        h, w, c = m.input_dims
        self.input_memory = np.zeros((h, w, c), dt)
        self.mask_memory = np.zeros((h, w), bool)
        self.history = ActionHistory.zeros(self.space.num_actions, m.history_decay)
        self.t = 0
        self.rng = np.random.default_rng(self.seed)
        self.next_action, self.last_q = self._choose()

    def snapshot(self):
        return {
            "cells": [clone(c) for c in self.cells],
            "restore": clone(self.restore),
            "mask": self.mask_memory.copy(),
            "history": self.history.values.copy(),
        }

    def tapped_memory(self):
        tap = self.model.tap_layer
        if tap in (-1, len(self.cells)):
            return self.restore.memory
        return self.cells[tap].memory

    def _choose(self, tally=None):
        q = None
        if self.policy.needs_q:
            if self.qnet is None:
                raise SessionError("policy needs a Q-net")
            q = q_values(self.tapped_memory(), self.history, self.qnet)
            if tally is not None:
                tally.append(("qnet", self.qnet.flops()))
        return select_action(self.policy, q, self.t, self.rng, self.space.num_actions), q

    # -- crop forward -------------------------------------------------------------------

    def window_px(self, action):
        h, w, _ = self.model.input_dims
        win = self.space.window(action)
        return int(win.a * h), int(win.b * w), int(win.h * h), int(win.w * w)

    def _pad(self, a, b):
        def pad(i, h):
            self.cells[i] = state_update(self.cells[i], h, a, b)
            if self.context:
                return feature_propagate(self.cells[i], a, b)
            return tc.zero_pad(h, 1)
        return pad

    def forward_crop(self, frame, action, tally=None) -> CropRecord:
        m = self.model
        if frame.shape != m.input_dims:
            raise tc.RejectedInputError(f"frame shape {frame.shape} != {m.input_dims}")
        if self.mode == "input-cell":
            return self._forward_input_cell(frame, action, tally)
        win = self.space.window(action)
        top, left, rows, cols = self.window_px(action)
        x = tc.crop(tc.tensor(frame, m.dtype), top, left, rows, cols)
        outs, caches = m.backbone_forward(x, self._pad(win.a, win.b), tally=tally)
        rec = CropRecord(action, (top, left, rows, cols), outs, caches)
        self.restore = state_update(self.restore, outs[-1], win.a, win.b)
        self._heads(rec, outs, tally)
        return rec

    def _forward_input_cell(self, frame, action, tally):
        m = self.model
        win = self.space.window(action)
        top, left, rows, cols = self.window_px(action)
        self.input_memory[top:top + rows, left:left + cols] = frame[top:top + rows, left:left + cols]
        h, w, _ = m.input_dims
        r = receptive_radius(m)
        r0, c0 = max(top - r, 0), max(left - r, 0)
        r1, c1 = min(top + rows + r, h), min(left + cols + r, w)
        region = self.input_memory[r0:r1, c0:c1]
        outs, caches = m.backbone_forward(region, tally=tally)
        # interior of every layer output that corresponds to the window
        inner = []
        for L, o in zip(m.layers, outs):
            s = L.out_stride
            inner.append(o[(top - r0) // s:(top - r0 + rows) // s, (left - c0) // s:(left - c0 + cols) // s])
        for i, (L, c) in enumerate(zip(m.layers, caches)):
            s = L.in_stride
            hid = c[2][(top - r0) // s:(top - r0 + rows) // s, (left - c0) // s:(left - c0 + cols) // s]
            self.cells[i] = state_update(self.cells[i], hid, win.a, win.b)
        rec = CropRecord(action, (top, left, rows, cols), inner, [])
        self.restore = state_update(self.restore, inner[-1], win.a, win.b)
        self._heads(rec, inner, tally)
        return rec

    def _heads(self, rec: CropRecord, outs, tally):
        m = self.model
        if self.task == "seg":
            rec.seg_logits = m.seg_forward(outs, tally)
            top, left, rows, cols = rec.window_px
            self.mask_memory[top:top + rows, left:left + cols] = rec.seg_logits[..., 0] > 0
        else:
            rec.det_raw, rec.det_cache = m.det_forward(outs[-1], self.restore.memory, tally=tally)
            rec.det_anchors = self.det_anchors(rec.action)

    def det_anchors(self, action):
        """Anchors predicted at this step: the window's slice of level 0, then the full low-res levels."""
        m = self.model
        levels = m.det_levels()
        anchors = heads.all_anchors(levels)
        gr, gc, _ = levels[0]
        top, left, rows, cols = self.window_px(action)
        s = m.out_stride
        rr = np.arange(top // s, (top + rows) // s)
        cc = np.arange(left // s, (left + cols) // s)
        idx = (rr[:, None] * gc + cc[None, :]).ravel()
        return [anchors[0][idx]] + anchors[1:]

    def boxes(self, rec: CropRecord):
        out = []
        for raw, anc in zip(rec.det_raw, rec.det_anchors):
            out.extend(heads.decode(raw.reshape(-1, 5), anc))
        return heads.postprocess(out)

    # -- public step --------------------------------------------------------------------

    def step(self, frame, keep_record=False):
        """Process one frame at the pending window, then pick the next window."""
        tally = []
        action = self.next_action
        rec = self.forward_crop(frame, action, tally)
        output = self.mask_memory.copy() if self.task == "seg" else self.boxes(rec)
        self.history = update_history(self.history, action)
        self.t += 1
        self.next_action, self.last_q = self._choose(tally)
        result = StepResult(output, action, self.next_action, self.last_q, int(sum(f for _, f in tally)))
        if keep_record:
            return result, rec
        return result

    # -- truncated backward (joint fine-tuning) --------------------------------------------

    def backward_crop(self, rec: CropRecord, grad_seg=None, grad_det=None) -> dict:
        """Parameter gradients of one step, treating every memory as a constant."""
        m = self.model
        if self.mode != "incremental":
            raise SessionError("backward is only defined for the incremental mode")
        grads = {}
        outs = [o[None] for o in rec.outs]
        caches = [tuple(None if v is None else v[None] for v in c) for c in rec.caches]
        grad_outs = [None] * len(m.layers)
        if grad_seg is not None:
            m.seg_backward(outs, grad_seg[None] if grad_seg.ndim == 3 else grad_seg, grads, grad_outs)
        if grad_det is not None:
            final_crop, restored, feats, pcache = rec.det_cache
            dcache = (final_crop[None], restored[None], [f[None] for f in feats],
                      [tuple(v[None] for v in pc) for pc in pcache])
            g_final, g_rest = m.det_backward(dcache, [g[None] for g in grad_det], grads)
            top, left, rows, cols = rec.window_px
            s = m.out_stride
            g = g_final + g_rest[:, top // s:(top + rows) // s, left // s:(left + cols) // s]
            grad_outs[-1] = g if grad_outs[-1] is None else grad_outs[-1] + g
        m.backbone_backward(caches, grad_outs, grads)
        return grads


def segment(session: StreamSession, frame, action):
    """Run the window ``action`` and return the full-frame mask memory."""
    if session.task != "seg":
        raise SessionError("session was not built for segmentation")
    session.forward_crop(frame, action)
    return session.mask_memory.copy()


def detect(session: StreamSession, frame, action):
    if session.task != "det":
        raise SessionError("session was not built for detection")
    return session.boxes(session.forward_crop(frame, action))


def step(session: StreamSession, frame):
    r = session.step(frame)
    return r.output, r.next_action, r.q


def stateless_predict(model: StreamModel, frame, task="seg"):
    """The full-frame network without any attention (one frame)."""
    res = model.forward_full(tc.tensor(frame, model.dtype)[None], tasks=(task,))
    if task == "seg":
        return res["seg"][0, ..., 0] > 0
    return stateless_boxes(model, res["det"])


def stateless_boxes(model, raw_levels, index=0):
    anchors = heads.all_anchors(model.det_levels())
    out = []
    for raw, anc in zip(raw_levels, anchors):
        out.extend(heads.decode(raw[index].reshape(-1, 5), anc))
    return heads.postprocess(out)
