"""Stateful replacement for a SAME-padded convolution.

A cell keeps a full-frame memory at its layer's resolution.  Each step the
current crop's features overwrite the window block of that memory; the crop
is then encased with a k-wide ring read back from memory (zero beyond the
memory bounds) and convolved with VALID padding, so the output has the same
spatial size it would have had under SAME padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor_core as tc


class AlignmentError(ValueError):
    """A window offset does not land on an integer memory coordinate."""


def as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(v).limit_denominator(1 << 16)
    return Fraction(v)


@dataclass(frozen=True)
class CellGeometry:
    crop_rows: int
    crop_cols: int
    rel_height: Fraction
    rel_width: Fraction
    radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rel_height", as_fraction(self.rel_height))
        object.__setattr__(self, "rel_width", as_fraction(self.rel_width))
        if not (0 < self.rel_height <= 1 and 0 < self.rel_width <= 1):
            raise tc.RejectedInputError("relative window size must be in (0, 1]")
        if self.crop_rows < 1 or self.crop_cols < 1 or self.radius < 0:
            raise tc.RejectedInputError("bad crop dims or radius")
        rows = self.crop_rows / self.rel_height
        cols = self.crop_cols / self.rel_width
        if rows.denominator != 1 or cols.denominator != 1:
            raise AlignmentError(
                f"crop {self.crop_rows}x{self.crop_cols} at relative size "
                f"{self.rel_height}x{self.rel_width} gives a fractional state"
            )

    @property
    def state_rows(self) -> int:
        return int(self.crop_rows / self.rel_height)

    @property
    def state_cols(self) -> int:
        return int(self.crop_cols / self.rel_width)

    def origin(self, a, b) -> tuple[int, int]:
        """Memory coordinates of the window whose top-left corner is (a, b)."""
        top = as_fraction(a) * self.state_rows
        left = as_fraction(b) * self.state_cols
        if top.denominator != 1 or left.denominator != 1:
            raise AlignmentError(f"window ({a}, {b}) is not aligned to the {self.state_rows}x{self.state_cols} grid")
        top, left = int(top), int(left)
        if top < 0 or left < 0 or top + self.crop_rows > self.state_rows or left + self.crop_cols > self.state_cols:
            raise AlignmentError(f"window ({a}, {b}) leaves the state bounds")
        return top, left


@dataclass
class CellState:
    memory: np.ndarray
    geometry: CellGeometry
    last_window: tuple[Fraction, Fraction] | None = field(default=None)

    @classmethod
    def zeros(cls, geometry: CellGeometry, channels: int, dtype=tc.DTYPE):
        mem = np.zeros((geometry.state_rows, geometry.state_cols, channels), dtype)
        return cls(mem, geometry)

    @property
    def channels(self) -> int:
        return self.memory.shape[-1]


def state_update(prev: CellState, x, a, b) -> CellState:
    g = prev.geometry
    if x.shape != (g.crop_rows, g.crop_cols, prev.channels):
        raise tc.RejectedInputError(
            f"crop shape {x.shape} != {(g.crop_rows, g.crop_cols, prev.channels)}"
        )
    top, left = g.origin(a, b)
    memory = tc.paste(prev.memory, x.astype(prev.memory.dtype, copy=False), top, left)
    return CellState(memory, g, (as_fraction(a), as_fraction(b)))


def feature_propagate(state: CellState, a, b):
    """The current window block of memory encased by a k-wide ring.

    Ring entries outside the memory bounds are zero.
    """
    g = state.geometry
    k = g.radius
    top, left = g.origin(a, b)
    out = np.zeros((g.crop_rows + 2 * k, g.crop_cols + 2 * k, state.channels), state.memory.dtype)
    r0, r1 = max(top - k, 0), min(top + g.crop_rows + k, g.state_rows)
    c0, c1 = max(left - k, 0), min(left + g.crop_cols + k, g.state_cols)
    out[r0 - (top - k):r1 - (top - k), c0 - (left - k):c1 - (left - k)] = state.memory[r0:r1, c0:c1]
    return out


def patchwork_conv(x, a, b, prev: CellState, w: tc.ConvWeights, stride: int = 1, context: bool = True):
    """Stateful convolution of one crop; returns (output, next state).

    With ``context=False`` the ring is zero-filled instead of read from memory
    (memory is still updated), i.e. the cell degrades to a plain SAME conv.
    """
    g = prev.geometry
    if w.radius != g.radius:
        raise tc.RejectedInputError(f"kernel radius {w.radius} != cell radius {g.radius}")
    if g.crop_rows % stride or g.crop_cols % stride:
        raise tc.RejectedInputError(f"stride {stride} does not divide crop {g.crop_rows}x{g.crop_cols}")
    top, left = g.origin(a, b)
    if top % stride or left % stride:
        raise AlignmentError(f"window offset ({top}, {left}) is not a multiple of stride {stride}")
    nxt = state_update(prev, x, a, b)
    xhat = feature_propagate(nxt, a, b) if context else tc.zero_pad(x, g.radius)
    return tc.conv2d_valid(xhat, w, stride), nxt


def reset(state: CellState) -> CellState:
    return CellState(np.zeros_like(state.memory), state.geometry, None)


# -- checkpoint / resume -----------------------------------------------------------

_HEADER = "PWCELL1"


def encode_state(state: CellState) -> bytes:
    g = state.geometry
    lines = [
        _HEADER,
        f"crop_rows={g.crop_rows}",
        f"crop_cols={g.crop_cols}",
        f"rel_height={g.rel_height}",
        f"rel_width={g.rel_width}",
        f"radius={g.radius}",
        "last_window=" + ("none" if state.last_window is None else f"{state.last_window[0]},{state.last_window[1]}"),
        "",
    ]
    return "\n".join(lines).encode() + b"\n" + tc.encode_pwt(state.memory)


def decode_state(buf: bytes) -> CellState:
    head, sep, payload = buf.partition(b"\n\n")
    if not sep:
        raise tc.RejectedInputError("cell checkpoint has no header terminator")
    lines = head.decode().split("\n")
    if lines[0] != _HEADER:
        raise tc.RejectedInputError("not a cell checkpoint")
    fields = dict(line.split("=", 1) for line in lines[1:])
    geometry = CellGeometry(
        int(fields["crop_rows"]), int(fields["crop_cols"]),
        Fraction(fields["rel_height"]), Fraction(fields["rel_width"]), int(fields["radius"]),
    )
    memory, _ = tc.decode_pwt(payload)
    lw = fields["last_window"]
    last = None if lw == "none" else tuple(Fraction(v) for v in lw.split(","))
    if memory.shape[:2] != (geometry.state_rows, geometry.state_cols):
        raise tc.RejectedInputError("memory shape disagrees with geometry")
    return CellState(memory, geometry, last)


def save_state(path, state: CellState):
    Path(path).write_bytes(encode_state(state))


def load_state(path) -> CellState:
    return decode_state(Path(path).read_bytes())


def clone(state: CellState) -> CellState:
    return replace(state, memory=state.memory.copy())
