"""Dense feature-map primitives.

A tensor is a C-contiguous numpy array laid out as (rows, cols, channels);
the same functions also accept a leading batch axis, (batch, rows, cols,
channels), which the training code relies on.  Dense convolutions are direct
(im2col + matmul) with float64 accumulation; depthwise ones accumulate in the
working dtype with a fixed add order.  The result is returned in the
wider of the input/weight dtypes, so float32 stays float32 and float64 inputs
are kept exact for gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
PWT_MAGIC = b"PWT1"


class RejectedInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


@dataclass
class ConvWeights:
    """Kernel and bias of a convolution.

    ``values`` has shape (kernel_rows, kernel_cols, in_channels, out_channels)
    for a dense convolution and (kernel_rows, kernel_cols, channels) for a
    depthwise one.
    """

    values: np.ndarray
    bias: np.ndarray
    depthwise: bool = False

    def __post_init__(self):
        kr, kc = self.values.shape[:2]
        if kr % 2 == 0 or kc % 2 == 0:
            raise RejectedInputError(f"kernel dims must be odd, got {kr}x{kc}")
        expected = 3 if self.depthwise else 4
        if self.values.ndim != expected:
            raise RejectedInputError(f"kernel must be rank {expected}, got {self.values.ndim}")
        if self.bias.shape != (self.out_channels,):
            raise RejectedInputError(
                f"bias shape {self.bias.shape} != ({self.out_channels},)"
            )

    @property
    def kernel_rows(self) -> int:
        return self.values.shape[0]

    @property
    def kernel_cols(self) -> int:
        return self.values.shape[1]

    @property
    def in_channels(self) -> int:
        return self.values.shape[2]

    @property
    def out_channels(self) -> int:
        return self.values.shape[2] if self.depthwise else self.values.shape[3]

    @property
    def radius(self) -> int:
        return (self.kernel_rows - 1) // 2

    @classmethod
    def zeros(cls, kr, kc, cin, cout, depthwise=False, dtype=DTYPE):
        shape = (kr, kc, cin) if depthwise else (kr, kc, cin, cout)
        return cls(np.zeros(shape, dtype), np.zeros(cout, dtype), depthwise)

    @classmethod
    def identity(cls, channels, dtype=DTYPE):
        """1x1 kernel that copies its input."""
        values = np.eye(channels, dtype=dtype).reshape(1, 1, channels, channels)
        return cls(values, np.zeros(channels, dtype))


def tensor(data, dtype=DTYPE) -> np.ndarray:
    """Coerce to a rank-3 (or batched rank-4) contiguous array."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim not in (3, 4) or min(arr.shape) < 1:
        raise RejectedInputError(f"bad tensor shape {arr.shape}")
    return arr


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise RejectedInputError(f"expected rank 3 or 4 tensor, got shape {x.shape}")


def _out_dtype(x, w):
    return np.result_type(x.dtype, w.values.dtype)


def _check_channels(x, w):
    if x.shape[-1] != w.in_channels:
        raise RejectedInputError(
            f"channel mismatch: input has {x.shape[-1]}, kernel expects {w.in_channels}"
        )


def zero_pad(x, rows, cols=None):
    """Pad the two spatial axes with ``rows``/``cols`` zeros on each side."""
    cols = rows if cols is None else cols
    xb, squeeze = _batched(x)
    out = np.pad(xb, ((0, 0), (rows, rows), (cols, cols), (0, 0)))
    return out[0] if squeeze else out


def conv2d_valid(x, w: ConvWeights, stride: int = 1):
    """VALID convolution: only positions where the kernel fits the input."""
    if w.depthwise:
        return depthwise_conv_valid(x, w, stride)
    if stride < 1:
        raise RejectedInputError("stride must be >= 1")
    _check_channels(x, w)
    xb, squeeze = _batched(x)
    kr, kc = w.kernel_rows, w.kernel_cols
    if xb.shape[1] < kr or xb.shape[2] < kc:
        raise RejectedInputError(f"input {xb.shape[1:3]} smaller than kernel {kr}x{kc}")
    dtype = _out_dtype(xb, w)
    if kr == 1 and kc == 1:
        out = _pointwise(xb[:, ::stride, ::stride], w)
    else:
        # windows: (n, ho, wo, cin, kr, kc)
        win = sliding_window_view(xb.astype(np.float64), (kr, kc), axis=(1, 2))
        win = win[:, ::stride, ::stride]
        kern = w.values.astype(np.float64).transpose(2, 0, 1, 3)
        out = np.tensordot(win, kern, axes=([3, 4, 5], [0, 1, 2]))
        out += w.bias
    out = out.astype(dtype, copy=False)
    return out[0] if squeeze else out


def conv2d_same(x, w: ConvWeights, stride: int = 1):
    """SAME convolution: zero padding of the kernel radius, ceil(n/stride) outputs."""
    _check_channels(x, w)
    return conv2d_valid(zero_pad(x, w.radius, (w.kernel_cols - 1) // 2), w, stride)


def _pointwise(xb, w):
    mat = w.values.reshape(w.in_channels, w.out_channels).astype(np.float64)
    out = xb.astype(np.float64) @ mat
    out += w.bias
    return out


def pointwise_conv(x, w: ConvWeights):
    if w.kernel_rows != 1 or w.kernel_cols != 1 or w.depthwise:
        raise RejectedInputError("pointwise_conv needs a dense 1x1 kernel")
    return conv2d_same(x, w, 1)


def depthwise_conv_valid(x, w: ConvWeights, stride: int = 1):
    """One (2k+1)^2 kernel per channel, VALID padding."""
    if not w.depthwise:
        raise RejectedInputError("depthwise_conv_valid needs depthwise weights")
    if stride < 1:
        raise RejectedInputError("stride must be >= 1")
    _check_channels(x, w)
    xb, squeeze = _batched(x)
    kr, kc = w.kernel_rows, w.kernel_cols
    n, h, wd, c = xb.shape
    if h < kr or wd < kc:
        raise RejectedInputError(f"input {(h, wd)} smaller than kernel {kr}x{kc}")
    ho = (h - kr) // stride + 1
    wo = (wd - kc) // stride + 1
    # elementwise accumulation in the working dtype: the same sequence of
    # adds for every output position, so crops and full frames agree bitwise
    dtype = _out_dtype(xb, w)
    xw = xb.astype(dtype, copy=False)
    k = w.values.astype(dtype, copy=False)
    out = np.zeros((n, ho, wo, c), dtype)
    for p in range(kr):
        for q in range(kc):
            out += xw[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] * k[p, q]
    out += w.bias.astype(dtype, copy=False)
    return out[0] if squeeze else out


def depthwise_conv_same(x, w: ConvWeights, stride: int = 1):
    return depthwise_conv_valid(zero_pad(x, w.radius, (w.kernel_cols - 1) // 2), w, stride)


# -- backward passes (hand-derived; used by the trainer) ----------------------

def conv2d_valid_backward(x, w: ConvWeights, stride: int, grad_out):
    """Gradients of ``conv2d_valid`` w.r.t. (input, kernel values, bias)."""
    if w.depthwise:
        return depthwise_conv_valid_backward(x, w, stride, grad_out)
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    gb64 = gb.astype(np.float64)
    kr, kc = w.kernel_rows, w.kernel_cols
    n, ho, wo, cout = gb.shape
    gbias = gb64.sum(axis=(0, 1, 2))
    if kr == 1 and kc == 1:
        xs = xb[:, ::stride, ::stride][:, :ho, :wo].astype(np.float64)
        gw = np.tensordot(xs, gb64, axes=([0, 1, 2], [0, 1, 2])).reshape(w.values.shape)
        gx = np.zeros(xb.shape)
        mat = w.values.reshape(w.in_channels, cout).astype(np.float64)
        gx[:, ::stride, ::stride][:, :ho, :wo] = gb64 @ mat.T
    else:
        win = sliding_window_view(xb.astype(np.float64), (kr, kc), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :ho, :wo]
        # (cin, kr, kc, cout) -> (kr, kc, cin, cout)
        gw = np.tensordot(win, gb64, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        gx = np.zeros(xb.shape)
        k64 = w.values.astype(np.float64)
        for p in range(kr):
            for q in range(kc):
                gx[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += gb64 @ k64[p, q].T
    dtype = np.result_type(xb.dtype, w.values.dtype)
    gx = gx.astype(dtype, copy=False)
    return (gx[0] if squeeze else gx), gw.astype(dtype), gbias.astype(dtype)


def depthwise_conv_valid_backward(x, w: ConvWeights, stride: int, grad_out):
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    dtype = np.result_type(xb.dtype, w.values.dtype)
    g = gb.astype(dtype, copy=False)
    xw = xb.astype(dtype, copy=False)
    k = w.values.astype(dtype, copy=False)
    kr, kc = w.kernel_rows, w.kernel_cols
    _, ho, wo, _ = gb.shape
    gx = np.zeros(xb.shape, dtype)
    gw = np.zeros(w.values.shape, np.float64)
    for p in range(kr):
        for q in range(kc):
            rs = slice(p, p + stride * (ho - 1) + 1, stride)
            cs = slice(q, q + stride * (wo - 1) + 1, stride)
            gw[p, q] = np.einsum("nhwc,nhwc->c", xw[:, rs, cs], g, dtype=np.float64)
            gx[:, rs, cs] += g * k[p, q]
    gbias = g.sum(axis=(0, 1, 2), dtype=np.float64)
    return (gx[0] if squeeze else gx), gw.astype(dtype), gbias.astype(dtype)


def conv2d_same_backward(x, w: ConvWeights, stride: int, grad_out):
    kr, kc = w.radius, (w.kernel_cols - 1) // 2
    gx, gw, gbias = conv2d_valid_backward(zero_pad(x, kr, kc), w, stride, grad_out)
    gx = gx[..., kr:gx.shape[-3] - kr, kc:gx.shape[-2] - kc, :]
    return gx, gw, gbias


# -- block copies ----------------------------------------------------------------

def crop(x, top: int, left: int, h: int, w: int):
    """Copy of the h x w block starting at (top, left)."""
    rows, cols = x.shape[-3], x.shape[-2]
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > rows or left + w > cols:
        raise RejectedInputError(
            f"crop ({top}, {left}, {h}, {w}) out of bounds for {rows}x{cols}"
        )
    return x[..., top:top + h, left:left + w, :].copy()


def paste(dst, src, top: int, left: int):
    """Copy of ``dst`` with ``src`` written at (top, left)."""
    if src.shape[-1] != dst.shape[-1]:
        raise RejectedInputError("channel mismatch in paste")
    h, w = src.shape[-3], src.shape[-2]
    if top < 0 or left < 0 or top + h > dst.shape[-3] or left + w > dst.shape[-2]:
        raise RejectedInputError(
            f"paste of {h}x{w} at ({top}, {left}) overflows {dst.shape[-3]}x{dst.shape[-2]}"
        )
    out = dst.copy()
    out[..., top:top + h, left:left + w, :] = src
    return out


# -- PWT1 files ------------------------------------------------------------------

def encode_pwt(x) -> bytes:
    x = np.asarray(x)
    if x.ndim != 3:
        raise RejectedInputError(f"PWT1 stores rank-3 tensors, got shape {x.shape}")
    header = PWT_MAGIC + struct.pack("<3I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_pwt(buf: bytes, offset: int = 0):
    """Decode one PWT1 record; returns (tensor, offset past the record)."""
    if buf[offset:offset + 4] != PWT_MAGIC:
        raise RejectedInputError("missing PWT1 magic")
    rows, cols, channels = struct.unpack_from("<3I", buf, offset + 4)
    start = offset + 16
    end = start + 4 * rows * cols * channels
    if end > len(buf):
        raise RejectedInputError("truncated PWT1 payload")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols * channels, offset=start)
    return data.reshape(rows, cols, channels).astype(DTYPE), end


def write_pwt(path, x):
    Path(path).write_bytes(encode_pwt(x))


def read_pwt(path):
    x, _ = decode_pwt(Path(path).read_bytes())
    return x


def save_arrays(path, arrays: dict):
    """Write named arrays of any rank as PWT1 records plus a text manifest.

    Each array is stored as a (1, 1, size) record; ``<path>.manifest`` lists
    ``name dim0xdim1x...`` in record order so shapes round-trip.
    """
    path = Path(path)
    blobs, lines = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=DTYPE)
        if " " in name or arr.size == 0:
            raise RejectedInputError(f"cannot store array {name!r}")
        blobs.append(encode_pwt(arr.reshape(1, 1, arr.size)))
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {shape}")
    path.write_bytes(b"".join(blobs))
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_arrays(path) -> dict:
    path = Path(path)
    buf = path.read_bytes()
    manifest = Path(str(path) + ".manifest").read_text().split("\n")
    out, offset = {}, 0
    for line in manifest:
        if not line.strip():
            continue
        name, shape = line.split()
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        rec, offset = decode_pwt(buf, offset)
        out[name] = rec.reshape(dims)
    if offset != len(buf):
        raise RejectedInputError("manifest does not cover every record")
    return out
