"""Binary PGM (P5) and PPM (P6) files, 8 bits per sample."""

from pathlib import Path

import numpy as np

from .tensor_core import RejectedInputError


def write_pnm(path, image):
    """uint8 image of shape (rows, cols) or (rows, cols, 1) -> P5, (rows, cols, 3) -> P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise RejectedInputError("PNM writer expects uint8")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise RejectedInputError(f"cannot write image of shape {img.shape}")
    header = b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0])
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise RejectedInputError("only 8-bit P5/P6 files are supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, np.uint8, count=width * height * channels, offset=pos)
    return data.reshape(height, width, channels) if channels == 3 else data.reshape(height, width)


def frame_to_uint8(frame) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def uint8_to_frame(img) -> np.ndarray:
    img = np.asarray(img, np.float32) / 255.0
    return img[:, :, None] if img.ndim == 2 else img


def mask_to_uint8(mask) -> np.ndarray:
    return np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
