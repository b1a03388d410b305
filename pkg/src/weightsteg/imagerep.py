"""Grayscale image representations of weight bits, plus resize/normalize/PGM io.

Images are plain numpy arrays: uint8 (h, w) before normalization, float64 in
[0, 1] after.
"""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from .errors import FormatError
from .weights_io import DType, WeightTensor


def grayscale_fourpart(tensor: WeightTensor) -> np.ndarray:
    """Tile the four byte planes of a float32 tensor into one square image.

    Each 32-bit weight splits into bytes p1..p4 from most to least
    significant. Every plane is zero-padded to the next square, reshaped
    row-major, and the planes are laid out [[p1, p2], [p3, p4]].
    """
    if tensor.dtype is not DType.F32:
        raise FormatError(
            f"grayscale-fourpart requires float32 weights, got {tensor.dtype.value}"
        )
    n = tensor.n
    if n == 0:
        raise ValueError("cannot build an image from an empty tensor")
    side = math.isqrt(n - 1) + 1  # ceil(sqrt(n))
    words = tensor.bits
    planes = []
    for shift in (24, 16, 8, 0):
        plane = np.zeros(side * side, dtype=np.uint8)
        plane[:n] = ((words >> np.uint32(shift)) & np.uint32(0xFF)).astype(np.uint8)
        planes.append(plane.reshape(side, side))
    return np.block([[planes[0], planes[1]], [planes[2], planes[3]]])


REPRESENTATIONS = {"grayscale-fourpart": grayscale_fourpart}


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 image, got {img.dtype} {img.shape}")
    return img


def resize(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; ties round to even.

    Source coordinate for output pixel d is (d + 0.5) * src/dst - 0.5,
    clamped to the source range. Interpolation is linear in x first, then
    in y, in float64; reimplementations must keep that order, since exact
    .5 rounding boundaries depend on it.
    """
    img = _check_image(img)
    src_h, src_w = img.shape
    if min(src_h, src_w, target_h, target_w) < 1:
        raise ValueError("image dimensions must be >= 1")

    sy = np.clip((np.arange(target_h) + 0.5) * (src_h / target_h) - 0.5, 0.0, src_h - 1.0)
    sx = np.clip((np.arange(target_w) + 0.5) * (src_w / target_w) - 0.5, 0.0, src_w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]

    pix = img.astype(np.float64)
    top = pix[y0[:, None], x0] * (1.0 - wx) + pix[y0[:, None], x1] * wx
    bottom = pix[y1[:, None], x0] * (1.0 - wx) + pix[y1[:, None], x1] * wx
    value = top * (1.0 - wy) + bottom * wy
    return np.rint(value).astype(np.uint8)


def normalize(img: np.ndarray) -> np.ndarray:
    """Map 0-255 pixel values to real values in [0, 1]."""
    return _check_image(img).astype(np.float64) / 255.0


def denormalize(img: np.ndarray) -> np.ndarray:
    """Inverse of normalize: scale to 0-255 and round."""
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("normalized pixels must lie in [0, 1]")
    return np.rint(img * 255.0).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    """Write a binary PGM (P5, maxval 255)."""
    img = _check_image(img)
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header tokens may be separated by whitespace and '#' comments
    pos = 0
    tokens = []
    while len(tokens) < 4:
        match = re.compile(rb"\s*(?:#[^\n]*\s*)*(\S+)").match(data, pos)
        if not match:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header fields") from None
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad PGM dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    pixels = data[pos + 1 : pos + 1 + w * h]  # single whitespace byte after maxval
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()
