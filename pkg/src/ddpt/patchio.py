"""Image file I/O, patch extraction and overlapping-patch aggregation.

Images are 2-D float64 arrays with values in [0, 255]; color images (PPM)
are (H, W, 3).  Patches are vectorized row-major.  Extraction anchors the
sliding grid at multiples of the stride and always includes the last valid
row/column, so aggregation covers every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError


@dataclass
class PatchSet:
    """Vectorized patches plus the geometry needed to reassemble an image."""

    data: np.ndarray       # (N, patch_size**2) float64, row-major pixels
    anchors: np.ndarray    # (N, 2) int, top-left (row, col) of each patch
    patch_size: int
    stride: int
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.patch_size ** 2


def sliding_anchors(length: int, patch: int, stride: int) -> np.ndarray:
    """Anchor offsets {0, s, 2s, ...} plus the forced final anchor at length - patch."""
    last = length - patch
    anchors = list(range(0, last + 1, stride))
    if anchors[-1] != last:
        anchors.append(last)
    return np.asarray(anchors, dtype=np.int64)


def extract_patches(image: np.ndarray, patch_size: int, stride: int) -> PatchSet:
    """Slide a patch_size x patch_size window over the image with the given stride."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    if h < patch_size or w < patch_size:
        raise DimensionError(f"image {h}x{w} smaller than patch size {patch_size}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = sliding_anchors(h, patch_size, stride)
    cols = sliding_anchors(w, patch_size, stride)
    n = len(rows) * len(cols)
    d = patch_size * patch_size
    data = np.empty((n, d))
    anchors = np.empty((n, 2), dtype=np.int64)
    i = 0
    for r in rows:
        for c in cols:
            data[i] = image[r:r + patch_size, c:c + patch_size].reshape(d)
            anchors[i] = (r, c)
            i += 1
    return PatchSet(data=data, anchors=anchors, patch_size=patch_size,
                    stride=stride, height=h, width=w)


def aggregate_patches(data: np.ndarray, anchors: np.ndarray, patch_size: int,
                      height: int, width: int, clip: bool = True) -> np.ndarray:
    """Average overlapping patch estimates back into an image.

    Every pixel is the uniform average of all patch estimates covering it.
    Raises :class:`DimensionError` if any pixel is left uncovered.
    """
    data = np.asarray(data, dtype=float)
    if data.shape[0] != anchors.shape[0]:
        raise DimensionError("patch estimates and anchors disagree in count")
    if data.shape[1] != patch_size * patch_size:
        raise DimensionError("patch estimates disagree with patch size")
    acc = np.zeros((height, width))
    counts = np.zeros((height, width), dtype=np.int64)
    p = patch_size
    for est, (r, c) in zip(data, anchors):
        acc[r:r + p, c:c + p] += est.reshape(p, p)
        counts[r:r + p, c:c + p] += 1
    if np.any(counts == 0):
        raise DimensionError("aggregation left uncovered pixels")
    out = acc / counts
    if clip:
        out = np.clip(out, 0.0, 255.0)
    return out


def _read_header_tokens(raw: bytes, magic: bytes):
    """Parse a netpbm header: magic, then 3 whitespace-separated numeric tokens.

    Comments (# to end of line) are allowed anywhere in the header.  Returns
    (width, height, maxval, payload_offset); exactly one whitespace byte
    separates the maxval token from the payload.
    """
    if not raw.startswith(magic):
        raise FormatError(f"bad magic, expected {magic!r}")
    pos = len(magic)
    tokens = []
    while len(tokens) < 3:
        # skip whitespace and comments
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise FormatError(f"non-numeric header token {tok!r}")
        tokens.append(int(tok))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("missing whitespace before payload")
    pos += 1
    width, height, maxval = tokens
    return width, height, maxval, pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    width, height, maxval, offset = _read_header_tokens(raw, magic)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    expected = width * height * channels
    payload = raw[offset:]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(float)
    if channels == 1:
        return pixels.reshape(height, width)
    return pixels.reshape(height, width, channels)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=float), 0.0, 255.0)).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file with maxval 255 into an (H, W) float array."""
    return _read_netpbm(path, b"P5", 1)


def write_pgm(image: np.ndarray, path) -> None:
    """Write an (H, W) array as binary PGM, clamping and rounding to [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError("write_pgm expects a 2-D image")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(_quantize(image).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM file with maxval 255 into an (H, W, 3) float array."""
    return _read_netpbm(path, b"P6", 3)


def write_ppm(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) array as binary PPM, clamping and rounding to [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError("write_ppm expects an (H, W, 3) image")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(_quantize(image).tobytes())
