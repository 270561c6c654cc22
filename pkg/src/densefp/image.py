"""8-bit grayscale fingerprint raster with optional foreground mask.

Images follow the scanned-fingerprint convention: 0 is black ridge ink,
255 is white background.  All pipeline inputs are assumed to be at (or
rescaled to) 500 ppi.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DensefpError, NoForeground

DEFAULT_PPI = 500.0

# Internal foreground segmentation: a pixel is foreground when the local
# standard deviation over a 16x16 window exceeds this many intensity levels.
SEGMENT_WINDOW = 16
SEGMENT_STD_THRESHOLD = 12.0


@dataclass
class GrayImage:
    """Row-major 8-bit grayscale raster.

    pixels      (height, width) uint8 array
    ppi         capture resolution, pixels per inch
    foreground  optional boolean mask, same shape as pixels
    """

    pixels: np.ndarray
    ppi: float = DEFAULT_PPI
    foreground: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise DensefpError("image pixels must be a non-empty 2-D array")
        if px.dtype != np.uint8:
            px = np.clip(np.round(px), 0, 255).astype(np.uint8)
        self.pixels = px
        if self.ppi <= 0:
            raise DensefpError("ppi must be positive")
        if self.foreground is not None:
            fg = np.asarray(self.foreground).astype(bool)
            if fg.shape != px.shape:
                raise DensefpError("foreground mask shape must match pixels")
            self.foreground = fg

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


def estimate_foreground(image: GrayImage) -> np.ndarray:
    """Segment fingerprint area by local-variance thresholding.

    Local standard deviation over a sliding 16x16 window above 12 levels
    marks foreground; one 3x3 morphological closing removes pinholes.
    """
    img = image.as_float()
    mean = ndimage.uniform_filter(img, size=SEGMENT_WINDOW, mode="reflect")
    mean_sq = ndimage.uniform_filter(img * img, size=SEGMENT_WINDOW, mode="reflect")
    var = np.maximum(mean_sq - mean * mean, 0.0)
    fg = np.sqrt(var) > SEGMENT_STD_THRESHOLD
    fg = ndimage.binary_closing(fg, structure=np.ones((3, 3), bool), iterations=1)
    return fg


def require_foreground(image: GrayImage) -> np.ndarray:
    """Return the stored mask, or segment one; raise NoForeground if empty."""
    fg = image.foreground if image.foreground is not None else estimate_foreground(image)
    if not fg.any():
        raise NoForeground("image has no foreground pixels")
    return fg


# ---------------------------------------------------------------------------
# Resampling helpers shared by the alignment and distortion code.


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float) -> np.ndarray:
    """Bilinear lookup of float image `img` at (xs, ys); outside -> fill.

    Corners that fall off the raster contribute the fill value weighted by
    their bilinear coefficient, so the transition to background is smooth
    and integer coordinates reproduce pixels exactly.  Implemented by
    sampling a one-pixel fill ring around the raster, which gives the same
    result without per-corner bounds tests.
    """
    h, w = img.shape
    padded = np.full((h + 2, w + 2), fill, dtype=np.float64)
    padded[1:-1, 1:-1] = img
    # Shift into padded coordinates; anything at distance > 1 outside the
    # raster lands inside the fill ring and evaluates to pure fill.
    px = np.clip(xs + 1.0, 0.0, w + 1.0)
    py = np.clip(ys + 1.0, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(px), w).astype(np.intp)
    y0 = np.minimum(np.floor(py), h).astype(np.intp)
    fx = px - x0
    fy = py - y0
    top = padded[y0, x0] * (1.0 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1.0 - fx) + padded[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bottom * fy


def sample_nearest(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill) -> np.ndarray:
    """Nearest-neighbour lookup; outside -> fill. Keeps binary masks binary."""
    h, w = img.shape
    padded = np.full((h + 2, w + 2), fill, dtype=img.dtype)
    padded[1:-1, 1:-1] = img
    ix = np.clip(np.round(xs).astype(np.intp) + 1, 0, w + 1)
    iy = np.clip(np.round(ys).astype(np.intp) + 1, 0, h + 1)
    return padded[iy, ix]


def to_u8(img: np.ndarray) -> np.ndarray:
    """Round-half-up conversion of a float image to uint8 with clamping."""
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# File I/O: binary PGM (P5) and PNG, both 8-bit grayscale.


def save_image(path, image: GrayImage) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _save_pgm(path, image.pixels)
    elif path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(image.pixels, mode="L").save(path)
    else:
        raise DensefpError(f"unsupported image format: {path.suffix}")


def load_image(path, ppi: float = DEFAULT_PPI) -> GrayImage:
    path = Path(path)
    if not path.exists():
        raise DensefpError(f"no such image file: {path}")
    if path.suffix.lower() == ".pgm":
        return GrayImage(_load_pgm(path), ppi=ppi)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        return GrayImage(arr, ppi=ppi)
    raise DensefpError(f"unsupported image format: {path.suffix}")


def _save_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _load_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DensefpError(f"truncated PGM header: {path}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise DensefpError(f"not a binary PGM (P5) file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DensefpError(f"only 8-bit PGM supported, maxval={maxval}: {path}")
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise DensefpError(f"PGM pixel data truncated: {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
