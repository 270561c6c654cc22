"""Synthetic fingerprints with known pose, plus degradation recipes.

All operations are pure functions of (inputs, seed): the same recipe on the
same image always yields byte-identical output, so callers may parallelize
across seeds freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DensefpError, EmptyOverlap, RecipeError, SizeMismatch
from .image import GrayImage, load_image, sample_bilinear, sample_nearest, to_u8
from .pose import Pose2D

FIELD_STRIDE = 16  # displacement grid spacing in pixels

# Ridge spacing at 500 ppi is roughly 7-11 px.
RIDGE_PERIOD_RANGE = (7.0, 11.0)

_DRY_MOIST_MAX_RADIUS = 3  # px of min/max filtering at parameter = 1.0


# ---------------------------------------------------------------------------
# Synthetic fingerprint generation


def generate_synthetic_fingerprint(seed: int, size: int = 512) -> Tuple[GrayImage, Pose2D, np.ndarray]:
    """Render a ridge-like pattern with known ground-truth pose.

    Ridges are level sets of a smooth scalar phase field: a tilted linear
    ramp (one ridge per period), a low-order trigonometric perturbation, and
    0-2 winding terms acting as singular points.  The foreground is an
    ellipse whose centre and long-axis direction define the returned pose;
    the long-axis sign is the generator's own (drawn within +/-30 degrees
    of "up").
    """
    if size < 128:
        raise DensefpError(f"size must be >= 128, got {size}")
    rng = np.random.default_rng(seed)

    period = rng.uniform(*RIDGE_PERIOD_RANGE)
    ramp_dir = rng.uniform(-np.pi, np.pi)
    theta_gt = rng.uniform(-30.0, 30.0)
    cx = size / 2.0 + rng.uniform(-size / 16.0, size / 16.0)
    cy = size / 2.0 + rng.uniform(-size / 16.0, size / 16.0)
    a_long = size * rng.uniform(0.34, 0.42)
    b_short = a_long * rng.uniform(0.68, 0.85)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    # Phase field: |grad psi| ~ 1/period so ridge spacing tracks `period`.
    psi = (xs * np.cos(ramp_dir) + ys * np.sin(ramp_dir)) / period
    n_waves = int(rng.integers(4, 7))
    for _ in range(n_waves):
        amp = rng.uniform(0.8, 1.8)
        cycles = rng.uniform(1.0, 2.5)
        wave_dir = rng.uniform(-np.pi, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        kx = cycles * np.cos(wave_dir) / size
        ky = cycles * np.sin(wave_dir) / size
        psi += amp * np.sin(2.0 * np.pi * (kx * xs + ky * ys) + phase)
    n_singular = int(rng.choice([0, 1, 2], p=[0.15, 0.35, 0.5]))
    for _ in range(n_singular):
        r = rng.uniform(size / 8.0, size / 4.0)
        ang = rng.uniform(-np.pi, np.pi)
        sx = cx + r * np.cos(ang)
        sy = cy + r * np.sin(ang)
        winding = float(rng.choice((-1.0, 1.0)))
        psi += winding * np.arctan2(ys - sy, xs - sx) / (2.0 * np.pi)

    # Soft-thresholded sinusoid; the mild blur keeps ridge flanks smooth
    # enough for bilinear resampling to round-trip faithfully.
    stripes = np.sin(2.0 * np.pi * psi)
    intensity = 127.5 + 120.0 * np.tanh(stripes)
    intensity = ndimage.gaussian_filter(intensity, 0.9)

    theta_rad = np.radians(theta_gt)
    e_long = np.array([-np.sin(theta_rad), -np.cos(theta_rad)])
    e_short = np.array([np.cos(theta_rad), -np.sin(theta_rad)])
    relx = xs - cx
    rely = ys - cy
    u = relx * e_short[0] + rely * e_short[1]
    v = relx * e_long[0] + rely * e_long[1]
    mask = (u / b_short) ** 2 + (v / a_long) ** 2 <= 1.0

    canvas = np.full((size, size), 255.0)
    canvas[mask] = intensity[mask]
    image = GrayImage(to_u8(canvas), foreground=mask)
    return image, Pose2D(cx, cy, theta_gt), mask


# ---------------------------------------------------------------------------
# Elastic distortion


@dataclass(frozen=True)
class DistortionField:
    """Displacement vectors (pixels) on a stride-16 grid.

    `dx`/`dy` have shape (grid_h, grid_w); application upsamples them
    bilinearly to the target canvas.  Zero magnitude means a zero field.
    """

    dx: np.ndarray
    dy: np.ndarray
    magnitude: float

    def as_dense(self, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        h, w = shape
        nb_y = -(-h // FIELD_STRIDE)
        nb_x = -(-w // FIELD_STRIDE)
        if self.dx.shape[0] < nb_y + 1 or self.dx.shape[1] < nb_x + 1:
            raise SizeMismatch(f"field grid {self.dx.shape} too small for canvas {shape}")
        frac = np.arange(FIELD_STRIDE, dtype=np.float64) / FIELD_STRIDE
        w1 = frac
        w0 = 1.0 - frac

        def upsample(grid: np.ndarray) -> np.ndarray:
            a = grid[:nb_y, :nb_x]
            b = grid[:nb_y, 1 : nb_x + 1]
            c = grid[1 : nb_y + 1, :nb_x]
            dd = grid[1 : nb_y + 1, 1 : nb_x + 1]
            wy0 = w0[None, :, None, None]
            wy1 = w1[None, :, None, None]
            wx0 = w0[None, None, None, :]
            wx1 = w1[None, None, None, :]
            dense = (
                a[:, None, :, None] * wy0 * wx0
                + b[:, None, :, None] * wy0 * wx1
                + c[:, None, :, None] * wy1 * wx0
                + dd[:, None, :, None] * wy1 * wx1
            )
            return dense.reshape(nb_y * FIELD_STRIDE, nb_x * FIELD_STRIDE)[:h, :w]

        return upsample(self.dx), upsample(self.dy)


def make_distortion_field(shape: Tuple[int, int], seed: int, magnitude: float) -> DistortionField:
    """Gaussian-smoothed white noise scaled to RMS displacement = magnitude."""
    if magnitude < 0:
        raise DensefpError("magnitude must be >= 0")
    h, w = shape
    gh = h // FIELD_STRIDE + 2
    gw = w // FIELD_STRIDE + 2
    if magnitude == 0.0:
        return DistortionField(np.zeros((gh, gw)), np.zeros((gh, gw)), 0.0)
    rng = np.random.default_rng(seed)
    raw_dx = ndimage.gaussian_filter(rng.standard_normal((gh, gw)), sigma=1.2, mode="reflect")
    raw_dy = ndimage.gaussian_filter(rng.standard_normal((gh, gw)), sigma=1.2, mode="reflect")
    field = DistortionField(raw_dx, raw_dy, magnitude)
    dense_dx, dense_dy = field.as_dense(shape)
    rms = float(np.sqrt(np.mean(dense_dx**2 + dense_dy**2)))
    scale = magnitude / rms if rms > 0 else 0.0
    return DistortionField(raw_dx * scale, raw_dy * scale, magnitude)


def apply_elastic_distortion(image: GrayImage, seed: int, magnitude: float) -> GrayImage:
    """Warp by a random smooth displacement field (inverse mapping, bilinear)."""
    if magnitude == 0.0:
        return GrayImage(image.pixels.copy(), ppi=image.ppi,
                         foreground=None if image.foreground is None else image.foreground.copy())
    shape = image.pixels.shape
    field = make_distortion_field(shape, seed, magnitude)
    dense_dx, dense_dy = field.as_dense(shape)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs + dense_dx
    sy = ys + dense_dy
    vals = sample_bilinear(image.as_float(), sx, sy, 255.0)
    fg = None
    if image.foreground is not None:
        fg = sample_nearest(image.foreground, sx, sy, False).astype(bool)
    return GrayImage(to_u8(vals), ppi=image.ppi, foreground=fg)


# ---------------------------------------------------------------------------
# Degradation recipes


@dataclass(frozen=True)
class DegradationRecipe:
    """Deterministic degradation chain, applied in a fixed order:

    blur -> dryness -> moisture -> overlay -> lines -> digit stamps.
    """

    blur_sigma: float = 0.0
    dryness: float = 0.0
    moisture: float = 0.0
    overlay_path: Optional[str] = None
    overlay_alpha: float = 0.0
    n_lines: int = 0
    n_digit_stamps: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.blur_sigma < 0:
            raise RecipeError("blur_sigma must be >= 0")
        for name in ("dryness", "moisture", "overlay_alpha"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise RecipeError(f"{name} must be in [0, 1], got {val}")
        if self.n_lines < 0 or self.n_digit_stamps < 0:
            raise RecipeError("counts must be >= 0")

    def is_identity(self) -> bool:
        return (
            self.blur_sigma == 0.0
            and self.dryness == 0.0
            and self.moisture == 0.0
            and (self.overlay_path is None or self.overlay_alpha == 0.0)
            and self.n_lines == 0
            and self.n_digit_stamps == 0
        )


_RECIPE_KEYS = {
    "blur_sigma": float,
    "dryness": float,
    "moisture": float,
    "overlay_path": str,
    "overlay_alpha": float,
    "n_lines": int,
    "n_digit_stamps": int,
    "seed": int,
}


def load_recipe(path) -> DegradationRecipe:
    """Parse a key=value recipe file; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RecipeError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _RECIPE_KEYS:
            raise RecipeError(f"line {lineno}: unknown recipe key {key!r}")
        try:
            values[key] = _RECIPE_KEYS[key](raw)
        except ValueError as exc:
            raise RecipeError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return DegradationRecipe(**values)


def save_recipe(path, recipe: DegradationRecipe) -> None:
    lines = []
    for key in _RECIPE_KEYS:
        val = getattr(recipe, key)
        if key == "overlay_path" and val is None:
            continue
        lines.append(f"{key} = {val}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def _draw_segment(canvas: np.ndarray, x0, y0, x1, y1, width: float, value: float) -> None:
    """Stamp a dark line segment onto the canvas (occlusion: min blend)."""
    h, w = canvas.shape
    xmin = int(max(0, np.floor(min(x0, x1) - width)))
    xmax = int(min(w - 1, np.ceil(max(x0, x1) + width)))
    ymin = int(max(0, np.floor(min(y0, y1) - width)))
    ymax = int(min(h - 1, np.ceil(max(y0, y1) + width)))
    if xmin > xmax or ymin > ymax:
        return
    ys, xs = np.mgrid[ymin : ymax + 1, xmin : xmax + 1].astype(np.float64)
    vx, vy = x1 - x0, y1 - y0
    seg_len2 = vx * vx + vy * vy
    if seg_len2 == 0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - x0) * vx + (ys - y0) * vy) / seg_len2, 0.0, 1.0)
    dist = np.hypot(xs - (x0 + t * vx), ys - (y0 + t * vy))
    hit = dist <= width / 2.0
    region = canvas[ymin : ymax + 1, xmin : xmax + 1]
    region[hit] = np.minimum(region[hit], value)


# 7-segment layout on a unit box: (x0, y0, x1, y1) per segment.
_SEG_COORDS = {
    "a": (0.1, 0.0, 0.9, 0.0),
    "b": (1.0, 0.1, 1.0, 0.9),
    "c": (1.0, 1.1, 1.0, 1.9),
    "d": (0.1, 2.0, 0.9, 2.0),
    "e": (0.0, 1.1, 0.0, 1.9),
    "f": (0.0, 0.1, 0.0, 0.9),
    "g": (0.1, 1.0, 0.9, 1.0),
}
_DIGIT_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcfgd",
}


def _stamp_digit(canvas: np.ndarray, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    box_h = float(rng.uniform(24, 40))
    box_w = box_h * 0.55
    x = rng.uniform(box_w, w - 2 * box_w)
    y = rng.uniform(box_h, h - 2 * box_h)
    digit = int(rng.integers(0, 10))
    value = float(rng.uniform(0, 60))
    width = max(2.0, box_h / 12.0)
    for seg in _DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = _SEG_COORDS[seg]
        _draw_segment(
            canvas,
            x + x0 * box_w, y + y0 * box_h / 2.0,
            x + x1 * box_w, y + y1 * box_h / 2.0,
            width, value,
        )


def degrade(image: GrayImage, recipe: DegradationRecipe, overlay: Optional[GrayImage] = None) -> GrayImage:
    """Apply the recipe's degradation chain in its fixed order.

    The overlay image may be passed pre-loaded; otherwise it is read from
    recipe.overlay_path when an overlay step is requested.
    """
    if recipe.is_identity():
        return GrayImage(image.pixels.copy(), ppi=image.ppi,
                         foreground=None if image.foreground is None else image.foreground.copy())
    rng = np.random.default_rng(recipe.seed)
    img = image.as_float()

    if recipe.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=recipe.blur_sigma, mode="nearest")

    if recipe.dryness > 0:
        radius = int(round(_DRY_MOIST_MAX_RADIUS * recipe.dryness))
        if radius > 0:
            img = ndimage.minimum_filter(img, size=2 * radius + 1, mode="nearest")
        gamma = 1.0 + recipe.dryness
        img = 255.0 * (img / 255.0) ** gamma

    if recipe.moisture > 0:
        radius = int(round(_DRY_MOIST_MAX_RADIUS * recipe.moisture))
        if radius > 0:
            img = ndimage.maximum_filter(img, size=2 * radius + 1, mode="nearest")
        gamma = 1.0 / (1.0 + recipe.moisture)
        img = 255.0 * (img / 255.0) ** gamma

    if recipe.overlay_path is not None and recipe.overlay_alpha > 0:
        if overlay is None:
            overlay = load_image(recipe.overlay_path)
        if overlay.pixels.shape != image.pixels.shape:
            raise SizeMismatch(
                f"overlay {overlay.pixels.shape} does not match image {image.pixels.shape}"
            )
        img = (1.0 - recipe.overlay_alpha) * img + recipe.overlay_alpha * overlay.as_float()

    h, w = img.shape
    margin = 0.1
    for _ in range(recipe.n_lines):
        x0 = rng.uniform(margin * w, (1 - margin) * w)
        y0 = rng.uniform(margin * h, (1 - margin) * h)
        x1 = rng.uniform(margin * w, (1 - margin) * w)
        y1 = rng.uniform(margin * h, (1 - margin) * h)
        width = float(rng.uniform(2.0, 5.0))
        value = float(rng.uniform(0, 80))
        _draw_segment(img, x0, y0, x1, y1, width, value)

    for _ in range(recipe.n_digit_stamps):
        _stamp_digit(img, rng)

    return GrayImage(to_u8(img), ppi=image.ppi,
                     foreground=None if image.foreground is None else image.foreground.copy())


# ---------------------------------------------------------------------------
# Histogram matching


def histogram_match(image: GrayImage, reference: GrayImage) -> GrayImage:
    """Map image intensities onto the reference's empirical CDF.

    CDFs come from foreground pixels when masks exist (whole image
    otherwise); in the masked case the mapping is also applied only inside
    the foreground so background stays untouched.  The level mapping is
    monotone by construction.
    """
    src_px = image.pixels[image.foreground] if image.foreground is not None else image.pixels
    ref_px = reference.pixels[reference.foreground] if reference.foreground is not None else reference.pixels
    if src_px.size == 0 or ref_px.size == 0:
        raise DensefpError("histogram_match needs non-empty pixel sets")
    src_cdf = np.cumsum(np.bincount(src_px.ravel(), minlength=256)) / src_px.size
    ref_cdf = np.cumsum(np.bincount(ref_px.ravel(), minlength=256)) / ref_px.size
    # Smallest reference level whose CDF reaches the source CDF.
    lut = np.searchsorted(ref_cdf, src_cdf, side="left").clip(0, 255).astype(np.uint8)
    if image.foreground is None:
        out = lut[image.pixels]
        return GrayImage(out, ppi=image.ppi)
    out = image.pixels.copy()
    out[image.foreground] = lut[image.pixels[image.foreground]]
    return GrayImage(out, ppi=image.ppi, foreground=image.foreground.copy())


# ---------------------------------------------------------------------------
# Incomplete-fingerprint simulation


def simulate_incomplete(
    rolled: GrayImage,
    plain_mask: np.ndarray,
    seed: int,
    magnitude_range: Tuple[float, float] = (1.0, 4.0),
    shift_range: Tuple[int, int] = (-20, 20),
) -> Tuple[GrayImage, np.ndarray]:
    """Crop a rolled print to a plain-impression mask, then warp and shift.

    The masked print is elastically distorted (RMS magnitude drawn from
    magnitude_range) and intensity-shifted (levels drawn from shift_range,
    clamped; applied inside the transformed foreground so the background
    stays white).  Returns the degraded image and its transformed mask.
    The range parameters exist so tests can force the zero-magnitude path;
    defaults follow the simulation recipe.
    """
    plain_mask = np.asarray(plain_mask).astype(bool)
    if plain_mask.shape != rolled.pixels.shape:
        raise SizeMismatch(
            f"plain mask {plain_mask.shape} does not match image {rolled.pixels.shape}"
        )
    rolled_fg = rolled.foreground if rolled.foreground is not None else np.ones_like(plain_mask)
    combined = plain_mask & rolled_fg
    if not combined.any():
        raise EmptyOverlap("plain mask does not intersect the rolled foreground")

    canvas = rolled.as_float()
    canvas[~plain_mask] = 255.0
    masked = GrayImage(to_u8(canvas), ppi=rolled.ppi, foreground=combined)

    rng = np.random.default_rng(seed)
    magnitude = float(rng.uniform(*magnitude_range))
    warp_seed = int(rng.integers(0, 2**63 - 1))
    shift = int(rng.integers(shift_range[0], shift_range[1] + 1))

    warped = apply_elastic_distortion(masked, warp_seed, magnitude)
    out_mask = warped.foreground if warped.foreground is not None else combined
    vals = warped.as_float()
    shifted = np.where(out_mask, np.clip(vals + shift, 0.0, 255.0), vals)
    return GrayImage(to_u8(shifted), ppi=rolled.ppi, foreground=out_mask), out_mask
