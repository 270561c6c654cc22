"""2D fingerprint pose and canonical-frame alignment.

Convention (fixed here, external pose files must match): orientation theta
is in degrees, counter-clockwise positive as the image is normally viewed,
theta = 0 meaning the finger points "up" (towards row 0).  Alignment maps
the pose centre to the canvas centre and rotates by -theta so the finger
axis becomes vertical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import DensefpError, InvalidArgument, InvalidPose, SizeMismatch
from .image import GrayImage, require_foreground, sample_bilinear, sample_nearest, to_u8

BACKGROUND_FILL = 255.0

# Near-isotropic foregrounds have no usable principal axis; below this
# relative eigenvalue gap the baseline estimator reports theta = 0.
ISOTROPY_TOLERANCE = 0.01


def normalize_angle(theta: float) -> float:
    """Wrap an angle in degrees into [-180, 180)."""
    return float((theta + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class Pose2D:
    """Fingerprint centre (pixels) and orientation (degrees, CCW, 0 = up)."""

    cx: float
    cy: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cx) and math.isfinite(self.cy) and math.isfinite(self.theta)):
            raise InvalidPose(f"non-finite pose ({self.cx}, {self.cy}, {self.theta})")
        object.__setattr__(self, "theta", normalize_angle(self.theta))


def perturb_pose(pose: Pose2D, dx: float, dy: float, dtheta: float) -> Pose2D:
    """Offset a pose; theta re-normalized. Drives robustness sweeps."""
    return Pose2D(pose.cx + dx, pose.cy + dy, normalize_angle(pose.theta + dtheta))


def _rot(phi_deg: float) -> np.ndarray:
    # Rotation of image content by phi CCW (as viewed) in x-right/y-down
    # pixel coordinates.
    phi = math.radians(phi_deg)
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, s], [-s, c]], dtype=np.float64)


def _warp(image: GrayImage, inv: np.ndarray, offset: np.ndarray, out_shape: Tuple[int, int]) -> GrayImage:
    """Resample image so that out(p) = in(inv @ p + offset)."""
    oh, ow = out_shape
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + offset[0]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + offset[1]
    vals = sample_bilinear(image.as_float(), sx, sy, BACKGROUND_FILL)
    fg = None
    if image.foreground is not None:
        fg = sample_nearest(image.foreground, sx, sy, False).astype(bool)
    return GrayImage(to_u8(vals), ppi=image.ppi, foreground=fg)


def align_to_canonical(image: GrayImage, pose: Pose2D, out_size: int = 512) -> GrayImage:
    """Map an image into the canonical frame defined by its pose.

    The point (pose.cx, pose.cy) lands on the canvas centre and the pose
    direction maps to "up" (rotation by -theta about the centre).  Pixels
    sampled outside the source fill with white; masks use nearest-neighbour
    with fill 0.
    """
    if out_size < 32:
        raise InvalidArgument(f"out_size must be >= 32, got {out_size}")
    if not isinstance(pose, Pose2D):
        raise InvalidPose("pose must be a Pose2D")
    centre = out_size / 2.0
    # Inverse map: p_src = R(theta) @ (p_out - centre) + pose centre.
    inv = _rot(pose.theta)
    offset = np.array([pose.cx, pose.cy]) - inv @ np.array([centre, centre])
    return _warp(image, inv, offset, (out_size, out_size))


def rigid_transform(image: GrayImage, dx: float, dy: float, dtheta: float) -> GrayImage:
    """Rotate by dtheta (CCW) about the canvas centre, then shift by (dx, dy).

    Output canvas keeps the input size.  Used to synthesize pose-perturbed
    copies with a known ground-truth pose (see transformed_pose).
    """
    h, w = image.pixels.shape
    centre = np.array([w / 2.0, h / 2.0])
    inv = _rot(-dtheta)
    offset = centre - inv @ (centre + np.array([dx, dy]))
    return _warp(image, inv, offset, (h, w))


def transformed_pose(pose: Pose2D, image_shape: Tuple[int, int], dx: float, dy: float, dtheta: float) -> Pose2D:
    """Ground-truth pose of rigid_transform(image, dx, dy, dtheta)."""
    h, w = image_shape
    centre = np.array([w / 2.0, h / 2.0])
    fwd = _rot(dtheta)
    c_new = fwd @ (np.array([pose.cx, pose.cy]) - centre) + centre + np.array([dx, dy])
    return Pose2D(float(c_new[0]), float(c_new[1]), normalize_angle(pose.theta + dtheta))


def downsample_half_half(image: GrayImage) -> GrayImage:
    """2x2 box-average downsampling (512 -> 256 in the standard pipeline).

    Intensities use round-half-up; the mask is ANDed within each block.
    """
    h, w = image.pixels.shape
    if h % 2 or w % 2:
        raise SizeMismatch(f"downsample needs even dimensions, got {w}x{h}")
    blocks = image.pixels.astype(np.uint32).reshape(h // 2, 2, w // 2, 2)
    sums = blocks.sum(axis=(1, 3))
    out = ((sums + 2) // 4).astype(np.uint8)
    fg = None
    if image.foreground is not None:
        fg = image.foreground.reshape(h // 2, 2, w // 2, 2).all(axis=(1, 3))
    return GrayImage(out, ppi=image.ppi / 2.0, foreground=fg)


def estimate_pose_baseline(image: GrayImage) -> Pose2D:
    """Centroid + principal-axis pose estimate from the foreground mask.

    Orientation comes from the second-moment matrix of foreground pixel
    coordinates, reported modulo 180 and tie-broken into [-90, 90).  A
    near-isotropic foreground (eigenvalue gap below 1%) reports theta = 0.
    Principal axes are sign-ambiguous, so the result may be 180-degrees
    flipped relative to the true finger direction.
    """
    fg = require_foreground(image)
    ys, xs = np.nonzero(fg)
    cx = float(xs.mean())
    cy = float(ys.mean())
    rx = xs - cx
    ry = ys - cy
    mxx = float(np.mean(rx * rx))
    myy = float(np.mean(ry * ry))
    mxy = float(np.mean(rx * ry))
    half_gap = math.hypot((mxx - myy) / 2.0, mxy)
    lam1 = (mxx + myy) / 2.0 + half_gap
    lam2 = (mxx + myy) / 2.0 - half_gap
    if lam1 <= 0.0 or (lam1 - lam2) <= ISOTROPY_TOLERANCE * lam1:
        return Pose2D(cx, cy, 0.0)
    alpha = 0.5 * math.atan2(2.0 * mxy, mxx - myy)
    theta = 90.0 - math.degrees(alpha)
    theta = (theta + 90.0) % 180.0 - 90.0
    return Pose2D(cx, cy, theta)


# ---------------------------------------------------------------------------
# Pose files: one line per image, "<image-id> <cx> <cy> <theta>".


def save_pose_file(path, poses: Dict[str, Pose2D]) -> None:
    lines = [f"{img_id} {p.cx:.3f} {p.cy:.3f} {p.theta:.3f}\n" for img_id, p in poses.items()]
    Path(path).write_text("".join(lines), encoding="ascii")


def load_pose_file(path) -> Dict[str, Pose2D]:
    poses: Dict[str, Pose2D] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DensefpError(f"bad pose line {lineno}: {line!r}")
        img_id, cx, cy, theta = parts
        poses[img_id] = Pose2D(float(cx), float(cy), float(theta))
    return poses
