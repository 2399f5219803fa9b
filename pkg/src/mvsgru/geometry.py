"""Pinhole cameras, relative poses, differentiable warping, inverse-depth maps.

Conventions: x_cam = R @ x_world + t, z is the viewing axis, pixel (0, 0) is
the center of the top-left pixel.  Intrinsics are upper-triangular with
K[2, 2] = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FileFormatError
from .tensor import Tensor, where

_ZEYE = 1e-8  # points with camera-frame z below this count as behind the camera


@dataclass
class CameraView:
    """One input view: intrinsics, pose, usable depth range, and the image.

    The image is [3, H, W] float32 in [0, 1].  ``gt_depth`` is [H, W] with
    NaN marking pixels that have no ground truth (synthetic misses, padding).
    """

    k: np.ndarray
    r: np.ndarray
    t: np.ndarray
    d_min: float
    d_max: float
    image: np.ndarray
    gt_depth: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.k.shape != (3, 3) or self.r.shape != (3, 3):
            raise ConfigError("K and R must be 3x3")
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if abs(self.k[1, 0]) > 1e-9 or abs(self.k[2, 0]) > 1e-9 or abs(self.k[2, 1]) > 1e-9:
            raise ConfigError("K must be upper triangular")
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0 or abs(self.k[2, 2] - 1) > 1e-9:
            raise ConfigError("K needs positive focal lengths and K[2,2] == 1")
        if np.abs(self.r @ self.r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(self.r) < 0:
            raise ConfigError("R must be a rotation (orthonormal, det +1)")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t


@dataclass
class RelativePose:
    """Rigid transform taking reference-camera coordinates to a source camera."""

    r: np.ndarray
    t: np.ndarray


def relative_pose(ref: CameraView, src: CameraView) -> RelativePose:
    r = src.r @ ref.r.T
    return RelativePose(r=r, t=src.t - r @ ref.t)


def scale_intrinsics(k: np.ndarray, level: int) -> np.ndarray:
    """Intrinsics for a 2^level downsampled image, pixel-center convention.

    Focal lengths scale by s = 1/2^level; principal point maps through
    c' = (c + 0.5) * s - 0.5 so pixel centers stay aligned.  level 0 returns
    K unchanged.
    """
    if level == 0:
        return np.array(k, dtype=np.float64)
    s = 1.0 / (1 << level)
    out = np.array(k, dtype=np.float64)
    out[0, 0] *= s
    out[1, 1] *= s
    out[0, 1] *= s
    out[0, 2] = (out[0, 2] + 0.5) * s - 0.5
    out[1, 2] = (out[1, 2] + 0.5) * s - 0.5
    return out


def warp_points(x: np.ndarray, y: np.ndarray, depth, k_ref: np.ndarray,
                k_src: np.ndarray, pose: RelativePose):
    """Warp reference pixels into a source view at given depths.

    Args:
        x, y: pixel coordinates in the reference image, arrays of shape [P].
        depth: depths along the reference rays; Tensor or ndarray whose last
            axis is P (leading axes broadcast, e.g. [D, P] hypotheses).
        k_ref, k_src: intrinsics of the two views at the working resolution.
        pose: relative pose from reference to source.

    Returns:
        (u, v, z, valid): source pixel coordinates and camera-frame depth,
        same type as ``depth``; ``valid`` is a bool ndarray flagging points
        that land in front of the source camera.  Differentiable in depth.
    """
    a = k_src @ pose.r @ np.linalg.inv(k_ref)
    b = k_src @ pose.t  # [3]
    p_h = np.stack([x, y, np.ones_like(x)]).astype(np.float64)
    base = a @ p_h  # [3, P]

    if isinstance(depth, Tensor):
        extra = (1,) * (depth.ndim - 1)
        hx = depth * base[0].reshape(extra + base[0].shape) + float(b[0])
        hy = depth * base[1].reshape(extra + base[1].shape) + float(b[1])
        hz = depth * base[2].reshape(extra + base[2].shape) + float(b[2])
        valid = hz.data > _ZEYE
        z_safe = where(valid, hz, np.ones_like(hz.data))
        return hx / z_safe, hy / z_safe, hz, valid

    d = np.asarray(depth, dtype=np.float64)
    extra = (1,) * (d.ndim - 1)
    hx = d * base[0].reshape(extra + base[0].shape) + b[0]
    hy = d * base[1].reshape(extra + base[1].shape) + b[1]
    hz = d * base[2].reshape(extra + base[2].shape) + b[2]
    valid = hz > _ZEYE
    z_safe = np.where(valid, hz, 1.0)
    return hx / z_safe, hy / z_safe, hz, valid


def warp_pixel(p: tuple[float, float], d, k_ref: np.ndarray, k_src: np.ndarray,
               pose: RelativePose):
    """Single-pixel convenience wrapper around warp_points.

    Returns (u, v, z, behind) where behind is True if the point falls behind
    the source camera (z <= ~0); (u, v) are unreliable in that case.
    """
    x = np.array([float(p[0])])
    y = np.array([float(p[1])])
    u, v, z, valid = warp_points(x, y, d, k_ref, k_src, pose)
    if isinstance(u, Tensor):
        return u, v, z, not bool(valid.reshape(-1)[0])
    return float(u[0]), float(v[0]), float(z[0]), not bool(valid[0])


# ---------------------------------------------------------------------------
# inverse-depth parameterization
# ---------------------------------------------------------------------------


def inverse_grid(d_min: float, d_max: float, count: int) -> np.ndarray:
    """count equidistant inverse-depth values from 1/d_max to 1/d_min inclusive."""
    if not (0 < d_min < d_max) or count < 2:
        raise ConfigError(f"bad sampling range [{d_min}, {d_max}] x {count}")
    return np.linspace(1.0 / d_max, 1.0 / d_min, count)


def sample_inverse_uniform(d_min: float, d_max: float, count: int) -> np.ndarray:
    """Depth hypotheses whose reciprocals are equidistant (increasing 1/d)."""
    return 1.0 / inverse_grid(d_min, d_max, count)


def normalize_inv(d, d_min: float, d_max: float):
    """Map depth to [0, 1] linearly in inverse depth (0 at d_max, 1 at d_min).

    Works on Tensors (differentiable, no clamping: model predictions stay in
    range by construction) and on ndarrays/floats (clamped to [0, 1]; use
    in_depth_range for the out-of-range flag).
    """
    span = 1.0 / d_min - 1.0 / d_max
    if isinstance(d, Tensor):
        return (1.0 / d - 1.0 / d_max) * (1.0 / span)
    eta = (1.0 / np.asarray(d, dtype=np.float64) - 1.0 / d_max) / span
    return np.clip(eta, 0.0, 1.0)


def denormalize_inv(eta, d_min: float, d_max: float):
    """Inverse of normalize_inv."""
    span = 1.0 / d_min - 1.0 / d_max
    if isinstance(eta, Tensor):
        return 1.0 / (eta * span + 1.0 / d_max)
    return 1.0 / (np.asarray(eta, dtype=np.float64) * span + 1.0 / d_max)


def in_depth_range(d: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Mask of depths inside [d_min, d_max]; NaN and non-positive are outside."""
    d = np.asarray(d)
    with np.errstate(invalid="ignore"):
        return np.isfinite(d) & (d >= d_min) & (d <= d_max)


# ---------------------------------------------------------------------------
# camera text files
# ---------------------------------------------------------------------------
#
# Text layout (whitespace separated):
#   extrinsic
#   <4 x 4 row-major world-to-camera matrix>
#   intrinsic
#   <3 x 3 K>
#   d_min d_interval d_count d_max
#
# d_interval and d_count are carried for compatibility and ignored on read.


def save_cam_text(path, view: CameraView, d2: int = 256) -> None:
    ext = np.eye(4)
    ext[:3, :3] = view.r
    ext[:3, 3] = view.t
    interval = (view.d_max - view.d_min) / max(d2 - 1, 1)
    lines = ["extrinsic"]
    lines += [" ".join(f"{v:.12g}" for v in row) for row in ext]
    lines.append("")
    lines.append("intrinsic")
    lines += [" ".join(f"{v:.12g}" for v in row) for row in view.k]
    lines.append("")
    lines.append(f"{view.d_min:.12g} {interval:.12g} {d2} {view.d_max:.12g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_cam_text(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, float]:
    """Parse a camera file; returns (K, R, t, d_min, d_max)."""
    with open(path, "rb") as f:
        raw = f.read()
    text = raw.decode("utf-8", errors="replace")
    tokens = []
    offset = 0
    for tok in text.split():
        pos = text.index(tok, offset)
        tokens.append((tok, pos))
        offset = pos + len(tok)

    def fail(i, msg):
        off = tokens[i][1] if i < len(tokens) else len(raw)
        raise FileFormatError(path, off, msg)

    if not tokens or tokens[0][0] != "extrinsic":
        fail(0, "expected 'extrinsic'")
    if len(tokens) < 1 + 16 + 1 + 9 + 4:
        fail(len(tokens), "file too short")
    try:
        ext = np.array([float(tokens[1 + i][0]) for i in range(16)]).reshape(4, 4)
    except ValueError:
        fail(1, "bad extrinsic value")
    if tokens[17][0] != "intrinsic":
        fail(17, "expected 'intrinsic'")
    try:
        k = np.array([float(tokens[18 + i][0]) for i in range(9)]).reshape(3, 3)
        d_min, _, _, d_max = (float(tokens[27 + i][0]) for i in range(4))
    except ValueError:
        fail(18, "bad intrinsic or depth-range value")
    return k, ext[:3, :3], ext[:3, 3], d_min, d_max
