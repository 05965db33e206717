"""Geometry and image utilities applied to recorded datasets.

Conventions: points are metric, right-handed, camera z forward; pixel
coordinates are (u, v) = (column, row) with the origin at the top-left pixel
center. Grayscale conversion uses the usual luma weights 0.299/0.587/0.114
and stays in float64 so later rounding happens exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .streams import ImageFrame

CONTACT_THRESHOLD_DEFAULT = 205.0
DISPARITY_EPS = 1e-6
_ORTHONORMAL_ATOL = 1e-9


class BehindCameraError(ValueError):
    """Projection requested for a point at or behind the camera plane."""


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p' = R p + t with R validated orthonormal."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        if not np.allclose(r @ r.T, np.eye(3), rtol=0.0, atol=_ORTHONORMAL_ATOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, point: Sequence[float]) -> np.ndarray:
        p = np.asarray(point, dtype=np.float64)
        return self.rotation @ p + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Composition that applies `other` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d.get("width", 0)),
            height=int(d.get("height", 0)),
        )


@dataclass(frozen=True)
class StereoParams:
    focal_px: float
    baseline_m: float

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal length and baseline must be positive")

    def to_dict(self) -> dict:
        return {"focal_px": self.focal_px, "baseline_m": self.baseline_m}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoParams":
        return cls(float(d["focal_px"]), float(d["baseline_m"]))


@dataclass(frozen=True)
class HeatmapParams:
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("heatmap sigmas must be positive")


@dataclass(frozen=True)
class ContactConfig:
    threshold: float = CONTACT_THRESHOLD_DEFAULT
    hysteresis: float = 0.0

    def __post_init__(self):
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be nonnegative")


def project_point(
    point_cam: Sequence[float], intrinsics: CameraIntrinsics
) -> Tuple[float, float]:
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    x, y, z = (float(c) for c in point_cam)
    if z <= 0.0:
        raise BehindCameraError(f"point has nonpositive depth z={z}")
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    return u, v


def gaussian_heatmap(
    shape: Tuple[int, int], center: Tuple[float, float], params: HeatmapParams
) -> np.ndarray:
    """Unnormalized anisotropic Gaussian over the pixel grid.

    G(px, py) = exp(-((px-u)^2 / sx^2 + (py-v)^2 / sy^2)); peak value 1 at the
    center, which may lie between pixels or outside the image.
    """
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError("heatmap shape must be positive")
    u, v = center
    px = np.arange(w, dtype=np.float64)
    py = np.arange(h, dtype=np.float64)
    gx = (px - u) ** 2 / params.sigma_x**2
    gy = (py - v) ** 2 / params.sigma_y**2
    return np.exp(-(gy[:, np.newaxis] + gx[np.newaxis, :]))


def to_grayscale(image) -> np.ndarray:
    """Luma grayscale as float64 (h, w). Accepts an ImageFrame or an array."""
    if isinstance(image, ImageFrame):
        arr = image.data
    else:
        arr = np.asarray(image)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0].astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        a = arr.astype(np.float64)
        return 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]
    raise ValueError(f"unsupported image shape {arr.shape}")


def attention_image(gray: np.ndarray, heatmap: np.ndarray) -> np.ndarray:
    """Pixelwise product of grayscale and heatmap, rounded and clamped to u8."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape != heatmap.shape:
        raise ValueError(f"shape mismatch {gray.shape} vs {heatmap.shape}")
    out = np.rint(gray * heatmap)
    return np.clip(out, 0, 255).astype(np.uint8)


def disparity_to_depth(
    disparity: np.ndarray, stereo: StereoParams, eps: float = DISPARITY_EPS
) -> np.ndarray:
    """Depth = focal * baseline / disparity, NaN where disparity < eps."""
    d = np.asarray(disparity, dtype=np.float64)
    out = np.full(d.shape, np.nan, dtype=np.float64)
    valid = d >= eps
    out[valid] = stereo.focal_px * stereo.baseline_m / d[valid]
    return out


def laplacian_variance(gray: np.ndarray) -> float:
    """Population variance of the 4-neighbor Laplacian over interior pixels.

    The kernel is [[0,1,0],[1,-4,1],[0,1,0]]; border pixels, where the stencil
    leaves the image, do not contribute.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("need a 2-d image at least 3x3")
    lap = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    )
    return float(np.var(lap))


def flow_magnitude_filter(flow: np.ndarray, tau: float) -> np.ndarray:
    """Zero out flow vectors with magnitude below tau (hard threshold)."""
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise ValueError(f"flow must be (h, w, 2), got {f.shape}")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    mag = np.sqrt(f[:, :, 0] ** 2 + f[:, :, 1] ** 2)
    out = f.copy()
    out[mag < tau] = 0.0
    return out


def flow_magnitude(flow: np.ndarray) -> np.ndarray:
    f = np.asarray(flow, dtype=np.float64)
    return np.sqrt(f[:, :, 0] ** 2 + f[:, :, 1] ** 2)


def binarize_contact(raw: Sequence[float], config: Optional[ContactConfig] = None):
    """Threshold a raw contact signal into a boolean sequence.

    Contact turns on at raw >= threshold and, with hysteresis h, turns off
    only below threshold - h; in between the previous state holds. State
    starts out of contact.
    """
    cfg = config or ContactConfig()
    exit_level = cfg.threshold - cfg.hysteresis
    out = []
    state = False
    for x in raw:
        x = float(x)
        if x >= cfg.threshold:
            state = True
        elif x < exit_level:
            state = False
        out.append(state)
    return out


def contact_accuracy(predicted: Sequence[bool], truth: Sequence[bool]) -> float:
    """Fraction of samples where the binarized signal agrees with ground truth."""
    if len(predicted) != len(truth):
        raise ValueError("length mismatch")
    if not predicted:
        raise ValueError("empty sequences")
    agree = sum(1 for p, t in zip(predicted, truth) if bool(p) == bool(t))
    return agree / len(predicted)


def count_transitions(states: Sequence[bool]) -> int:
    return sum(1 for a, b in zip(states, states[1:]) if bool(a) != bool(b))


def apply_rectification(
    image: np.ndarray, map_x: np.ndarray, map_y: np.ndarray
) -> np.ndarray:
    """Bilinear remap: out[i, j] samples image at (map_x[i,j], map_y[i,j]).

    Samples whose 2x2 support leaves the image come back 0, matching the
    black borders rectification normally produces.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = False
    if img.ndim == 2:
        img = img[:, :, np.newaxis]
        squeeze = True
    if img.ndim != 3:
        raise ValueError(f"unsupported image shape {image.shape}")
    mx = np.asarray(map_x, dtype=np.float64)
    my = np.asarray(map_y, dtype=np.float64)
    if mx.shape != my.shape:
        raise ValueError("map_x and map_y must share a shape")

    h, w = img.shape[:2]
    x0 = np.floor(mx).astype(np.int64)
    y0 = np.floor(my).astype(np.int64)
    fx = mx - x0
    fy = my - y0
    inside = (x0 >= 0) & (x0 + 1 <= w - 1) & (y0 >= 0) & (y0 + 1 <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)

    out = np.zeros(mx.shape + (img.shape[2],), dtype=np.float64)
    for c in range(img.shape[2]):
        ch = img[:, :, c]
        tl = ch[y0c, x0c]
        tr = ch[y0c, x0c + 1]
        bl = ch[y0c + 1, x0c]
        br = ch[y0c + 1, x0c + 1]
        top = tl + (tr - tl) * fx
        bot = bl + (br - bl) * fx
        out[:, :, c] = np.where(inside, top + (bot - top) * fy, 0.0)

    if np.issubdtype(np.asarray(image).dtype, np.integer):
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out[:, :, 0] if squeeze else out
