"""Deterministic camera geometry: disparity <-> BEV coordinate maps, inverse
perspective mapping by ray-plane intersection and its homography form, and
sampling-grid construction for the differentiable warps.

Axis convention (used everywhere in this package):

  * world: x lateral-right, y forward depth, z up, origin at the reference
    camera's ground projection; the camera center sits at (0, 0, c).
  * image: u grows right, v grows down; a 3D point (X, Y, Z) projects to
    u = c_x + f*X/Y, v = c_y - f*(Z - c)/Y.
  * ground: z = a*x + b*y + c gives the drop from the camera's horizontal
    plane to the ground at lateral/forward offset (x, y); c is the camera
    height, so the ground surface passes through the world origin with
    slopes (-a, -b).

With a = b = 0 this reduces to the flat-ground closed forms
x' = c*(u - c_x)/(v - c_y) and y' = c*f/(v - c_y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import HorizonError

__all__ = [
    "StereoRig", "GroundPlane", "LayoutSpec", "SamplingGrid",
    "disparity_to_bev", "bev_to_disparity",
    "ipm_pixel_to_ground", "homography_ground_to_image",
    "make_stereo_bev_grid", "make_ipm_grid",
]

HORIZON_EPS = 1e-9
INVALID_COORD = -1e6


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair: pinhole intrinsics plus horizontal baseline."""
    f: float
    c_x: float
    c_y: float
    t_x: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"StereoRig: focal length must be positive, got {self.f}")
        if self.t_x <= 0:
            raise ValueError(f"StereoRig: baseline must be positive, got {self.t_x}")
        if not (0 < self.c_x < self.image_w):
            raise ValueError(f"StereoRig: c_x={self.c_x} outside image width {self.image_w}")
        if not (0 < self.c_y < self.image_h):
            raise ValueError(f"StereoRig: c_y={self.c_y} outside image height {self.image_h}")

    @property
    def horizontal_fov_deg(self) -> float:
        return float(np.degrees(2.0 * np.arctan(self.image_w / (2.0 * self.f))))


@dataclass(frozen=True)
class GroundPlane:
    """Coefficients of z = a*x + b*y + c (see module docstring); c is the
    camera height and must be positive, slopes must stay near-horizontal."""
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"GroundPlane: camera height c must be positive, got {self.c}")
        if abs(self.a) >= 1 or abs(self.b) >= 1:
            raise ValueError(f"GroundPlane: slopes must satisfy |a|,|b| < 1, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class LayoutSpec:
    """BEV region of interest and its grid resolution."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    n_x: int
    n_y: int
    n_classes: int

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError("LayoutSpec: bounds must satisfy x_min < x_max and y_min < y_max")
        if self.n_x < 1 or self.n_y < 1 or self.n_classes < 1:
            raise ValueError("LayoutSpec: grid sizes and class count must be positive")

    @property
    def cell_w(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def cell_d(self) -> float:
        return (self.y_max - self.y_min) / self.n_y

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.cell_w

    def y_centers(self) -> np.ndarray:
        """Row 0 is the nearest row (y_min side)."""
        return self.y_min + (np.arange(self.n_y) + 0.5) * self.cell_d

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) cell-center coordinates, both shaped (n_y, n_x)."""
        return np.meshgrid(self.x_centers(), self.y_centers())


@dataclass
class SamplingGrid:
    """Per-BEV-cell continuous source coordinates for grid_sample_bilinear.

    coords holds (col, row) in source-array pixel units; invalid cells carry
    a far out-of-range sentinel so sampling returns exactly zero. src_h/src_w
    record the source array the grid was built for, so warps can reject a
    mismatched input.
    """
    coords: np.ndarray
    valid: np.ndarray
    src_h: int
    src_w: int

    def __post_init__(self):
        if self.coords.shape[-1] != 2 or self.coords.shape[:-1] != self.valid.shape:
            raise ValueError("SamplingGrid: coords must be (H, W, 2) matching valid (H, W)")

    @property
    def shape(self) -> tuple:
        return self.valid.shape

    def grid_tensor(self) -> Tensor:
        """Constant (1, H, W, 2) tensor for grid_sample_bilinear."""
        return Tensor(self.coords[None])


def _finalize_grid(col, row, valid, src_h, src_w):
    coords = np.stack([np.where(valid, col, INVALID_COORD),
                       np.where(valid, row, INVALID_COORD)], axis=-1)
    return SamplingGrid(coords=coords, valid=valid, src_h=src_h, src_w=src_w)


# ---------------------------------------------------------------------------
# disparity <-> BEV

def disparity_to_bev(u, d, rig: StereoRig):
    """Map image column u and disparity d (pixels) to BEV meters:
    x' = (u - c_x) * T_x / d, y' = f * T_x / d. Accepts scalars or arrays."""
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError(f"disparity_to_bev: disparity must be positive, got min {d.min()}")
    x = (u - rig.c_x) * rig.t_x / d
    y = rig.f * rig.t_x / d
    return (float(x), float(y)) if x.ndim == 0 else (x, y)


def bev_to_disparity(x, y, rig: StereoRig):
    """Inverse of disparity_to_bev: d = f*T_x/y', u = c_x + f*x'/y'."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError(f"bev_to_disparity: depth y' must be positive, got min {y.min()}")
    d = rig.f * rig.t_x / y
    u = rig.c_x + rig.f * x / y
    return (float(u), float(d)) if u.ndim == 0 else (u, d)


# ---------------------------------------------------------------------------
# inverse perspective mapping

def _ipm_denominator(u, v, rig: StereoRig, plane: GroundPlane):
    return (v - rig.c_y) - plane.a * (u - rig.c_x) - plane.b * rig.f


def ipm_pixel_to_ground(u: float, v: float, rig: StereoRig, plane: GroundPlane):
    """Intersect the camera ray of pixel (u, v) with the ground plane and
    return the BEV coordinates (x', y') of the hit.

    The ray from the camera center through pixel (u, v) has direction
    ((u-c_x)/f, 1, (c_y-v)/f); substituting into the ground surface gives
    forward depth y' = c*f / ((v-c_y) - a*(u-c_x) - b*f) and lateral offset
    x' = y'*(u-c_x)/f. Pixels at or above the horizon (denominator below
    HORIZON_EPS) are rejected.
    """
    denom = _ipm_denominator(u, v, rig, plane)
    if denom < HORIZON_EPS:
        raise HorizonError(
            f"horizon pixel: ray through (u={u}, v={v}) does not meet the ground "
            f"(denominator {denom:.3e})")
    y = plane.c * rig.f / denom
    x = y * (u - rig.c_x) / rig.f
    return x, y


def _ipm_ground_arrays(u, v, rig: StereoRig, plane: GroundPlane):
    """Vectorized ipm_pixel_to_ground returning (x, y, valid)."""
    denom = _ipm_denominator(u, v, rig, plane)
    valid = denom >= HORIZON_EPS
    safe = np.where(valid, denom, 1.0)
    y = plane.c * rig.f / safe
    x = y * (u - rig.c_x) / rig.f
    return x, y, valid


def homography_ground_to_image(rig: StereoRig, plane: GroundPlane) -> np.ndarray:
    """3x3 map from homogeneous ground coordinates (x', y', 1) to homogeneous
    pixels, consistent with ipm_pixel_to_ground.

    Derivation: the ground point (x', y') sits at height a*x' + b*y' + c
    below the camera, so u*y' = f*x' + c_x*y' and
    v*y' = f*a*x' + (c_y + f*b)*y' + f*c.
    """
    h = np.array([
        [rig.f, rig.c_x, 0.0],
        [rig.f * plane.a, rig.c_y + rig.f * plane.b, rig.f * plane.c],
        [0.0, 1.0, 0.0],
    ])
    if abs(np.linalg.det(h)) < 1e-12:
        raise ValueError("homography_ground_to_image: degenerate plane, homography is singular")
    return h


# ---------------------------------------------------------------------------
# sampling grids

def make_stereo_bev_grid(rig: StereoRig, layout: LayoutSpec, vol_w: int, vol_d: int,
                         feat_downsample: int, disp_step: float) -> SamplingGrid:
    """Inverse-warp grid from BEV cells into the reduced disparity volume.

    For each cell center (x', y') the source coordinate is
    (col, row) = (u / feat_downsample, d / disp_step) with (u, d) from
    bev_to_disparity; disp_step is in full-resolution disparity pixels per
    volume plane. Cells behind the camera or falling outside the vol_d x
    vol_w volume are flagged invalid.
    """
    if feat_downsample < 1:
        raise ValueError(f"make_stereo_bev_grid: feat_downsample must be >= 1, got {feat_downsample}")
    if disp_step <= 0:
        raise ValueError(f"make_stereo_bev_grid: disp_step must be positive, got {disp_step}")
    bx, by = layout.center_mesh()
    valid = by > 0
    safe_y = np.where(valid, by, 1.0)
    d = rig.f * rig.t_x / safe_y
    u = rig.c_x + rig.f * bx / safe_y
    col = u / feat_downsample
    row = d / disp_step
    valid = valid & (col >= 0) & (col <= vol_w - 1) & (row >= 0) & (row <= vol_d - 1)
    return _finalize_grid(col, row, valid, src_h=vol_d, src_w=vol_w)


def make_ipm_grid(rig: StereoRig, plane: GroundPlane, layout: LayoutSpec,
                  src_w: int, src_h: int, src_downsample: int) -> SamplingGrid:
    """Inverse-perspective grid from BEV cells into an image or feature map.

    Each cell center is pushed through the ground-to-image homography and the
    pixel coordinates divided by src_downsample; src_w/src_h are the extents
    of the (already downsampled) source array. Horizon and out-of-image cells
    are invalid.
    """
    if src_downsample < 1:
        raise ValueError(f"make_ipm_grid: src_downsample must be >= 1, got {src_downsample}")
    h = homography_ground_to_image(rig, plane)
    bx, by = layout.center_mesh()
    ones = np.ones_like(bx)
    uvw = np.einsum("rc,cij->rij", h, np.stack([bx, by, ones]))
    w = uvw[2]
    valid = w > HORIZON_EPS
    safe_w = np.where(valid, w, 1.0)
    col = uvw[0] / safe_w / src_downsample
    row = uvw[1] / safe_w / src_downsample
    valid = valid & (col >= 0) & (col <= src_w - 1) & (row >= 0) & (row <= src_h - 1)
    return _finalize_grid(col, row, valid, src_h=src_h, src_w=src_w)
