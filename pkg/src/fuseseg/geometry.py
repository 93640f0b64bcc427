"""Camera geometry: point cloud projection, depth densification, remapping.

Conventions used throughout:
  - Camera frame: x right, y down, z forward along the optical axis.
  - Pixel coordinates (u, v): u = column, v = row, with integer coordinates
    at pixel centers.
  - Extrinsics (R, t) map points of a source frame (typically the LIDAR)
    into a camera frame: p_cam = R @ p + t.
  - Images entering this module are assumed rectified; no distortion model
    is applied here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Densified depth is clamped below this so backprojection stays defined.
DEPTH_FLOOR_M = 1e-3
# Tikhonov term added to the kernel block of the interpolation system.
KERNEL_RIDGE = 1e-10
# Default cap on interpolation control points (dense solve is cubic).
MAX_CONTROLS = 2000

ROTATION_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input: bad rotation, empty depth, size mismatch."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics for a rectified camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width):
            raise GeometryError(f"principal point cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise GeometryError(f"principal point cy={self.cy} outside [0, {self.height})")


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Rigid transform p_out = R @ p + t, validated on construction."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("extrinsics contain non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL:
            raise GeometryError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise GeometryError("rotation matrix determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Extrinsics":
        return Extrinsics(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t


def relative_extrinsics(src: Extrinsics, dst: Extrinsics) -> Extrinsics:
    """Transform mapping dst-camera-frame points into the src camera frame.

    Both arguments map a common parent frame (the LIDAR) into their camera.
    """
    R = src.R @ dst.R.T
    return Extrinsics(R, src.t - R @ dst.t)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(N, 4) float records of x, y, z, reflectivity in the sensor frame."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts[:, :3])):
            raise GeometryError("point cloud contains non-finite coordinates")
        if pts.shape[0] and np.min(pts[:, 3]) < 0:
            raise GeometryError("point cloud reflectivity must be >= 0")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True, eq=False)
class SparseDepth:
    """Scattered depth samples (u, v, d) on an image plane."""

    u: np.ndarray
    v: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        d = np.atleast_1d(np.asarray(self.d, dtype=np.float64))
        if not (u.shape == v.shape == d.shape):
            raise GeometryError("sparse depth components must share one shape")
        if d.size and np.min(d) <= 0:
            raise GeometryError("sparse depth values must be positive")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "d", d)

    def __len__(self) -> int:
        return self.d.size


@dataclass(frozen=True, eq=False)
class DenseDepth:
    """Per-pixel depth grid in meters, finite and positive everywhere."""

    depth: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise GeometryError(f"dense depth must be 2-D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or (depth.size and np.min(depth) <= 0):
            raise GeometryError("dense depth must be finite and positive")
        object.__setattr__(self, "depth", depth)


def project_points(cloud: PointCloud, ext: Extrinsics, cam: CameraModel) -> SparseDepth:
    """Project a point cloud onto the image plane of a calibrated camera.

    Points behind the camera or landing outside the image are dropped; the
    depth of each retained sample is its z coordinate in the camera frame.
    """
    if len(cloud) == 0:
        empty = np.empty(0)
        return SparseDepth(empty, empty, empty)
    p = ext.apply(cloud.xyz)
    z = p[:, 2]
    keep = z > 0
    p, z = p[keep], z[keep]
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return SparseDepth(u[inside], v[inside], z[inside])


def backproject(u, v, d, cam: CameraModel) -> np.ndarray:
    """Invert the pinhole model: pixel (u, v) at depth d to camera frame.

    Accepts scalars or arrays; returns shape (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("backprojection requires positive depth")
    return np.stack(((u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d), axis=-1)


def _fit_rbf(u: np.ndarray, v: np.ndarray, d: np.ndarray):
    """Fit a linear-kernel interpolant with a polynomial tail.

    Uses a degree-1 tail when the control sites span a plane, otherwise a
    constant tail (so one or two controls still yield a solvable system).
    Returns (weights, poly_coeffs, sites).
    """
    sites = np.stack((u, v), axis=1)
    n = sites.shape[0]
    dist = np.sqrt(np.maximum(
        np.sum((sites[:, None, :] - sites[None, :, :]) ** 2, axis=2), 0.0))
    kernel = dist + KERNEL_RIDGE * np.eye(n)

    def solve(poly: np.ndarray):
        m = poly.shape[1]
        a = np.zeros((n + m, n + m))
        a[:n, :n] = kernel
        a[:n, n:] = poly
        a[n:, :n] = poly.T
        rhs = np.concatenate((d, np.zeros(m)))
        sol = np.linalg.solve(a, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite interpolation solution")
        return sol[:n], sol[n:]

    poly1 = np.column_stack((np.ones(n), u, v))
    if n >= 3 and np.linalg.matrix_rank(poly1) == 3:
        try:
            w, c = solve(poly1)
            return w, c, sites
        except np.linalg.LinAlgError:
            pass  # fall through to the constant tail
    try:
        w, c0 = solve(np.ones((n, 1)))
    except np.linalg.LinAlgError as err:
        raise GeometryError(
            f"singular interpolation system for {n} control points "
            f"(ridge {KERNEL_RIDGE:g}): {err}") from err
    return w, np.array([c0[0], 0.0, 0.0]), sites


def densify_depth(sparse: SparseDepth, cam: CameraModel,
                  max_controls: int = MAX_CONTROLS) -> DenseDepth:
    """Interpolate scattered depth samples into a full-resolution grid.

    A radial basis interpolant (kernel phi(r) = r plus an affine tail) is
    fit to at most max_controls uniformly strided samples and evaluated at
    every pixel center. The interpolant reproduces retained control values
    and any affine depth field up to solver tolerance.
    """
    if len(sparse) == 0:
        raise GeometryError("cannot densify empty depth")
    u, v, d = sparse.u, sparse.v, sparse.d
    if len(sparse) > max_controls:
        stride = int(np.ceil(len(sparse) / max_controls))
        u, v, d = u[::stride], v[::stride], d[::stride]

    # Coincident sites would make the kernel block singular; keep the
    # nearest return, consistent with the splat collision rule.
    order = np.lexsort((d, v, u))
    u, v, d = u[order], v[order], d[order]
    first = np.ones(len(u), dtype=bool)
    first[1:] = (u[1:] != u[:-1]) | (v[1:] != v[:-1])
    u, v, d = u[first], v[first], d[first]

    weights, coeffs, sites = _fit_rbf(u, v, d)

    h, w = cam.height, cam.width
    uu = np.tile(np.arange(w, dtype=np.float64), h)
    vv = np.repeat(np.arange(h, dtype=np.float64), w)
    out = np.empty(h * w)
    chunk = 16384
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        q = np.stack((uu[lo:hi], vv[lo:hi]), axis=1)
        dist = np.sqrt(np.maximum(
            np.sum((q[:, None, :] - sites[None, :, :]) ** 2, axis=2), 0.0))
        out[lo:hi] = dist @ weights + coeffs[0] + coeffs[1] * q[:, 0] + coeffs[2] * q[:, 1]
    return DenseDepth(np.maximum(out, DEPTH_FLOOR_M).reshape(h, w))


def _round_px(x: np.ndarray) -> np.ndarray:
    # Half-up rounding keeps splatting and nearest sampling consistent.
    return np.floor(x + 0.5).astype(np.int64)


def remap_image(src_img: np.ndarray, src_cam: CameraModel, src_ext: Extrinsics,
                dst_cam: CameraModel, dst_depth: DenseDepth,
                sampling: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """Resample a source-camera image onto the destination image plane.

    Each destination pixel is backprojected with the destination depth,
    moved into the source camera frame by src_ext, projected, and sampled.
    Pixels that land behind the source camera or outside its image get the
    fill value 0 and a False validity flag.
    """
    if sampling not in ("bilinear", "nearest"):
        raise GeometryError(f"unknown sampling mode: {sampling!r}")
    h, w = dst_cam.height, dst_cam.width
    if dst_depth.depth.shape != (h, w):
        raise GeometryError(
            f"depth shape {dst_depth.depth.shape} does not match camera ({h}, {w})")
    src = np.asarray(src_img)
    if src.shape[:2] != (src_cam.height, src_cam.width):
        raise GeometryError(
            f"source image shape {src.shape[:2]} does not match camera "
            f"({src_cam.height}, {src_cam.width})")

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pts = backproject(uu.ravel(), vv.ravel(), dst_depth.depth.ravel(), dst_cam)
    pts = src_ext.apply(pts)
    z = pts[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    us = src_cam.fx * pts[:, 0] / zs + src_cam.cx
    vs = src_cam.fy * pts[:, 1] / zs + src_cam.cy

    out_shape = (h, w) if src.ndim == 2 else (h, w, src.shape[2])
    if sampling == "nearest":
        ui, vi = _round_px(us), _round_px(vs)
        valid &= (ui >= 0) & (ui < src_cam.width) & (vi >= 0) & (vi < src_cam.height)
        ui, vi = np.where(valid, ui, 0), np.where(valid, vi, 0)
        vals = src[vi, ui]
        vals[~valid] = 0
        out = vals.reshape(out_shape)
    else:
        valid &= (us >= 0) & (us <= src_cam.width - 1) & (vs >= 0) & (vs <= src_cam.height - 1)
        u0 = np.clip(np.floor(us).astype(np.int64), 0, src_cam.width - 1)
        v0 = np.clip(np.floor(vs).astype(np.int64), 0, src_cam.height - 1)
        u1 = np.minimum(u0 + 1, src_cam.width - 1)
        v1 = np.minimum(v0 + 1, src_cam.height - 1)
        fu = np.clip(us - u0, 0.0, 1.0)
        fv = np.clip(vs - v0, 0.0, 1.0)
        if src.ndim == 3:
            fu, fv = fu[:, None], fv[:, None]
        srcf = src.astype(np.float64)
        vals = (srcf[v0, u0] * (1 - fu) * (1 - fv) + srcf[v0, u1] * fu * (1 - fv)
                + srcf[v1, u0] * (1 - fu) * fv + srcf[v1, u1] * fu * fv)
        vals[~valid] = 0.0
        out = vals.reshape(out_shape)

    return out, valid.reshape(h, w)


def transfer_labels(labels: np.ndarray, src_cam: CameraModel, src_ext: Extrinsics,
                    dst_cam: CameraModel, dst_depth: DenseDepth,
                    ignore_id: int = 255) -> np.ndarray:
    """Remap a label map with nearest sampling; invalid pixels get ignore_id."""
    out, valid = remap_image(labels, src_cam, src_ext, dst_cam, dst_depth,
                             sampling="nearest")
    out = out.copy()
    out[~valid] = ignore_id
    return out


def lidar_input_image(sparse: SparseDepth, cam: CameraModel,
                      normalizer: float = 50.0) -> np.ndarray:
    """Splat projected distances into a single-channel model input.

    Values are d / normalizer clamped to [0, 1] at the rounded pixel;
    colliding samples keep the smaller distance. Pixels without a return
    stay zero.
    """
    if normalizer <= 0:
        raise GeometryError("normalizer must be positive")
    nearest = np.full((cam.height, cam.width), np.inf)
    if len(sparse):
        ui, vi = _round_px(sparse.u), _round_px(sparse.v)
        ok = (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        np.minimum.at(nearest, (vi[ok], ui[ok]), sparse.d[ok])
    img = np.where(np.isinf(nearest), 0.0, np.clip(nearest / normalizer, 0.0, 1.0))
    return img
