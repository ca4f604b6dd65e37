"""Projection of 3D Gaussians to screen-space splats.

World covariance is rebuilt from quaternion + scales, pushed through the
local-affine perspective Jacobian, regularized with a low-pass term, and
inverted to a conic. Culling (near/far, off-screen extent) is a normal
outcome, not an error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .scene import Camera, Gaussian3D

LOW_PASS = 0.3        # px^2 added to the diagonal of the projected covariance
RADIUS_STDS = 3.0     # extent cutoff in standard deviations


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """World covariance(s) R S S^T R^T from quaternion(s) and positive scale triple(s).

    Quaternions off unit norm by more than 1e-3 are normalized with a warning.
    """
    q = np.atleast_2d(np.asarray(quat, np.float64))
    s = np.atleast_2d(np.asarray(scale, np.float64))
    norms = np.linalg.norm(q, axis=-1)
    bad = np.abs(norms - 1.0) > 1e-3
    if bad.any():
        warnings.warn(f"normalizing {int(bad.sum())} quaternions off unit norm", stacklevel=2)
    q = q / norms[..., None]
    R = quat_to_rotation(q)
    M = R * s[:, None, :]  # columns scaled: R @ diag(s)
    cov = M @ np.swapaxes(M, -1, -2)
    return cov[0] if np.asarray(quat).ndim == 1 else cov


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray      # (2,) pixel coordinates
    conic: np.ndarray       # (3,) inverse 2x2 covariance as (ixx, ixy, iyy)
    depth: float            # camera-space z
    radius: int             # support half-width in pixels
    gaussian_index: int


@dataclass
class SplatBatch:
    """Struct-of-arrays over the splats that survived culling."""

    mean2d: np.ndarray          # (K, 2) float64
    conic: np.ndarray           # (K, 3) float64
    cov2d: np.ndarray           # (K, 3) regularized (sxx, sxy, syy), kept for tests
    depth: np.ndarray           # (K,)  float64
    radius: np.ndarray          # (K,)  int32
    gaussian_index: np.ndarray  # (K,)  int32

    @property
    def count(self) -> int:
        return self.mean2d.shape[0]

    def at(self, i: int) -> ProjectedSplat:
        return ProjectedSplat(mean2d=self.mean2d[i].copy(), conic=self.conic[i].copy(),
                              depth=float(self.depth[i]), radius=int(self.radius[i]),
                              gaussian_index=int(self.gaussian_index[i]))


def project_splats(g: Gaussian3D, cam: Camera) -> SplatBatch:
    """Project all Gaussians; the returned batch contains survivors in input order."""
    n = g.count
    if n == 0:
        return SplatBatch(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                          np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32))
    R = np.asarray(cam.rotation, np.float64)
    t = np.asarray(cam.translation, np.float64)
    p_cam = g.positions.astype(np.float64) @ R.T + t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    keep = (z > cam.near) & (z < cam.far)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return SplatBatch(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                          np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32))
    x, y, z = x[idx], y[idx], z[idx]

    cov3d = build_covariance(g.rotations[idx], g.scales[idx])
    inv_z = 1.0 / z
    # 2x3 Jacobian of (fx X/Z + cx, fy Y/Z + cy) at the camera-space center
    J = np.zeros((idx.size, 2, 3), np.float64)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    JW = J @ R
    cov2d = JW @ cov3d @ np.swapaxes(JW, -1, -2)
    sxx = cov2d[:, 0, 0] + LOW_PASS
    sxy = cov2d[:, 0, 1]
    syy = cov2d[:, 1, 1] + LOW_PASS

    det = sxx * syy - sxy * sxy
    mid = 0.5 * (sxx + syy)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(RADIUS_STDS * np.sqrt(lam_max)).astype(np.int32)

    mean_x = cam.fx * x * inv_z + cam.cx
    mean_y = cam.fy * y * inv_z + cam.cy
    # support box must contain every pixel center within `radius` of the mean
    on_screen = ((mean_x + radius + 0.5 > 0.0) & (mean_x - radius - 0.5 < cam.width)
                 & (mean_y + radius + 0.5 > 0.0) & (mean_y - radius - 0.5 < cam.height)
                 & (det > 0))
    sel = np.nonzero(on_screen)[0]

    conic = np.stack([syy[sel] / det[sel], -sxy[sel] / det[sel], sxx[sel] / det[sel]], axis=1)
    return SplatBatch(
        mean2d=np.stack([mean_x[sel], mean_y[sel]], axis=1),
        conic=conic,
        cov2d=np.stack([sxx[sel], sxy[sel], syy[sel]], axis=1),
        depth=z[sel],
        radius=radius[sel],
        gaussian_index=idx[sel].astype(np.int32),
    )


def project_gaussian(g: Gaussian3D, cam: Camera, index: int) -> Optional[ProjectedSplat]:
    """Single-Gaussian projection; returns None when culled."""
    sub = Gaussian3D(**{k: getattr(g, k)[index:index + 1] for k in (
        "positions", "rotations", "scales", "opacities", "colors",
        "feat_view", "feat_object", "identity")})
    batch = project_splats(sub, cam)
    if batch.count == 0:
        return None
    sp = batch.at(0)
    sp.gaussian_index = index
    return sp


def sort_by_depth(batch: SplatBatch) -> SplatBatch:
    """Stable front-to-back order; depth ties keep ascending gaussian_index."""
    if not np.all(np.isfinite(batch.depth)):
        raise DataError("NaN/Inf depth in splat batch")
    order = np.argsort(batch.depth, kind="stable")
    return SplatBatch(
        mean2d=batch.mean2d[order], conic=batch.conic[order], cov2d=batch.cov2d[order],
        depth=batch.depth[order], radius=batch.radius[order],
        gaussian_index=batch.gaussian_index[order])
