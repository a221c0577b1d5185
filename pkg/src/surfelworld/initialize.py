"""Closed-form per-pixel surfel initialization from image + depth + normals.

Every selected pixel spawns one surfel: position by back-projecting the
pixel through the camera, orientation from the estimated normal, scales
sized against the Nyquist interval at the pixel's depth so the cloud covers
the surface without aliasing holes, color copied from the pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Camera, DepthFrame, MaskFrame, NormalFrame, SceneError,
                   SurfelCloud, rotation_to_quat)

DEFAULT_OPACITY = 0.95


@dataclass(frozen=True)
class InitConfig:
    """Hyperparameters of the geometric initialization."""

    k: float = 1.0 / np.sqrt(2.0)   # scale coefficient against the Nyquist interval
    cos_clamp: float = 0.1          # lower bound on tilt-compensation cosines
    up_vector: tuple[float, float, float] = (0.0, 1.0, 0.0)
    opacity: float = DEFAULT_OPACITY

    def __post_init__(self):
        if self.k <= 0:
            raise SceneError("scale coefficient k must be positive")
        if not (0.0 < self.cos_clamp <= 1.0):
            raise SceneError("cos_clamp must lie in (0, 1]")


def backproject(camera: Camera, u, v, d):
    """World position R^-1 (d K^-1 [u, v, 1]^T - T); accepts arrays.

    Projecting the result through the same camera returns (u, v, d).
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise SceneError("back-projection requires positive depth")
    rays = camera.pixel_rays(u, v)
    cam_pts = rays * d[..., None]
    return camera.camera_to_world(cam_pts)


def rotation_from_normal(normal: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Orthonormal frame whose third column is the (world-frame) normal.

    Falls back to the alternate up vector (0, 0, 1) when the normal is
    parallel to ``up``; degenerate for both is an error.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    for candidate in (np.asarray(up, dtype=np.float64), np.array([0.0, 0.0, 1.0])):
        qx = np.cross(candidate, n)
        norm = np.linalg.norm(qx)
        if norm >= 1e-6:
            qx = qx / norm
            qy = np.cross(n, qx)
            qy = qy / np.linalg.norm(qy)
            return np.stack([qx, qy, n], axis=1)
    raise SceneError("normal is parallel to both up-vector candidates")


def rotation_from_normal_batch(normals: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Vectorized rotation_from_normal for (N, 3) unit normals -> (N, 3, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    up0 = np.broadcast_to(np.asarray(up, dtype=np.float64), n.shape)
    qx = np.cross(up0, n)
    norms = np.linalg.norm(qx, axis=1)
    bad = norms < 1e-6
    if np.any(bad):
        alt = np.array([0.0, 0.0, 1.0])
        qx[bad] = np.cross(np.broadcast_to(alt, n[bad].shape), n[bad])
        norms = np.linalg.norm(qx, axis=1)
        if np.any(norms < 1e-6):
            raise SceneError("normal parallel to both up candidates")
    qx = qx / norms[:, None]
    qy = np.cross(n, qx)
    qy = qy / np.linalg.norm(qy, axis=1, keepdims=True)
    return np.stack([qx, qy, n], axis=2)


def nyquist_interval(d, f):
    """World-space sampling interval matching one pixel at depth d: 2 d / f."""
    return 2.0 * np.asarray(d, dtype=np.float64) / f


def tilt_cosines(camera: Camera, normals_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos(theta_x), cos(theta_y) between the image-plane normal and the surfel
    normal projected to the camera XoZ / YoZ planes."""
    n = np.asarray(normals_world, dtype=np.float64)
    n_cam = n @ camera.rotation.T
    nx, ny, nz = n_cam[..., 0], n_cam[..., 1], n_cam[..., 2]
    az = np.abs(nz)
    hx = np.hypot(nx, nz)
    hy = np.hypot(ny, nz)
    # a normal with no component in the plane carries no tilt information
    cos_x = np.where(hx > 1e-12, az / np.maximum(hx, 1e-300), 1.0)
    cos_y = np.where(hy > 1e-12, az / np.maximum(hy, 1e-300), 1.0)
    return cos_x, cos_y


def nyquist_scales(camera: Camera, d, normal_world, cfg: InitConfig | None = None) -> np.ndarray:
    """Scale pair (s_x, s_y) = k d / (f max(cos theta, clamp)); accepts arrays."""
    cfg = cfg or InitConfig()
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise SceneError("Nyquist scales require positive depth")
    cos_x, cos_y = tilt_cosines(camera, np.asarray(normal_world, dtype=np.float64))
    sx = cfg.k * d / (camera.fx * np.maximum(cos_x, cfg.cos_clamp))
    sy = cfg.k * d / (camera.fy * np.maximum(cos_y, cfg.cos_clamp))
    return np.stack([sx, sy], axis=-1)


def init_cloud(image: np.ndarray, depth: DepthFrame, normals: NormalFrame,
               camera: Camera, cfg: InitConfig | None = None,
               selection: MaskFrame | None = None) -> SurfelCloud:
    """One surfel per selected pixel with closed-form parameters.

    ``image`` is (H, W, 3) in [0, 1].  ``selection`` defaults to every pixel
    with valid depth.  Selected pixels with invalid depth are an error.
    """
    cfg = cfg or InitConfig()
    image = np.asarray(image, dtype=np.float64)
    h, w = depth.values.shape
    if image.shape[:2] != (h, w) or normals.values.shape[:2] != (h, w):
        raise SceneError("image, depth and normals must share dimensions")
    if selection is None:
        sel = depth.validity.copy()
    else:
        if selection.values.shape != (h, w):
            raise SceneError("selection mask dimensions mismatch")
        sel = selection.as_bool()
        if np.any(sel & ~depth.validity):
            raise SceneError("selection includes pixels with invalid depth")
    vv, uu = np.nonzero(sel)
    if len(vv) == 0:
        return SurfelCloud.empty()

    d = depth.values[vv, uu].astype(np.float64)
    positions = backproject(camera, uu.astype(np.float64), vv.astype(np.float64), d)

    n_cam = normals.values[vv, uu].astype(np.float64)
    n_world = n_cam @ camera.rotation  # R^-1 n_c with R orthonormal
    rot = rotation_from_normal_batch(n_world, up=cfg.up_vector)
    quats = np.stack([rotation_to_quat(rot[i]) for i in range(len(rot))])

    scales = nyquist_scales(camera, d, n_world, cfg)
    colors = np.clip(image[vv, uu], 0.0, 1.0)
    opac = np.full(len(vv), cfg.opacity)
    return SurfelCloud(positions, quats, scales, opac, colors)
