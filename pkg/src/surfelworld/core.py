"""Core scene types: surfels, cameras, image-plane frames, layered scenes.

Conventions used across the whole package:
  * camera frame is x-right, y-down, z-forward; pixel (u, v) corresponds to
    the ray K^-1 [u, v, 1]^T
  * quaternions are stored (w, x, y, z) and kept unit-norm
  * world-to-camera transform is x_cam = R @ x_world + T
  * surfel clouds are struct-of-arrays in float32 (matching the on-disk
    record layout); numerical kernels lift to float64 internally
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

QUAT_NORM_TOL = 1e-6
ROTATION_ORTHO_TOL = 1e-6

# z-epsilon coefficient for the near-flat third axis of a surfel covariance:
# eps_z = Z_EPSILON_COEFF * min(s_x, s_y) unless overridden.
Z_EPSILON_COEFF = 1e-4


class SceneError(ValueError):
    """Invalid scene data (violated invariant, mismatched dimensions)."""


# ---------------------------------------------------------------------------
# quaternion / rotation helpers


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|; works on (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise SceneError("zero quaternion cannot be normalized")
    return q / norm


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    m = np.asarray(rot, dtype=np.float64)
    if m.shape != (3, 3):
        raise SceneError(f"rotation must be 3x3, got {m.shape}")
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def rotation_to_quat_batch(rot: np.ndarray) -> np.ndarray:
    """Vectorized rotation -> quaternion for (N, 3, 3) inputs.

    Uses the numerically stable branch per matrix (largest diagonal pivot).
    """
    m = np.asarray(rot, dtype=np.float64)
    n = m.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]

    case0 = tr > 0.0
    case1 = ~case0 & (m[:, 0, 0] > m[:, 1, 1]) & (m[:, 0, 0] > m[:, 2, 2])
    case2 = ~case0 & ~case1 & (m[:, 1, 1] > m[:, 2, 2])
    case3 = ~case0 & ~case1 & ~case2

    if np.any(case0):
        s = np.sqrt(tr[case0] + 1.0) * 2.0
        mm = m[case0]
        q[case0, 0] = 0.25 * s
        q[case0, 1] = (mm[:, 2, 1] - mm[:, 1, 2]) / s
        q[case0, 2] = (mm[:, 0, 2] - mm[:, 2, 0]) / s
        q[case0, 3] = (mm[:, 1, 0] - mm[:, 0, 1]) / s
    if np.any(case1):
        mm = m[case1]
        s = np.sqrt(1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]) * 2.0
        q[case1, 0] = (mm[:, 2, 1] - mm[:, 1, 2]) / s
        q[case1, 1] = 0.25 * s
        q[case1, 2] = (mm[:, 0, 1] + mm[:, 1, 0]) / s
        q[case1, 3] = (mm[:, 0, 2] + mm[:, 2, 0]) / s
    if np.any(case2):
        mm = m[case2]
        s = np.sqrt(1.0 + mm[:, 1, 1] - mm[:, 0, 0] - mm[:, 2, 2]) * 2.0
        q[case2, 0] = (mm[:, 0, 2] - mm[:, 2, 0]) / s
        q[case2, 1] = (mm[:, 0, 1] + mm[:, 1, 0]) / s
        q[case2, 2] = 0.25 * s
        q[case2, 3] = (mm[:, 1, 2] + mm[:, 2, 1]) / s
    if np.any(case3):
        mm = m[case3]
        s = np.sqrt(1.0 + mm[:, 2, 2] - mm[:, 0, 0] - mm[:, 1, 1]) * 2.0
        q[case3, 0] = (mm[:, 1, 0] - mm[:, 0, 1]) / s
        q[case3, 1] = (mm[:, 0, 2] + mm[:, 2, 0]) / s
        q[case3, 2] = (mm[:, 1, 2] + mm[:, 2, 1]) / s
        q[case3, 3] = 0.25 * s
    return quat_normalize(q)


def orthonormalize_rotation(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (det forced to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rotation_is_valid(rot: np.ndarray, tol: float = ROTATION_ORTHO_TOL) -> bool:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        return False
    err = np.max(np.abs(rot.T @ rot - np.eye(3)))
    return bool(err <= tol and abs(np.linalg.det(rot) - 1.0) <= tol)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # (3, 3) world-to-camera
    translation: np.ndarray # (3,)
    width: int
    height: int

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        trans = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")
        if not rotation_is_valid(rot):
            raise SceneError("camera rotation is not orthonormal with det +1")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> pixel (u, v) and camera-frame depth z."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        u = self.fx * cam[..., 0] / z + self.cx
        v = self.fy * cam[..., 1] / z + self.cy
        return u, v, z

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions K^-1 [u, v, 1] (not normalized)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        rays = np.stack([(u - self.cx) / self.fx,
                         (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)
        return rays

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        return replace(self, rotation=np.asarray(rotation, dtype=np.float64),
                       translation=np.asarray(translation, dtype=np.float64))

    def compose(self, rel_rotation: np.ndarray, rel_translation: np.ndarray) -> "Camera":
        """Apply an extra world-to-camera transform in front of this pose.

        new extrinsics: x' = R_rel (R x + T) + T_rel.  Rotation is
        re-orthonormalized to keep drift bounded under long chains.
        """
        rot = orthonormalize_rotation(np.asarray(rel_rotation, np.float64) @ self.rotation)
        trans = np.asarray(rel_rotation, np.float64) @ self.translation + np.asarray(rel_translation, np.float64)
        return self.with_pose(rot, trans)

    @staticmethod
    def from_pose(position, quat_wxyz, fov_y_deg: float, width: int, height: int) -> "Camera":
        """Build a camera from a camera-to-world pose and vertical field of view."""
        r_c2w = quat_to_rotation(quat_normalize(np.asarray(quat_wxyz, dtype=np.float64)))
        rotation = r_c2w.T
        translation = -rotation @ np.asarray(position, dtype=np.float64)
        fy = 0.5 * height / np.tan(np.deg2rad(fov_y_deg) * 0.5)
        return Camera(fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0,
                      rotation=rotation, translation=translation,
                      width=width, height=height)

    @staticmethod
    def identity(fx: float, fy: float, cx: float, cy: float,
                 width: int, height: int) -> "Camera":
        return Camera(fx=fx, fy=fy, cx=cx, cy=cy,
                      rotation=np.eye(3), translation=np.zeros(3),
                      width=width, height=height)


# ---------------------------------------------------------------------------
# image-plane frames


@dataclass
class DepthFrame:
    """Per-pixel positive camera-frame z distance plus a validity mask."""

    values: np.ndarray    # (H, W) float32
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise SceneError("depth values must be 2-D")
        if self.validity is None:
            self.validity = np.ones(self.values.shape, dtype=bool)
        self.validity = np.ascontiguousarray(self.validity, dtype=bool)
        if self.validity.shape != self.values.shape:
            raise SceneError("depth validity shape mismatch")
        valid = self.values[self.validity]
        if valid.size and (not np.all(np.isfinite(valid)) or np.any(valid <= 0)):
            raise SceneError("valid depths must be finite and positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def from_values(values: np.ndarray) -> "DepthFrame":
        values = np.asarray(values, dtype=np.float32)
        validity = np.isfinite(values) & (values > 0)
        safe = np.where(validity, values, 1.0).astype(np.float32)
        return DepthFrame(values=safe, validity=validity)


@dataclass
class MaskFrame:
    """Binary per-pixel mask; values are exactly 0 or 1."""

    values: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values)
        if vals.ndim != 2:
            raise SceneError("mask must be 2-D")
        if vals.dtype == bool:
            vals = vals.astype(np.uint8)
        vals = vals.astype(np.uint8, copy=False)
        if not np.isin(vals, (0, 1)).all():
            raise SceneError("mask values must be 0 or 1")
        self.values = vals

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def as_bool(self) -> np.ndarray:
        return self.values.astype(bool)

    def count(self) -> int:
        return int(self.values.sum())

    @staticmethod
    def from_bool(mask: np.ndarray) -> "MaskFrame":
        return MaskFrame(values=np.asarray(mask, dtype=bool).astype(np.uint8))


@dataclass
class NormalFrame:
    """Per-pixel unit normals in the camera frame."""

    values: np.ndarray  # (H, W, 3) float32

    UNIT_TOL = 1e-4

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 3 or vals.shape[2] != 3:
            raise SceneError("normals must be (H, W, 3)")
        norms = np.linalg.norm(vals.astype(np.float64), axis=2)
        if norms.size and np.max(np.abs(norms - 1.0)) > self.UNIT_TOL:
            raise SceneError("normals must have unit length")
        self.values = vals

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# surfels


@dataclass
class Surfel:
    """A single oriented zero-thickness Gaussian kernel."""

    position: np.ndarray    # (3,)
    orientation: np.ndarray # (4,) unit quaternion (w, x, y, z)
    scales: np.ndarray      # (2,) strictly positive
    opacity: float
    color: np.ndarray       # (3,) in [0, 1]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.orientation) - 1.0) > QUAT_NORM_TOL:
            raise SceneError("surfel quaternion must be unit norm")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise SceneError("surfel scales must be finite and positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise SceneError("opacity must lie in [0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise SceneError("color components must lie in [0, 1]")


def covariance(surfel: Surfel, z_epsilon: float | None = None) -> np.ndarray:
    """3x3 covariance Q diag(s_x^2, s_y^2, eps_z^2) Q^T of one surfel.

    With eps_z = 0 the result has rank <= 2.  By default eps_z is
    Z_EPSILON_COEFF * min(s_x, s_y).
    """
    if z_epsilon is None:
        z_epsilon = Z_EPSILON_COEFF * float(min(surfel.scales))
    q = quat_normalize(surfel.orientation)
    rot = quat_to_rotation(q)
    d = np.array([surfel.scales[0] ** 2, surfel.scales[1] ** 2, z_epsilon ** 2])
    return (rot * d) @ rot.T


def covariance_batch(quats: np.ndarray, scales: np.ndarray,
                     z_epsilon: np.ndarray | float | None = None) -> np.ndarray:
    """Vectorized covariance for (N, 4) quats and (N, 2) scales -> (N, 3, 3)."""
    quats = quat_normalize(quats)
    scales = np.asarray(scales, dtype=np.float64)
    if z_epsilon is None:
        eps = Z_EPSILON_COEFF * scales.min(axis=1)
    else:
        eps = np.broadcast_to(np.asarray(z_epsilon, dtype=np.float64), scales.shape[:1])
    rot = quat_to_rotation(quats)
    d = np.stack([scales[:, 0] ** 2, scales[:, 1] ** 2, eps ** 2], axis=1)
    return np.einsum("nij,nj,nkj->nik", rot, d, rot)


class SurfelCloud:
    """Struct-of-arrays surfel container (float32 storage)."""

    __slots__ = ("positions", "quaternions", "scales", "opacities", "colors")

    def __init__(self, positions, quaternions, scales, opacities, colors,
                 validate: bool = True):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(-1, 3)
        self.quaternions = np.ascontiguousarray(quaternions, dtype=np.float32).reshape(-1, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32).reshape(-1, 2)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32).reshape(-1)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(-1, 3)
        n = len(self.positions)
        if not (len(self.quaternions) == len(self.scales) == len(self.opacities)
                == len(self.colors) == n):
            raise SceneError("surfel cloud arrays disagree on length")
        if validate and n:
            self.check_invariants()

    def check_invariants(self):
        norms = np.linalg.norm(self.quaternions.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0), initial=0.0) > QUAT_NORM_TOL:
            raise SceneError("cloud quaternions must be unit norm")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise SceneError("cloud scales must be finite and positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise SceneError("cloud opacities must lie in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise SceneError("cloud colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    def surfel(self, i: int) -> Surfel:
        return Surfel(position=self.positions[i], orientation=self.quaternions[i],
                      scales=self.scales[i], opacity=float(self.opacities[i]),
                      color=self.colors[i])

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(self.positions.copy(), self.quaternions.copy(),
                           self.scales.copy(), self.opacities.copy(),
                           self.colors.copy(), validate=False)

    def replace(self, **arrays) -> "SurfelCloud":
        data = {name: arrays.get(name, getattr(self, name))
                for name in self.__slots__}
        return SurfelCloud(**data)

    def bytes_digest(self) -> bytes:
        """Concatenated raw bytes of all fields; used for immutability checks."""
        return b"".join(np.ascontiguousarray(getattr(self, name)).tobytes()
                        for name in self.__slots__)

    @staticmethod
    def empty() -> "SurfelCloud":
        return SurfelCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)),
                           np.zeros((0,)), np.zeros((0, 3)), validate=False)

    @staticmethod
    def concatenate(clouds: list["SurfelCloud"]) -> "SurfelCloud":
        if not clouds:
            return SurfelCloud.empty()
        return SurfelCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.quaternions for c in clouds]),
            np.concatenate([c.scales for c in clouds]),
            np.concatenate([c.opacities for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            validate=False)


# ---------------------------------------------------------------------------
# layered scenes and the world graph

LAYER_NAMES = ("sky", "background", "foreground")


@dataclass
class LayeredScene:
    """One generated scene split into back-to-front sky/background/foreground."""

    sky: SurfelCloud
    background: SurfelCloud
    foreground: SurfelCloud
    frozen: tuple[bool, bool, bool]  # (sky, background, foreground)
    generation_camera: Camera
    prompt: str = ""
    scene_id: int = 0

    def clouds_back_to_front(self) -> list[SurfelCloud]:
        return [self.sky, self.background, self.foreground]

    def layer(self, name: str) -> SurfelCloud:
        if name not in LAYER_NAMES:
            raise SceneError(f"unknown layer {name!r}")
        return getattr(self, name)

    def surfel_count(self) -> int:
        return len(self.sky) + len(self.background) + len(self.foreground)


@dataclass
class WorldEdge:
    scene_a: int
    scene_b: int
    relative_position: np.ndarray  # (3,)
    relative_quat: np.ndarray      # (4,) wxyz

    def __post_init__(self):
        self.relative_position = np.asarray(self.relative_position, dtype=np.float64).reshape(3)
        self.relative_quat = quat_normalize(np.asarray(self.relative_quat, dtype=np.float64).reshape(4))


@dataclass
class WorldGraph:
    """Connected scenes plus pose edges; the persistent world state."""

    scenes: list[LayeredScene] = field(default_factory=list)
    edges: list[WorldEdge] = field(default_factory=list)
    active_version: int = 0
    ground_height: float | None = None

    def __post_init__(self):
        self.check_edges()

    def check_edges(self):
        ids = {s.scene_id for s in self.scenes}
        if len(ids) != len(self.scenes):
            raise SceneError("scene ids must be unique")
        for e in self.edges:
            if e.scene_a not in ids or e.scene_b not in ids:
                raise SceneError("edge references unknown scene id")

    def scene_by_id(self, scene_id: int) -> LayeredScene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    def next_scene_id(self) -> int:
        return 1 + max((s.scene_id for s in self.scenes), default=0)

    def all_clouds(self) -> list[SurfelCloud]:
        clouds: list[SurfelCloud] = []
        for scene in self.scenes:
            clouds.extend(scene.clouds_back_to_front())
        return clouds

    def surfel_count(self) -> int:
        return sum(s.surfel_count() for s in self.scenes)

    def with_scene(self, scene: LayeredScene,
                   edge: WorldEdge | None = None) -> "WorldGraph":
        """Return a new graph with the scene attached and the version bumped."""
        edges = list(self.edges) + ([edge] if edge is not None else [])
        return WorldGraph(scenes=list(self.scenes) + [scene], edges=edges,
                          active_version=self.active_version + 1,
                          ground_height=self.ground_height)
