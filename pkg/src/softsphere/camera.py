"""Differentiable camera model: poses, projection, rays, and NDC depth.

Conventions
-----------
* World-to-camera transform: ``p_cam = R @ (p_world - t)`` where ``t`` is the
  camera position in world space and the camera looks down +z.
* Image x grows to the right, image y grows downward; +x_cam maps to +u and
  +y_cam maps to +v.  The principal point sits at the image center.
* Continuous image coordinates are edge-based: u in [0, W] with the image
  center at W/2; pixel index i covers [i, i+1) and its center ray passes
  through u = i + 0.5.
* NDC depth is linear in metric depth: z = (far - depth) / (far - near), so
  z = 0 at the far plane and z = 1 at the near plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

PINHOLE = "pinhole"
ORTHOGRAPHIC = "orthographic"

AXIS_ANGLE = "axis_angle"
SIX_D = "6d"


# ---------------------------------------------------------------------------
# Rotation parameterizations
# ---------------------------------------------------------------------------

def _skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def axis_angle_to_matrix(v) -> np.ndarray:
    """Rodrigues formula; second-order series below theta ~ 1e-8."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta2 = float(v @ v)
    theta = np.sqrt(theta2)
    k = _skew(v)
    if theta < 1e-8:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def axis_angle_vjp(v, grad_matrix) -> np.ndarray:
    """d(loss)/d(v) given d(loss)/d(R) for R = axis_angle_to_matrix(v)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    g = np.asarray(grad_matrix, dtype=np.float64).reshape(3, 3)
    theta2 = float(v @ v)
    out = np.zeros(3)
    if theta2 < 1e-14:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = np.sum(g * _skew(e))
        return out
    r = axis_angle_to_matrix(v)
    eye_minus_r = np.eye(3) - r
    vx = _skew(v)
    for i in range(3):
        col = eye_minus_r[:, i]
        d_r = ((v[i] * vx + _skew(np.cross(v, col))) / theta2) @ r
        out[i] = np.sum(g * d_r)
    return out


def rotation_from_6d(a) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into the first two columns of a rotation.

    Invariant to positive rescaling of either input column.  Raises on inputs
    that cannot be orthonormalized (zero or near-parallel columns).
    """
    a = np.asarray(a, dtype=np.float64).reshape(6)
    a1, a2 = a[:3], a[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise ConfigurationError("6d rotation: first column has near-zero norm")
    c1 = a1 / n1
    w = a2 - (c1 @ a2) * c1
    nw = np.linalg.norm(w)
    if nw < 1e-8:
        raise ConfigurationError("6d rotation: columns are near-parallel")
    c2 = w / nw
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rotation_6d_vjp(a, grad_matrix) -> np.ndarray:
    """d(loss)/d(a) given d(loss)/d(R) for R = rotation_from_6d(a)."""
    a = np.asarray(a, dtype=np.float64).reshape(6)
    g = np.asarray(grad_matrix, dtype=np.float64).reshape(3, 3)
    a1, a2 = a[:3], a[3:]
    n1 = np.linalg.norm(a1)
    c1 = a1 / n1
    w = a2 - (c1 @ a2) * c1
    nw = np.linalg.norm(w)
    c2 = w / nw
    g1, g2, g3 = g[:, 0], g[:, 1], g[:, 2]

    d_c2 = g2 + np.cross(g3, c1)
    d_w = (d_c2 - (c2 @ d_c2) * c2) / nw
    d_a2 = d_w - (c1 @ d_w) * c1
    d_c1 = g1 + np.cross(c2, g3) - (c1 @ d_w) * a2 - (c1 @ a2) * d_w
    d_a1 = (d_c1 - (c1 @ d_c1) * c1) / n1
    return np.concatenate([d_a1, d_a2])


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm


@dataclass(frozen=True)
class Camera:
    translation: np.ndarray  # camera position in world units
    rotation_param: np.ndarray  # axis-angle (3,) or 6d (6,)
    rotation_type: str
    focal_length: float
    sensor_width: float
    width: int
    height: int
    near: float = 0.1
    far: float = 45.0
    mode: str = PINHOLE
    rotation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "translation",
            np.asarray(self.translation, dtype=np.float64).reshape(3),
        )
        object.__setattr__(
            self, "rotation_param",
            np.asarray(self.rotation_param, dtype=np.float64).reshape(-1),
        )
        if self.rotation_type == AXIS_ANGLE:
            if self.rotation_param.shape != (3,):
                raise ConfigurationError("axis-angle rotation needs 3 values")
            r = axis_angle_to_matrix(self.rotation_param)
        elif self.rotation_type == SIX_D:
            if self.rotation_param.shape != (6,):
                raise ConfigurationError("6d rotation needs 6 values")
            r = rotation_from_6d(self.rotation_param)
        else:
            raise ConfigurationError(f"unknown rotation type {self.rotation_type!r}")
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6:
            raise ConfigurationError("rotation failed orthonormality check")
        object.__setattr__(self, "rotation", r)
        if self.mode not in (PINHOLE, ORTHOGRAPHIC):
            raise ConfigurationError(f"unknown camera mode {self.mode!r}")
        if self.focal_length <= 0 or self.sensor_width <= 0:
            raise ConfigurationError("focal length and sensor width must be > 0")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be at least 1x1")
        if not (self.near < self.far) or self.near < 0:
            raise ConfigurationError(
                f"need 0 <= near < far, got near={self.near} far={self.far}"
            )
        if self.far - self.near < 1e-12:
            raise ConfigurationError("far - near underflows")

    # -- geometry helpers ---------------------------------------------------

    @property
    def pixel_size(self) -> float:
        return self.sensor_width / self.width

    @property
    def sensor_height(self) -> float:
        # square pixels: sensor height follows the aspect ratio
        return self.sensor_width * self.height / self.width

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation.T

    def camera_to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation + self.translation

    def sensor_coords(self, x, y):
        """Continuous image coords (edge-based) -> metric sensor-plane coords."""
        px = self.pixel_size
        return (np.asarray(x) - self.width / 2.0) * px, (
            np.asarray(y) - self.height / 2.0
        ) * px

    def min_axial_cosine(self) -> float:
        """Lower bound of ray-direction z over all pixels (camera frame)."""
        if self.mode == ORTHOGRAPHIC:
            return 1.0
        hx = self.sensor_width / 2.0
        hy = self.sensor_height / 2.0
        return self.focal_length / float(
            np.sqrt(self.focal_length**2 + hx**2 + hy**2)
        )


def camera_from_vector(
    vec,
    width: int,
    height: int,
    near: float = 0.1,
    far: float = 45.0,
    mode: str = PINHOLE,
) -> Camera:
    """Build a camera from the flat optimization layout.

    8 values: t(3), axis-angle(3), focal length, sensor width.
    11 values: t(3), 6d rotation(6), focal length, sensor width.
    """
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    if v.shape == (8,):
        rot_param, rot_type, f, s = v[3:6], AXIS_ANGLE, v[6], v[7]
    elif v.shape == (11,):
        rot_param, rot_type, f, s = v[3:9], SIX_D, v[9], v[10]
    else:
        raise ConfigurationError(
            f"camera vector must have 8 or 11 values, got {v.size}"
        )
    return Camera(
        translation=v[:3],
        rotation_param=rot_param,
        rotation_type=rot_type,
        focal_length=float(f),
        sensor_width=float(s),
        width=int(width),
        height=int(height),
        near=float(near),
        far=float(far),
        mode=mode,
    )


def camera_to_vector(cam: Camera) -> np.ndarray:
    return np.concatenate(
        [
            cam.translation,
            cam.rotation_param,
            [cam.focal_length, cam.sensor_width],
        ]
    )


# ---------------------------------------------------------------------------
# Rays, projection, depth
# ---------------------------------------------------------------------------

def ray_through(cam: Camera, x: float, y: float) -> Ray:
    """World-space ray through the continuous image position (x, y)."""
    xs, ys = cam.sensor_coords(x, y)
    rt = cam.rotation.T
    if cam.mode == PINHOLE:
        v = np.array([xs, ys, cam.focal_length])
        d = rt @ (v / np.linalg.norm(v))
        return Ray(origin=cam.translation.copy(), direction=d)
    origin = cam.translation + rt @ np.array([xs, ys, 0.0])
    return Ray(origin=origin, direction=rt @ np.array([0.0, 0.0, 1.0]))


def pixel_ray(cam: Camera, u, v) -> Ray:
    """Ray through the center of pixel (u, v), i.e. image position (u+.5, v+.5)."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ConfigurationError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height}")
    return ray_through(cam, u + 0.5, v + 0.5)


def ndc_depth(cam: Camera, metric_depth):
    """Map metric depth along the optical axis to z in [0, 1] (1 = near)."""
    d = np.clip(np.asarray(metric_depth, dtype=np.float64), cam.near, cam.far)
    return (cam.far - d) / (cam.far - cam.near)


def metric_from_ndc(cam: Camera, z):
    return cam.far - np.asarray(z, dtype=np.float64) * (cam.far - cam.near)


def project_point(cam: Camera, p):
    """Project a world point to continuous image coords plus metric depth.

    Pinhole points at or behind the camera plane return (nan, nan, depth)
    rather than raising; callers treat NaN as off-sensor.
    """
    u, v, d = project_points(cam, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(u[0]), float(v[0]), float(d[0])


def project_points(cam: Camera, points):
    """Vectorized project_point over an (N, 3) array."""
    c = cam.world_to_camera(points)
    depth = c[:, 2].copy()
    scale = cam.width / cam.sensor_width
    if cam.mode == PINHOLE:
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.width / 2.0 + cam.focal_length * c[:, 0] / depth * scale
            v = cam.height / 2.0 + cam.focal_length * c[:, 1] / depth * scale
        behind = depth <= 0
        u = np.where(behind, np.nan, u)
        v = np.where(behind, np.nan, v)
    else:
        u = cam.width / 2.0 + c[:, 0] * scale
        v = cam.height / 2.0 + c[:, 1] * scale
    return u, v, depth


class CameraFrameRays(NamedTuple):
    """Per-pixel rays in the camera frame, plus intrinsics-chain leftovers."""

    origins: np.ndarray  # (n, 3); all zeros for pinhole
    directions: np.ndarray  # (n, 3), unit
    sensor_xy: np.ndarray  # (n, 2) metric sensor coords
    inv_vnorm: np.ndarray  # (n,) 1/|unnormalized direction| (pinhole), else 1


def sensor_rays_camera_frame(cam: Camera, px_x, px_y) -> CameraFrameRays:
    """Rays through pixel centers (px_x, px_y are integer pixel indices)."""
    xs, ys = cam.sensor_coords(np.asarray(px_x) + 0.5, np.asarray(px_y) + 0.5)
    n = xs.size
    sensor = np.stack([xs, ys], axis=-1).reshape(n, 2)
    if cam.mode == PINHOLE:
        v = np.empty((n, 3))
        v[:, 0] = xs.reshape(-1)
        v[:, 1] = ys.reshape(-1)
        v[:, 2] = cam.focal_length
        vnorm = np.linalg.norm(v, axis=1)
        dirs = v / vnorm[:, None]
        return CameraFrameRays(
            origins=np.zeros((n, 3)),
            directions=dirs,
            sensor_xy=sensor,
            inv_vnorm=1.0 / vnorm,
        )
    origins = np.zeros((n, 3))
    origins[:, 0] = xs.reshape(-1)
    origins[:, 1] = ys.reshape(-1)
    dirs = np.zeros((n, 3))
    dirs[:, 2] = 1.0
    return CameraFrameRays(
        origins=origins, directions=dirs, sensor_xy=sensor, inv_vnorm=np.ones(n)
    )
