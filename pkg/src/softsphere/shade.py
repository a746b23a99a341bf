"""Post-projection shading: feature image -> color image.

Every shader is a pure per-pixel map with an explicit backward companion so
losses on shaded images can push gradients into the rendered features (and,
for the trainable shader, into its own parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, sensor_rays_camera_frame
from .errors import ValidationError
from .raster import FeatureImage


def _data(image) -> np.ndarray:
    if isinstance(image, FeatureImage):
        return image.data
    return np.asarray(image, dtype=np.float64)


def _clamp01_mask(x):
    return (x >= 0.0) & (x <= 1.0)


@dataclass
class DirectionalLight:
    direction: np.ndarray  # unit vector, pointing from the light into the scene
    intensity: float = 1.0
    ambient: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValidationError("light direction has zero norm")
        self.direction = d / n
        if self.intensity < 0 or not (0.0 <= self.ambient <= 1.0):
            raise ValidationError("intensity must be >= 0 and ambient in [0, 1]")


@dataclass
class LinearShader:
    """Per-pixel affine map from d feature channels to RGB."""

    weight: np.ndarray  # (d_in, 3)
    bias: np.ndarray  # (3,)
    trainable: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(3)
        if self.weight.ndim != 2 or self.weight.shape[1] != 3:
            raise ValidationError("shader weight must have shape (d_in, 3)")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValidationError("shader parameters must be finite")


# ---------------------------------------------------------------------------
# identity
# ---------------------------------------------------------------------------

def shade_identity(image) -> np.ndarray:
    """Pass 3-channel features through, clamped to [0, 1]."""
    f = _data(image)
    if f.shape[-1] != 3:
        raise ValidationError(f"identity shading needs d=3, got d={f.shape[-1]}")
    return np.clip(f, 0.0, 1.0)


def shade_identity_backward(image, upstream) -> np.ndarray:
    f = _data(image)
    return np.asarray(upstream) * _clamp01_mask(f)


# ---------------------------------------------------------------------------
# diffuse parallel-light shading over [albedo, normal] channels
# ---------------------------------------------------------------------------

def _diffuse_parts(f, lights):
    if f.shape[-1] != 6:
        raise ValidationError(
            f"diffuse shading needs the [albedo:3, normal:3] layout, got d={f.shape[-1]}"
        )
    albedo = f[..., :3]
    raw_n = f[..., 3:]
    norm = np.linalg.norm(raw_n, axis=-1, keepdims=True)
    ok = norm[..., 0] > 1e-12
    n_hat = np.where(ok[..., None], raw_n / np.where(ok[..., None], norm, 1.0), 0.0)
    shade = np.zeros(f.shape[:-1])
    for light in lights:
        shade = shade + light.ambient + light.intensity * np.maximum(
            0.0, n_hat @ (-light.direction)
        )
    return albedo, raw_n, norm, ok, n_hat, shade


def shade_diffuse(image, lights: list[DirectionalLight]) -> np.ndarray:
    """albedo * (ambient + sum_l intensity * max(0, n . -l)), clamped.

    Zero-norm normals fall back to the ambient term alone.
    """
    albedo, _, _, _, _, shade = _diffuse_parts(_data(image), lights)
    return np.clip(albedo * shade[..., None], 0.0, 1.0)


def shade_diffuse_backward(image, lights, upstream) -> np.ndarray:
    """Gradient of the shaded image w.r.t. the 6 feature channels."""
    f = _data(image)
    albedo, raw_n, norm, ok, n_hat, shade = _diffuse_parts(f, lights)
    up = np.asarray(upstream) * _clamp01_mask(albedo * shade[..., None])
    d_albedo = up * shade[..., None]
    # through the shading scalar into the normalized normal
    d_shade = (up * albedo).sum(axis=-1)
    d_nhat = np.zeros_like(raw_n)
    for light in lights:
        lit = (n_hat @ (-light.direction)) > 0.0
        d_nhat += (d_shade * light.intensity * lit)[..., None] * (-light.direction)
    # through the normalization n_hat = n / |n|
    safe_norm = np.where(ok[..., None], norm, 1.0)
    d_n = (d_nhat - (d_nhat * n_hat).sum(-1, keepdims=True) * n_hat) / safe_norm
    d_n = np.where(ok[..., None], d_n, 0.0)
    return np.concatenate([d_albedo, d_n], axis=-1)


# ---------------------------------------------------------------------------
# trainable per-pixel linear shader
# ---------------------------------------------------------------------------

def view_direction_plane(camera: Camera) -> np.ndarray:
    """(H, W, 3) unit view directions in the camera frame."""
    gx, gy = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    rays = sensor_rays_camera_frame(camera, gx.ravel(), gy.ravel())
    return rays.directions.reshape(camera.height, camera.width, 3)


def _linear_input(f, view_dirs):
    if view_dirs is None:
        return f
    if view_dirs.shape[:2] != f.shape[:2]:
        raise ValidationError("view-direction plane does not match image size")
    return np.concatenate([f, view_dirs], axis=-1)


def shade_linear(image, shader: LinearShader, view_dirs=None) -> np.ndarray:
    """Per-pixel affine map plus clamp; optionally view-direction conditioned."""
    x = _linear_input(_data(image), view_dirs)
    if x.shape[-1] != shader.weight.shape[0]:
        raise ValidationError(
            f"shader expects {shader.weight.shape[0]} inputs, image has {x.shape[-1]}"
        )
    return np.clip(x @ shader.weight + shader.bias, 0.0, 1.0)


def shade_linear_backward(image, shader: LinearShader, upstream, view_dirs=None):
    """Returns (d_features, d_weight, d_bias); shader grads are None when the
    shader is frozen."""
    f = _data(image)
    x = _linear_input(f, view_dirs)
    pre = x @ shader.weight + shader.bias
    up = np.asarray(upstream) * _clamp01_mask(pre)
    d_x = up @ shader.weight.T
    d_f = d_x[..., : f.shape[-1]]
    if not shader.trainable:
        return d_f, None, None
    d_w = x.reshape(-1, x.shape[-1]).T @ up.reshape(-1, 3)
    d_b = up.reshape(-1, 3).sum(axis=0)
    return d_f, d_w, d_b
