"""Backward pass: image-space gradients into sphere and camera parameters.

Consumes the per-pixel backward buffer written by the forward pass.  Each
stored hit reconstructs its blending weight from (z, closeness, opacity,
log denominator); the loss gradient routes through the analytic partials of
the blending function, then through the ray geometry into positions, radii,
and camera parameters.  Spheres beyond the per-pixel top-K receive nothing
(accepted bias of the buffer design).

Normalization (optional, on by default):
* sphere gradients are averaged over the number of pixels that touched the
  sphere, so small and large spheres converge at similar rates;
* per-sphere camera contributions are scaled by 1e-3 / covered-pixel-area
  before the deterministic reduction over spheres.

Opacity is clamped to [0, 1] in the renderer but stored unconstrained; its
gradient passes straight through the clamp so optimizers can always push
opacity back into range.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blend import BlendParams
from .camera import (
    AXIS_ANGLE,
    PINHOLE,
    Camera,
    axis_angle_vjp,
    rotation_6d_vjp,
    sensor_rays_camera_frame,
)
from .errors import ContractViolation, ValidationError
from .raster import BackwardBuffer, PixelBackwardEntry, compute_bounds, _tile_grid
from .scene import SphereScene

GATE_RADIUS_PX = 3.0


@dataclass
class SceneGradients:
    d_position: np.ndarray  # (M, 3)
    d_radius: np.ndarray  # (M,)
    d_opacity: np.ndarray  # (M,)
    d_feature: np.ndarray  # (M, d)
    pixel_count: np.ndarray  # (M,) pixels holding the sphere in their buffer

    @staticmethod
    def zeros(m: int, d: int) -> "SceneGradients":
        return SceneGradients(
            d_position=np.zeros((m, 3)),
            d_radius=np.zeros(m),
            d_opacity=np.zeros(m),
            d_feature=np.zeros((m, d)),
            pixel_count=np.zeros(m, dtype=np.int64),
        )


@dataclass
class CameraGradients:
    d_translation: np.ndarray  # (3,)
    d_rotation: np.ndarray  # (3,) or (6,) matching the camera
    d_focal: float
    d_sensor_width: float


@dataclass
class RawContributions:
    """Per-sphere sums before normalization.

    center_grad accumulates d(loss)/d(camera-frame center); it feeds both the
    sphere position gradient and the camera extrinsics gradients.
    """

    center_grad: np.ndarray  # (M, 3)
    d_radius: np.ndarray  # (M,)
    d_opacity: np.ndarray  # (M,)
    d_feature: np.ndarray  # (M, d)
    g_focal: np.ndarray  # (M,)
    g_sensor: np.ndarray  # (M,)
    pixel_count: np.ndarray  # (M,)


def _hit_gradients(ids, z, clos, log_denom, upstream, scene, centers_cam, rays, camera, params):
    """Vectorized per-hit gradient pieces for one tile.

    Shapes: ids/z/clos (P, K); log_denom (P,); upstream (P, d).  Returns a
    (n_valid, 3 + 1 + 1 + d + 2) matrix of contributions plus the flat sphere
    indices, ordered pixel-major (deterministic).
    """
    g = params.gamma
    near, far = camera.near, camera.far
    p, k = ids.shape
    d = upstream.shape[1]
    valid = ids >= 0
    safe = np.where(valid, ids, 0)

    o = np.clip(scene.opacities[safe], 0.0, 1.0)
    feats = scene.features[safe]  # (P, K, d)
    exp_shift = np.where(valid, np.exp(o * z / g - log_denom[:, None]), 0.0)
    wgt = o * clos * exp_shift
    w_bg = np.exp(params.epsilon / g - log_denom)
    f_hat = np.einsum("pk,pkd->pd", wgt, feats) + w_bg[:, None] * scene.background

    a_coef = np.einsum("pd,pkd->pk", upstream, feats - f_hat[:, None, :])
    d_feat = wgt[:, :, None] * upstream[:, None, :]
    dl_dz = a_coef * wgt * o / g
    dl_dc = a_coef * o * exp_shift
    dl_do = a_coef * clos * exp_shift * (1.0 + o * z / g)

    # geometry chain
    u = rays.directions  # (P, 3)
    c = centers_cam[safe]  # (P, K, 3)
    radius = scene.radii[safe]
    if camera.mode == PINHOLE:
        t_along = np.einsum("pkj,pj->pk", c, u)
        dvec = c - t_along[:, :, None] * u[:, None, :]
    else:
        rel = c - rays.origins[:, None, :]
        t_along = rel[:, :, 2]
        dvec = rel.copy()
        dvec[:, :, 2] = 0.0
    dist = np.sqrt(np.maximum(np.einsum("pkj,pkj->pk", dvec, dvec), 0.0))
    interior = (0.0 < z) & (z < 1.0)  # NDC clamp inactive
    dl_dzeta = np.where(interior, dl_dz * (-1.0 / (far - near)), 0.0)
    dl_ddist = -dl_dc / np.maximum(radius, 1e-300)
    d_radius = dl_dc * dist / np.maximum(radius * radius, 1e-300)

    inv_dist = np.where(dist > 1e-12, 1.0 / np.maximum(dist, 1e-300), 0.0)
    dhat = dvec * inv_dist[:, :, None]
    if camera.mode == PINHOLE:
        g_center = (
            dl_ddist[:, :, None] * dhat
            + (dl_dzeta * u[:, 2:3])[:, :, None] * u[:, None, :]
        )
        # intrinsics: direction u = v/|v| with v = (x_s, y_s, f)
        grad_u = (dl_ddist * (-t_along) * inv_dist)[:, :, None] * c
        grad_u += (dl_dzeta * u[:, 2:3])[:, :, None] * c
        grad_u[:, :, 2] += dl_dzeta * t_along
        gu_dot_u = np.einsum("pkj,pj->pk", grad_u, u)
        proj = grad_u - gu_dot_u[:, :, None] * u[:, None, :]
        g_focal = proj[:, :, 2] * rays.inv_vnorm[:, None]
        xs = rays.sensor_xy[:, 0][:, None]
        ys = rays.sensor_xy[:, 1][:, None]
        g_sensor = (
            (proj[:, :, 0] * xs + proj[:, :, 1] * ys)
            * rays.inv_vnorm[:, None]
            / camera.sensor_width
        )
    else:
        g_center = dl_ddist[:, :, None] * dhat
        g_center[:, :, 2] += dl_dzeta
        xs = rays.sensor_xy[:, 0][:, None]
        ys = rays.sensor_xy[:, 1][:, None]
        g_sensor = (
            -(dl_ddist * inv_dist)
            * (dvec[:, :, 0] * xs + dvec[:, :, 1] * ys)
            / camera.sensor_width
        )
        g_focal = np.zeros_like(g_sensor)

    cols = np.concatenate(
        [
            g_center,
            d_radius[:, :, None],
            dl_do[:, :, None],
            d_feat,
            g_focal[:, :, None],
            g_sensor[:, :, None],
        ],
        axis=2,
    )
    flat_valid = valid.ravel()
    return ids.ravel()[flat_valid], cols.reshape(p * k, -1)[flat_valid]


def backward_pixel(pixel, upstream, entry: PixelBackwardEntry, scene, camera, params):
    """Scalar reference: gradient contributions for one pixel.

    Returns (ids, contributions) where contributions rows are
    [g_center(3), d_radius, d_opacity, d_feature(d), g_focal, g_sensor]
    for each stored hit.  g_center is in the camera frame.
    """
    if entry.ids.size and int(entry.ids.max()) >= len(scene):
        raise ContractViolation("backward entry references spheres beyond the scene")
    u, v = pixel
    rays = sensor_rays_camera_frame(camera, np.array([u]), np.array([v]))
    centers = camera.world_to_camera(scene.positions)
    k = max(entry.ids.size, 1)
    ids = np.full((1, k), -1, dtype=np.int32)
    z = np.zeros((1, k))
    clos = np.zeros((1, k))
    ids[0, : entry.ids.size] = entry.ids
    z[0, : entry.ids.size] = entry.z
    clos[0, : entry.ids.size] = entry.closeness
    flat_ids, cols = _hit_gradients(
        ids, z, clos,
        np.array([entry.log_denom]),
        np.asarray(upstream, dtype=np.float64).reshape(1, -1),
        scene, centers, rays, camera, params,
    )
    return flat_ids, cols


def _accumulate_tiles(buffer, upstream, scene, camera, tile_size, workers):
    h, w, _ = buffer.ids.shape
    m, d = len(scene), scene.feature_dim
    centers = camera.world_to_camera(scene.positions)
    _, _, tiles = _tile_grid(w, h, tile_size)
    ncols = 3 + 1 + 1 + d + 2

    def run_tile(t):
        y0, y1, x0, x1 = t
        ids = buffer.ids[y0:y1, x0:x1].reshape(-1, buffer.ids.shape[2])
        if not (ids >= 0).any():
            return None
        gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        rays = sensor_rays_camera_frame(camera, gx.ravel(), gy.ravel())
        z = buffer.z[y0:y1, x0:x1].reshape(ids.shape).astype(np.float64)
        clos = buffer.closeness[y0:y1, x0:x1].reshape(ids.shape).astype(np.float64)
        ld = buffer.log_denom[y0:y1, x0:x1].reshape(-1).astype(np.float64)
        up = upstream[y0:y1, x0:x1].reshape(-1, d).astype(np.float64)
        flat_ids, cols = _hit_gradients(
            ids, z, clos, ld, up, scene, centers, rays, camera, buffer.params
        )
        uniq, inv = np.unique(flat_ids, return_inverse=True)
        sums = np.zeros((uniq.size, ncols))
        np.add.at(sums, inv, cols)
        counts = np.bincount(inv, minlength=uniq.size)
        return uniq, sums, counts

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]

    total = np.zeros((m, ncols))
    count = np.zeros(m, dtype=np.int64)
    for res in results:  # fixed tile order keeps the reduction deterministic
        if res is None:
            continue
        uniq, sums, counts = res
        total[uniq] += sums
        count[uniq] += counts
    return RawContributions(
        center_grad=total[:, 0:3],
        d_radius=total[:, 3],
        d_opacity=total[:, 4],
        d_feature=total[:, 5 : 5 + d],
        g_focal=total[:, 5 + d],
        g_sensor=total[:, 6 + d],
        pixel_count=count,
    )


def accumulate_and_normalize(
    raw: RawContributions,
    scene: SphereScene,
    camera: Camera,
    proj_radius_px: np.ndarray,
    normalize: bool = True,
):
    """Turn raw per-sphere sums into SceneGradients and CameraGradients."""
    m, d = len(scene), scene.feature_dim
    rot = camera.rotation
    if normalize:
        div = np.maximum(raw.pixel_count, 1).astype(np.float64)
        area = np.maximum(np.pi * proj_radius_px**2, 1.0)
        cam_scale = 1e-3 / area
    else:
        div = np.ones(m)
        cam_scale = np.ones(m)

    grads = SceneGradients(
        d_position=(raw.center_grad @ rot) / div[:, None],
        d_radius=raw.d_radius / div,
        d_opacity=raw.d_opacity / div,
        d_feature=raw.d_feature / div[:, None],
        pixel_count=raw.pixel_count.copy(),
    )

    scaled_center = cam_scale[:, None] * raw.center_grad
    d_translation = -(scaled_center.sum(axis=0) @ rot)
    rel = scene.positions - camera.translation
    grad_rot_matrix = scaled_center.T @ rel  # sum of outer(g_center, p - t)
    if camera.rotation_type == AXIS_ANGLE:
        d_rotation = axis_angle_vjp(camera.rotation_param, grad_rot_matrix)
    else:
        d_rotation = rotation_6d_vjp(camera.rotation_param, grad_rot_matrix)
    cam = CameraGradients(
        d_translation=d_translation,
        d_rotation=d_rotation,
        d_focal=float(cam_scale @ raw.g_focal),
        d_sensor_width=float(cam_scale @ raw.g_sensor),
    )
    return grads, cam


def gate_small_spheres(
    scene: SphereScene, camera: Camera, grads: SceneGradients,
    proj_radius_px: Optional[np.ndarray] = None,
) -> SceneGradients:
    """Zero position/radius gradients for spheres projecting to <= 3 px.

    Feature and opacity gradients stay, so tiny spheres can still fade out
    and be pruned.
    """
    if proj_radius_px is None:
        bounds, _ = compute_bounds(scene, camera)
        proj_radius_px = bounds.proj_radius_px
    gated = proj_radius_px <= GATE_RADIUS_PX
    grads.d_position[gated] = 0.0
    grads.d_radius[gated] = 0.0
    return grads


def render_backward(
    scene: SphereScene,
    camera: Camera,
    params: BlendParams,
    buffer: BackwardBuffer,
    upstream,
    *,
    workers: int = 1,
    normalize: bool = True,
    gate: bool = True,
    tile_size: int = 16,
):
    """Full backward pipeline over all pixels.

    upstream is the (H, W, d) gradient of the loss w.r.t. the rendered
    feature image.  Deterministic across worker counts.
    """
    if buffer.num_spheres != len(scene):
        raise ContractViolation(
            f"buffer built for {buffer.num_spheres} spheres, scene has {len(scene)}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    h, w, _ = buffer.ids.shape
    if upstream.shape != (h, w, scene.feature_dim):
        raise ValidationError(
            f"upstream shape {upstream.shape} != {(h, w, scene.feature_dim)}"
        )
    raw = _accumulate_tiles(buffer, upstream, scene, camera, tile_size, workers)
    bounds, _ = compute_bounds(scene, camera)
    grads, cam_grads = accumulate_and_normalize(
        raw, scene, camera, bounds.proj_radius_px, normalize=normalize
    )
    if gate:
        grads = gate_small_spheres(scene, camera, grads, bounds.proj_radius_px)
    return grads, cam_grads
