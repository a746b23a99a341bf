"""Forward rendering pipeline.

Stages, mirrored by the public helpers:

* compute_bounds: conservative per-sphere pixel rectangles plus camera-frame
  draw records (step 0).
* sort_draw_records: stable global sort by earliest possible intersection
  distance; off-sensor records sink to the tail (step 0).
* tile binning + draw: each 16x16 tile scans its depth-ordered candidate list
  in chunks, accumulating the shift-stabilized blending sums and a per-pixel
  top-K hit record, and stops as soon as every pixel in the tile votes that
  no remaining sphere can reach the contribution threshold (steps 1 + 2).

Tiles own disjoint output regions, so rendering is bit-identical for any
worker count; candidate order is fixed by the global sort.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blend import BlendParams, stop_depth_bound_log
from .camera import ORTHOGRAPHIC, PINHOLE, Camera, sensor_rays_camera_frame
from .errors import ValidationError
from .scene import SphereScene

DEFAULT_TILE_SIZE = 16
_CHUNK = 256
_INT_HUGE = 1 << 30


@dataclass
class SphereBounds:
    """Per-sphere conservative pixel rectangles (parallel arrays)."""

    x_min: np.ndarray
    x_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    on_sensor: np.ndarray  # bool
    proj_radius_px: np.ndarray  # approximate projected radius, pixels

    def __len__(self):
        return self.x_min.shape[0]

    def take(self, idx):
        return SphereBounds(
            self.x_min[idx], self.x_max[idx], self.y_min[idx], self.y_max[idx],
            self.on_sensor[idx], self.proj_radius_px[idx],
        )


@dataclass
class DrawRecords:
    """Everything needed to draw spheres, in camera frame (parallel arrays)."""

    center_cam: np.ndarray  # (M, 3)
    radius: np.ndarray  # (M,)
    opacity: np.ndarray  # (M,) raw (unclamped)
    feature: np.ndarray  # (M, d)
    earliest: np.ndarray  # (M,) metric distance to nearest possible hit
    sphere_id: np.ndarray  # (M,) original scene indices

    def __len__(self):
        return self.radius.shape[0]

    def take(self, idx):
        return DrawRecords(
            self.center_cam[idx], self.radius[idx], self.opacity[idx],
            self.feature[idx], self.earliest[idx], self.sphere_id[idx],
        )


@dataclass
class FeatureImage:
    data: np.ndarray  # (H, W, d)
    background_weight: Optional[np.ndarray] = None  # (H, W)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def feature_dim(self):
        return self.data.shape[2]


@dataclass
class BackwardBuffer:
    """Per-pixel record feeding the backward pass.

    Entries are sorted by descending z (nearest hit first); empty slots carry
    sphere id -1.  log_denom is the log of the full blending denominator.
    """

    ids: np.ndarray  # (H, W, K) int32
    z: np.ndarray  # (H, W, K)
    closeness: np.ndarray  # (H, W, K)
    log_denom: np.ndarray  # (H, W)
    params: BlendParams
    num_spheres: int


@dataclass
class RenderStats:
    spheres_total: int = 0
    spheres_on_sensor: int = 0
    candidates_tested: int = 0  # (tile, record) pairs scanned
    hits_blended: int = 0  # (pixel, record) pairs that intersected
    pixels_early_stopped: int = 0
    tiles: int = 0

    def early_stop_ratio(self, num_pixels: int) -> float:
        return self.pixels_early_stopped / num_pixels if num_pixels else 0.0


# ---------------------------------------------------------------------------
# Step 0: bounds + draw records
# ---------------------------------------------------------------------------

def _axis_extent_pinhole(ca, cz, r, focal):
    """Sensor-plane extent of the tangent wedge in one lateral axis.

    Projects the ray cone onto the (axis, z) plane: rays hitting the sphere
    shadow to 2D lines hitting the disc (center (ca, cz), radius r), so the
    tangent lines bound the sensor extent.  Returns metric sensor coords
    (lo, hi) with +-inf where the wedge crosses the horizon, and an `empty`
    mask where the wedge lies entirely behind the sensor.
    """
    n2 = ca * ca + cz * cz
    n = np.sqrt(n2)
    full = n2 <= r * r
    with np.errstate(invalid="ignore"):
        beta = np.arcsin(np.clip(r / np.maximum(n, 1e-300), 0.0, 1.0))
    phi = np.arctan2(ca, cz)
    lo_a = phi - beta
    hi_a = phi + beta
    half = np.pi / 2.0
    empty = ((lo_a >= half) | (hi_a <= -half)) & ~full
    cap = half - 1e-9
    lo = np.where(lo_a <= -half, -np.inf, focal * np.tan(np.clip(lo_a, -cap, cap)))
    hi = np.where(hi_a >= half, np.inf, focal * np.tan(np.clip(hi_a, -cap, cap)))
    lo = np.where(full, -np.inf, lo)
    hi = np.where(full, np.inf, hi)
    return lo, hi, empty


def _discretize_extent(lo_px, hi_px, center_px, limit):
    """Continuous pixel extent -> inclusive index range [i_lo, i_hi].

    Pixels are included when their center lies inside the extent; sub-pixel
    extents collapse to the single pixel containing the projected center.
    """
    pad = 1e-9 * (1.0 + np.abs(lo_px))
    lo_f = np.clip(np.ceil(lo_px - 0.5 - pad), -_INT_HUGE, _INT_HUGE)
    pad = 1e-9 * (1.0 + np.abs(hi_px))
    hi_f = np.clip(np.floor(hi_px - 0.5 + pad), -_INT_HUGE, _INT_HUGE)
    i_lo = lo_f.astype(np.int64)
    i_hi = hi_f.astype(np.int64)
    sub = i_lo > i_hi
    if np.any(sub):
        nearest = np.clip(
            np.floor(np.where(np.isfinite(center_px), center_px, 0.0)),
            -_INT_HUGE, _INT_HUGE,
        ).astype(np.int64)
        i_lo = np.where(sub, nearest, i_lo)
        i_hi = np.where(sub, nearest, i_hi)
    outside = (i_hi < 0) | (i_lo > limit - 1)
    return np.clip(i_lo, 0, limit - 1), np.clip(i_hi, 0, limit - 1), outside


def compute_bounds(scene: SphereScene, camera: Camera):
    """Step 0: per-sphere screen rectangles and camera-frame draw records."""
    scene.validate()
    m = len(scene)
    c = camera.world_to_camera(scene.positions) if m else np.zeros((0, 3))
    r = scene.radii
    w, h = camera.width, camera.height
    px_per_unit = w / camera.sensor_width

    if camera.mode == PINHOLE:
        behind = c[:, 2] + r <= 0.0
        lo_x, hi_x, empty_x = _axis_extent_pinhole(c[:, 0], c[:, 2], r, camera.focal_length)
        lo_y, hi_y, empty_y = _axis_extent_pinhole(c[:, 1], c[:, 2], r, camera.focal_length)
        with np.errstate(divide="ignore", invalid="ignore"):
            safe_z = np.where(c[:, 2] > 0, c[:, 2], np.inf)
            u_c = w / 2.0 + camera.focal_length * c[:, 0] / safe_z * px_per_unit
            v_c = h / 2.0 + camera.focal_length * c[:, 1] / safe_z * px_per_unit
        d2 = np.einsum("ij,ij->i", c, c)
        earliest = np.sqrt(d2) - r
        proj_r = (
            camera.focal_length * r / np.sqrt(np.maximum(d2 - r * r, 1e-300))
        ) * px_per_unit
        proj_r = np.where(d2 <= r * r, float(max(w, h)), proj_r)
    else:
        behind = c[:, 2] + r <= 0.0
        lo_x, hi_x = c[:, 0] - r, c[:, 0] + r
        lo_y, hi_y = c[:, 1] - r, c[:, 1] + r
        empty_x = np.zeros(m, dtype=bool)
        empty_y = np.zeros(m, dtype=bool)
        u_c = w / 2.0 + c[:, 0] * px_per_unit
        v_c = h / 2.0 + c[:, 1] * px_per_unit
        earliest = c[:, 2] - r
        proj_r = r * px_per_unit

    x0, x1, out_x = _discretize_extent(
        w / 2.0 + lo_x * px_per_unit, w / 2.0 + hi_x * px_per_unit, u_c, w
    )
    y0, y1, out_y = _discretize_extent(
        h / 2.0 + lo_y * px_per_unit, h / 2.0 + hi_y * px_per_unit, v_c, h
    )
    on_sensor = ~(behind | empty_x | empty_y | out_x | out_y)
    earliest = np.where(on_sensor, earliest, np.inf)

    bounds = SphereBounds(
        x_min=x0, x_max=x1, y_min=y0, y_max=y1,
        on_sensor=on_sensor, proj_radius_px=proj_r,
    )
    draws = DrawRecords(
        center_cam=c,
        radius=r.copy(),
        opacity=scene.opacities.copy(),
        feature=scene.features,
        earliest=earliest,
        sphere_id=np.arange(m, dtype=np.int32),
    )
    return bounds, draws


def sort_draw_records(bounds: SphereBounds, draws: DrawRecords):
    """Stable ascending sort by earliest intersection; ties keep input order."""
    if len(draws) != len(bounds):
        raise ValidationError("bounds and draw records have mismatched lengths")
    order = np.argsort(draws.earliest, kind="stable")
    return bounds.take(order), draws.take(order)


def gather_tile_candidates(tile_rect, bounds: SphereBounds, draws: DrawRecords):
    """Indices of records whose rectangle overlaps the tile, in stored order.

    tile_rect is (x0, y0, x1, y1) with inclusive pixel bounds.
    """
    x0, y0, x1, y1 = tile_rect
    mask = (
        bounds.on_sensor
        & (bounds.x_min <= x1)
        & (bounds.x_max >= x0)
        & (bounds.y_min <= y1)
        & (bounds.y_max >= y0)
    )
    return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# Tile binning (step 1)
# ---------------------------------------------------------------------------

def _bin_tiles(bounds: SphereBounds, n_active: int, tile_size: int, ntx: int, nty: int):
    """Duplicate each record into every tile its rectangle touches.

    Returns (record_seq, tile_starts): record_seq holds indices into the
    sorted arrays grouped by tile id, depth order preserved within a tile.
    """
    n_tiles = ntx * nty
    if n_active == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64)
    tx0 = bounds.x_min[:n_active] // tile_size
    tx1 = bounds.x_max[:n_active] // tile_size
    ty0 = bounds.y_min[:n_active] // tile_size
    ty1 = bounds.y_max[:n_active] // tile_size
    wx = tx1 - tx0 + 1
    span = wx * (ty1 - ty0 + 1)
    offs = np.zeros(n_active + 1, dtype=np.int64)
    np.cumsum(span, out=offs[1:])
    total = int(offs[-1])
    rec = np.repeat(np.arange(n_active, dtype=np.int64), span)
    local = np.arange(total, dtype=np.int64) - offs[rec]
    wx_r = wx[rec]
    tile_ids = (ty0[rec] + local // wx_r) * ntx + (tx0[rec] + local % wx_r)
    order = np.argsort(tile_ids, kind="stable")
    counts = np.bincount(tile_ids, minlength=n_tiles)
    starts = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return rec[order], starts


# ---------------------------------------------------------------------------
# Step 2: draw
# ---------------------------------------------------------------------------

def _intersect_chunk(rays, centers, radii, mode):
    """Ray-sphere geometry for a (pixels x chunk) block.

    Returns (hit, closeness, zeta, t_along) where zeta is the axial metric
    depth of the chord midpoint (perpendicular foot of the center).
    """
    u = rays.directions
    if mode == PINHOLE:
        t_along = u @ centers.T  # (P, C)
        n2 = np.einsum("ij,ij->i", centers, centers)
        dist2 = n2[None, :] - t_along**2
        zeta = t_along * u[:, 2:3]
    else:
        a = rays.origins
        t_along = np.broadcast_to(centers[:, 2][None, :], (u.shape[0], centers.shape[0]))
        dx = centers[:, 0][None, :] - a[:, 0:1]
        dy = centers[:, 1][None, :] - a[:, 1:2]
        dist2 = dx * dx + dy * dy
        zeta = t_along
    dist2 = np.maximum(dist2, 0.0)
    rr = radii * radii
    inside = dist2 < rr[None, :]
    half_chord = np.sqrt(np.maximum(rr[None, :] - dist2, 0.0))
    hit = inside & (t_along + half_chord > 0.0)
    closeness = np.where(hit, 1.0 - np.sqrt(dist2) / radii[None, :], 0.0)
    return hit, closeness, zeta, t_along


def _draw_tile(
    tile_px, rays, cand_idx, draws, camera, params, dtype, out, stats_row,
    chunk_size=_CHUNK,
):
    """Render one tile; writes the tile's slice of the output arrays.

    cand_idx indexes the sorted draw records overlapping this tile, already
    in depth order.
    """
    (y0, y1, x0, x1) = tile_px
    p = (y1 - y0) * (x1 - x0)
    d = draws.feature.shape[1]
    g = params.gamma
    near, far = camera.near, camera.far
    inv_range = 1.0 / (far - near)
    k = params.top_k

    m = np.full(p, params.epsilon / g, dtype=dtype)
    denom = np.ones(p, dtype=dtype)
    num = np.zeros((p, d), dtype=dtype)
    topk_z = np.full((p, k), -np.inf, dtype=dtype)
    topk_c = np.zeros((p, k), dtype=dtype)
    topk_id = np.full((p, k), -1, dtype=np.int32)
    done = np.zeros(p, dtype=bool)

    n_cand = cand_idx.shape[0]
    scanned = 0
    hits_blended = 0
    if n_cand:
        # max achievable NDC depth per candidate, nonincreasing in scan order
        tile_cos = float(rays.directions[:, 2].min()) if camera.mode == PINHOLE else 1.0
        zb = (far - np.clip(draws.earliest[cand_idx] * tile_cos, near, far)) * inv_range
        log_tau = (
            np.log(params.tau / (1.0 - params.tau)) if params.tau > 0.0 else None
        )
        for start in range(0, n_cand, chunk_size):
            if log_tau is not None:
                z_stop = g * (log_tau + m + np.log(denom))
                done |= zb[start] < z_stop
                if done.all():
                    break
            sub = cand_idx[start : start + chunk_size]
            scanned += sub.shape[0]
            centers = draws.center_cam[sub].astype(dtype, copy=False)
            radii = draws.radius[sub].astype(dtype, copy=False)
            opac = np.clip(draws.opacity[sub], 0.0, 1.0).astype(dtype, copy=False)
            hit, clos, zeta, _ = _intersect_chunk(rays, centers, radii, camera.mode)
            if done.any():
                hit &= ~done[:, None]
            if not hit.any():
                continue
            hits_blended += int(hit.sum())
            z = (far - np.clip(zeta, near, far)) * inv_range
            e = np.where(hit, opac[None, :] * z / g, -np.inf)
            new_m = np.maximum(m, e.max(axis=1))
            scale = np.exp(m - new_m)
            term = np.where(hit, opac[None, :] * clos * np.exp(e - new_m[:, None]), 0.0)
            denom = denom * scale + term.sum(axis=1)
            num = num * scale[:, None] + term @ draws.feature[sub].astype(dtype, copy=False)
            m = new_m
            # fold chunk hits into the running top-K (largest z, ties by id)
            store = term > 0.0
            cand_z = np.where(store, z, -np.inf)
            cand_id = np.where(store, draws.sphere_id[sub][None, :], np.int32(-1))
            cand_c = np.where(store, clos, 0.0)
            all_z = np.concatenate([topk_z, cand_z], axis=1)
            all_id = np.concatenate([topk_id, cand_id], axis=1)
            all_c = np.concatenate([topk_c, cand_c], axis=1)
            order = np.lexsort((all_id, -all_z), axis=1)[:, :k]
            topk_z = np.take_along_axis(all_z, order, axis=1)
            topk_id = np.take_along_axis(all_id, order, axis=1)
            topk_c = np.take_along_axis(all_c, order, axis=1)

    log_denom = m + np.log(denom)
    w_bg = np.exp(params.epsilon / g - log_denom)
    feat = num / denom[:, None] + w_bg[:, None] * out["background"].astype(dtype)

    hw = (y1 - y0, x1 - x0)
    out["image"][y0:y1, x0:x1] = feat.reshape(hw + (d,))
    out["bg_weight"][y0:y1, x0:x1] = w_bg.reshape(hw)
    if out["buffer"] is not None:
        buf = out["buffer"]
        topk_id = np.where(np.isneginf(topk_z), np.int32(-1), topk_id)
        buf.ids[y0:y1, x0:x1] = topk_id.reshape(hw + (k,))
        buf.z[y0:y1, x0:x1] = np.where(np.isneginf(topk_z), 0.0, topk_z).reshape(hw + (k,))
        buf.closeness[y0:y1, x0:x1] = topk_c.reshape(hw + (k,))
        buf.log_denom[y0:y1, x0:x1] = log_denom.reshape(hw)
    stats_row[0] = scanned
    stats_row[1] = hits_blended
    stats_row[2] = int(done.sum())


def _tile_grid(width, height, tile_size):
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    tiles = []
    for ty in range(nty):
        for tx in range(ntx):
            tiles.append(
                (
                    ty * tile_size,
                    min((ty + 1) * tile_size, height),
                    tx * tile_size,
                    min((tx + 1) * tile_size, width),
                )
            )
    return ntx, nty, tiles


def render_forward(
    scene: SphereScene,
    camera: Camera,
    params: BlendParams,
    *,
    workers: int = 1,
    dtype=np.float64,
    tile_size: int = DEFAULT_TILE_SIZE,
    store_buffer: bool = True,
    chunk_size: int = _CHUNK,
):
    """Full pipeline: bounds, sort, tile binning, tile draw.

    Returns (FeatureImage, BackwardBuffer or None, RenderStats).  Output is
    bit-identical for any worker count.
    """
    dtype = np.dtype(dtype)
    bounds, draws = compute_bounds(scene, camera)
    sbounds, sdraws = sort_draw_records(bounds, draws)
    n_active = int(sbounds.on_sensor.sum())

    h, w, d = camera.height, camera.width, scene.feature_dim
    ntx, nty, tiles = _tile_grid(w, h, tile_size)
    record_seq, tile_starts = _bin_tiles(sbounds, n_active, tile_size, ntx, nty)

    image = np.zeros((h, w, d), dtype=dtype)
    bg_weight = np.zeros((h, w), dtype=dtype)
    buffer = None
    if store_buffer:
        k = params.top_k
        buffer = BackwardBuffer(
            ids=np.full((h, w, k), -1, dtype=np.int32),
            z=np.zeros((h, w, k), dtype=dtype),
            closeness=np.zeros((h, w, k), dtype=dtype),
            log_denom=np.zeros((h, w), dtype=dtype),
            params=params,
            num_spheres=len(scene),
        )
    out = {
        "image": image,
        "bg_weight": bg_weight,
        "buffer": buffer,
        "background": scene.background,
    }
    stats_rows = np.zeros((len(tiles), 3), dtype=np.int64)

    def run_tile(i):
        y0, y1, x0, x1 = tiles[i]
        gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        rays = sensor_rays_camera_frame(camera, gx.ravel(), gy.ravel())
        rays = rays._replace(
            origins=rays.origins.astype(dtype, copy=False),
            directions=rays.directions.astype(dtype, copy=False),
        )
        cand = record_seq[tile_starts[i] : tile_starts[i + 1]]
        _draw_tile(
            tiles[i], rays, cand, sdraws, camera, params, dtype, out, stats_rows[i],
            chunk_size=chunk_size,
        )

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, range(len(tiles))))
    else:
        for i in range(len(tiles)):
            run_tile(i)

    stats = RenderStats(
        spheres_total=len(scene),
        spheres_on_sensor=n_active,
        candidates_tested=int(stats_rows[:, 0].sum()),
        hits_blended=int(stats_rows[:, 1].sum()),
        pixels_early_stopped=int(stats_rows[:, 2].sum()),
        tiles=len(tiles),
    )
    return FeatureImage(data=image, background_weight=bg_weight), buffer, stats


# ---------------------------------------------------------------------------
# Scalar reference: per-pixel draw
# ---------------------------------------------------------------------------

@dataclass
class PixelBackwardEntry:
    ids: np.ndarray
    z: np.ndarray
    closeness: np.ndarray
    log_denom: float
    background_weight: float


def draw_pixel(pixel, candidates: DrawRecords, camera: Camera, params: BlendParams, background):
    """Scalar per-pixel draw over a depth-sorted candidate list.

    Walks candidates in order, skips misses, blends hits into the stabilized
    running sums, tracks the K nearest hits in a priority queue, and stops
    once the next candidate's best achievable NDC depth falls below the
    current stop bound.  Returns (feature, PixelBackwardEntry, visited).
    """
    u, v = pixel
    rays = sensor_rays_camera_frame(camera, np.array([u]), np.array([v]))
    uvec = rays.directions[0]
    avec = rays.origins[0]
    g = params.gamma
    near, far = camera.near, camera.far
    m = params.epsilon / g
    denom = 1.0
    num = np.zeros_like(np.asarray(background, dtype=np.float64))
    heap: list = []  # min-heap of (z, -id, closeness); holds the K largest z
    visited = 0
    axial_cos = uvec[2] if camera.mode == PINHOLE else 1.0

    for i in range(len(candidates)):
        if params.tau > 0.0:
            z_stop = stop_depth_bound_log(m + np.log(denom), params)
            z_best = (far - np.clip(candidates.earliest[i] * axial_cos, near, far)) / (
                far - near
            )
            if z_best < z_stop:
                break
        visited += 1
        c = candidates.center_cam[i]
        r = candidates.radius[i]
        rel = c - avec
        t_along = rel @ uvec
        dist2 = max(rel @ rel - t_along * t_along, 0.0)
        if dist2 >= r * r:
            continue
        half_chord = np.sqrt(r * r - dist2)
        if t_along + half_chord <= 0.0:
            continue
        zeta = t_along * uvec[2] if camera.mode == PINHOLE else c[2]
        z = (far - np.clip(zeta, near, far)) / (far - near)
        clos = 1.0 - np.sqrt(dist2) / r
        o = float(np.clip(candidates.opacity[i], 0.0, 1.0))
        e = o * z / g
        new_m = max(m, e)
        scale = np.exp(m - new_m)
        term = o * clos * np.exp(e - new_m)
        denom = denom * scale + term
        num = num * scale + term * candidates.feature[i]
        m = new_m
        if term > 0.0:
            item = (z, -int(candidates.sphere_id[i]), clos)
            if len(heap) < params.top_k:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)

    log_denom = m + np.log(denom)
    w_bg = float(np.exp(params.epsilon / g - log_denom))
    feature = num / denom + w_bg * np.asarray(background, dtype=np.float64)
    entries = sorted(heap, key=lambda t: (-t[0], -t[1]))
    entry = PixelBackwardEntry(
        ids=np.array([-e[1] for e in entries], dtype=np.int32),
        z=np.array([e[0] for e in entries]),
        closeness=np.array([e[2] for e in entries]),
        log_denom=float(log_denom),
        background_weight=w_bg,
    )
    return feature, entry, visited
