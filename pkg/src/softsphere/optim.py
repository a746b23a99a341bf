"""Gradient-based scene fitting.

The fit loop cycles through posed target images (seeded epoch shuffling),
renders, measures a mean-absolute photometric loss plus an optional
opacity-depth energy, runs the analytic backward pass, and applies per-group
Adam updates.  Pruning and subdivision run on their configured schedules.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .blend import BlendParams
from .camera import Camera, camera_from_vector, camera_to_vector
from .errors import ConfigurationError, DivergenceError, FormatError, ValidationError
from .grad import render_backward
from .raster import render_forward
from .scene import RADIUS_MIN, SphereScene, scene_from_bytes, scene_to_bytes


@dataclass
class Observation:
    """One posed training image."""

    image: np.ndarray  # (H, W, d)
    camera: Camera


@dataclass
class FitConfig:
    # learning rates per parameter group; 0 freezes the group
    lr_position: float = 1e-3
    lr_radius: float = 1e-3
    lr_opacity: float = 1e-2
    lr_feature: float = 1e-2
    lr_camera: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    # blending schedule: gamma is log-interpolated start -> end over the run
    gamma_start: float = 0.1
    gamma_end: float = 1e-4
    epsilon: float = 1e-2
    tau: float = 0.01
    top_k: int = 5
    lambda_od: float = 0.0  # opacity-depth regularizer weight
    # pruning
    prune_every: int = 0  # steps between prune passes; 0 disables
    prune_opacity_min: float = 0.05
    prune_background_dist: float = 0.0  # 0 disables the color criterion
    # subdivision
    subdivide_at: tuple = ()  # step indices triggering subdivision
    subdivide_scale: float = float(np.sqrt(2.0))
    radius_min: float = RADIUS_MIN
    seed: int = 0
    normalize_grads: bool = True
    gate: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("lr_position", "lr_radius", "lr_opacity", "lr_feature", "lr_camera"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("gamma_start", "gamma_end"):
            g = getattr(self, name)
            if not (1e-5 <= g <= 1.0):
                raise ConfigurationError(f"{name} must lie in [1e-5, 1]")

    def gamma_at(self, step: int) -> float:
        if self.steps <= 1:
            return self.gamma_start
        t = step / (self.steps - 1)
        return float(
            np.exp((1 - t) * np.log(self.gamma_start) + t * np.log(self.gamma_end))
        )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def photometric_loss(rendered, target):
    """Mean absolute error and its subgradient image (sign; 0 at ties)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(
            f"rendered shape {rendered.shape} != target {target.shape}"
        )
    diff = rendered - target
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def opacity_depth_regularizer(scene: SphereScene, camera: Camera, lambda_od: float):
    """Energy -z_i * o_i per sphere, pulling opaque spheres toward the camera.

    Returns (energy, d_position, d_opacity); z is the NDC depth of the sphere
    center and o the clamped opacity.  Gradients pass straight through the
    opacity clamp.
    """
    m = len(scene)
    if lambda_od == 0.0 or m == 0:
        return 0.0, np.zeros((m, 3)), np.zeros(m)
    c = camera.world_to_camera(scene.positions)
    zeta = c[:, 2]
    near, far = camera.near, camera.far
    z = (far - np.clip(zeta, near, far)) / (far - near)
    o = np.clip(scene.opacities, 0.0, 1.0)
    energy = float(lambda_od * np.sum(-z * o))
    interior = (zeta > near) & (zeta < far)
    # dE/dzeta = lambda * o / (far - near) inside the clamp
    dzeta = np.where(interior, lambda_od * o / (far - near), 0.0)
    d_position = dzeta[:, None] * camera.rotation[2][None, :]
    d_opacity = -lambda_od * z
    return energy, d_position, d_opacity


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(x) -> "AdamState":
        return AdamState(m=np.zeros_like(x, dtype=np.float64), v=np.zeros_like(x, dtype=np.float64))

    def take(self, idx) -> "AdamState":
        return AdamState(m=self.m[idx], v=self.v[idx], t=self.t)


def adam_step(params, grads, state: AdamState, lr: float, config: FitConfig):
    """Standard bias-corrected Adam update; returns the new parameter array."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValidationError("adam_step: parameter/gradient/state shape mismatch")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# Scene surgery: pruning and subdivision
# ---------------------------------------------------------------------------

def prune(scene: SphereScene, visibility, config: FitConfig):
    """Drop spheres that clamp to transparent, match the background, or were
    never touched by any training pixel.

    visibility is the per-sphere pixel count accumulated over at least one
    full pass of the observations.  Returns (scene', keep_mask).
    """
    visibility = np.asarray(visibility).reshape(len(scene))
    keep = np.clip(scene.opacities, 0.0, 1.0) >= config.prune_opacity_min
    if config.prune_background_dist > 0:
        dist = np.linalg.norm(scene.features - scene.background, axis=1)
        keep &= dist >= config.prune_background_dist
    keep &= visibility > 0
    out = SphereScene(
        feature_dim=scene.feature_dim,
        background=scene.background.copy(),
        positions=scene.positions[keep].copy(),
        radii=scene.radii[keep].copy(),
        opacities=scene.opacities[keep].copy(),
        features=scene.features[keep].copy(),
    )
    return out, keep


_FCC_DIRS = np.array(
    [
        [1, 1, 0], [1, -1, 0], [-1, 1, 0], [-1, -1, 0],
        [1, 0, 1], [1, 0, -1], [-1, 0, 1], [-1, 0, -1],
        [0, 1, 1], [0, 1, -1], [0, -1, 1], [0, -1, -1],
    ],
    dtype=np.float64,
)


def subdivide(scene: SphereScene, config: FitConfig) -> SphereScene:
    """Replace each sphere by 12 children along the FCC neighbor directions.

    Children sit at parent + (r / sqrt(2)) * dir, i.e. at distance r from the
    parent center, with radius subdivide_scale * r; opacity and feature are
    inherited.
    """
    m = len(scene)
    a = (scene.radii / np.sqrt(2.0))[:, None, None]  # (M, 1, 1)
    offsets = a * _FCC_DIRS[None, :, :]  # (M, 12, 3)
    positions = (scene.positions[:, None, :] + offsets).reshape(m * 12, 3)
    return SphereScene(
        feature_dim=scene.feature_dim,
        background=scene.background.copy(),
        positions=positions,
        radii=np.repeat(scene.radii * config.subdivide_scale, 12),
        opacities=np.repeat(scene.opacities, 12),
        features=np.repeat(scene.features, 12, axis=0),
    )


# ---------------------------------------------------------------------------
# The fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    scene: SphereScene
    cameras: list
    trace: np.ndarray  # per-step loss
    events: list = field(default_factory=list)  # (step, kind, detail)


def fit(
    scene: SphereScene,
    observations: list[Observation],
    config: FitConfig,
    renderer=None,
    on_step=None,
) -> FitResult:
    """Optimize scene (and optionally camera) parameters against observations.

    renderer, when given, must provide forward(scene, camera, params) and
    backward(scene, camera, params, buffer, upstream) with the library
    signatures; by default the built-in pipeline runs with config.workers.
    on_step(step, loss, scene, cameras) is called after every update.
    """
    if not observations:
        raise ValidationError("fit needs at least one observation")
    d = scene.feature_dim
    for i, ob in enumerate(observations):
        if ob.image.shape != (ob.camera.height, ob.camera.width, d):
            raise ValidationError(f"observation {i} image shape mismatch")

    scene = scene.copy()
    cameras = [ob.camera for ob in observations]
    rng = np.random.default_rng(config.seed)
    states = {
        "position": AdamState.like(scene.positions),
        "radius": AdamState.like(scene.radii),
        "opacity": AdamState.like(scene.opacities),
        "feature": AdamState.like(scene.features),
    }
    cam_states = [AdamState.like(camera_to_vector(c)) for c in cameras]
    trace = np.zeros(config.steps)
    events = []
    visibility = np.zeros(len(scene), dtype=np.int64)
    seen = np.zeros(len(observations), dtype=bool)
    order: list[int] = []

    def forward(s, cam, params):
        if renderer is not None:
            return renderer.forward(s, cam, params)
        return render_forward(s, cam, params, workers=config.workers)

    def backward(s, cam, params, buf, upstream):
        if renderer is not None:
            return renderer.backward(s, cam, params, buf, upstream)
        return render_backward(
            s, cam, params, buf, upstream,
            workers=config.workers,
            normalize=config.normalize_grads,
            gate=config.gate,
        )

    for step in range(config.steps):
        if not order:
            order = list(rng.permutation(len(observations)))
        idx = int(order.pop(0))
        seen[idx] = True
        cam = cameras[idx]
        params = BlendParams(
            gamma=config.gamma_at(step),
            epsilon=config.epsilon,
            tau=config.tau,
            top_k=config.top_k,
        )
        image, buffer, _ = forward(scene, cam, params)
        loss, upstream = photometric_loss(
            np.asarray(image.data, dtype=np.float64), observations[idx].image
        )
        reg_e, reg_dpos, reg_dopa = opacity_depth_regularizer(
            scene, cam, config.lambda_od
        )
        loss += reg_e
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        trace[step] = loss

        grads, cam_grads = backward(scene, cam, params, buffer, upstream)
        grads.d_position += reg_dpos
        grads.d_opacity += reg_dopa
        visibility += grads.pixel_count

        if config.lr_position > 0:
            scene.positions = adam_step(
                scene.positions, grads.d_position, states["position"],
                config.lr_position, config,
            )
        if config.lr_radius > 0:
            scene.radii = np.maximum(
                adam_step(scene.radii, grads.d_radius, states["radius"],
                          config.lr_radius, config),
                config.radius_min,
            )
        if config.lr_opacity > 0:
            scene.opacities = adam_step(
                scene.opacities, grads.d_opacity, states["opacity"],
                config.lr_opacity, config,
            )
        if config.lr_feature > 0:
            scene.features = adam_step(
                scene.features, grads.d_feature, states["feature"],
                config.lr_feature, config,
            )
        if config.lr_camera > 0:
            vec = camera_to_vector(cam)
            gvec = np.concatenate(
                [
                    cam_grads.d_translation,
                    cam_grads.d_rotation,
                    [cam_grads.d_focal, cam_grads.d_sensor_width],
                ]
            )
            new_vec = adam_step(vec, gvec, cam_states[idx], config.lr_camera, config)
            cameras[idx] = camera_from_vector(
                new_vec, cam.width, cam.height,
                near=cam.near, far=cam.far, mode=cam.mode,
            )

        if (
            config.prune_every
            and (step + 1) % config.prune_every == 0
            and seen.all()
        ):
            scene, keep = prune(scene, visibility, config)
            for name in ("position", "radius", "opacity", "feature"):
                states[name] = states[name].take(keep)
            visibility = np.zeros(len(scene), dtype=np.int64)
            seen[:] = False
            events.append((step, "prune", int(keep.sum())))

        if step in set(config.subdivide_at):
            scene = subdivide(scene, config)
            states = {
                "position": AdamState.like(scene.positions),
                "radius": AdamState.like(scene.radii),
                "opacity": AdamState.like(scene.opacities),
                "feature": AdamState.like(scene.features),
            }
            visibility = np.zeros(len(scene), dtype=np.int64)
            seen[:] = False
            events.append((step, "subdivide", len(scene)))

        if on_step is not None:
            on_step(step, loss, scene, cameras)

    return FitResult(scene=scene, cameras=cameras, trace=trace, events=events)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PSK1"
_CKPT_VERSION = 1


def save_checkpoint(path, scene: SphereScene, cameras, states=None, meta=None):
    """Single-file checkpoint: PSC1 scene blob + camera vectors + Adam state.

    Deterministic byte layout: magic, version u32, header-length u64, a JSON
    header describing the blobs, then the raw blobs in header order.
    """
    blobs: list[tuple[str, bytes, dict]] = []
    blobs.append(("scene", scene_to_bytes(scene), {"kind": "psc1"}))
    cam_meta = []
    for i, cam in enumerate(cameras):
        vec = camera_to_vector(cam).astype("<f8")
        blobs.append((f"camera_{i}", vec.tobytes(), {"kind": "f8", "shape": [vec.size]}))
        cam_meta.append(
            {
                "width": cam.width, "height": cam.height,
                "near": cam.near, "far": cam.far, "mode": cam.mode,
            }
        )
    if states:
        for name, st in states.items():
            for part in ("m", "v"):
                arr = np.ascontiguousarray(getattr(st, part), dtype="<f8")
                blobs.append(
                    (
                        f"adam.{name}.{part}", arr.tobytes(),
                        {"kind": "f8", "shape": list(arr.shape), "t": st.t},
                    )
                )
    header = {
        "version": _CKPT_VERSION,
        "cameras": cam_meta,
        "meta": meta or {},
        "blobs": [
            {"name": n, "nbytes": len(b), **info} for n, b, info in blobs
        ],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQ", _CKPT_VERSION, len(hdr)))
        f.write(hdr)
        for _, b, _info in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (scene, cameras, states, meta) from a PSK1 file."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, hdr_len = struct.unpack("<IQ", data[4:16])
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hdr_len].decode("utf-8"))
    offset = 16 + hdr_len
    raw = {}
    for blob in header["blobs"]:
        raw[blob["name"]] = (data[offset : offset + blob["nbytes"]], blob)
        offset += blob["nbytes"]
    scene = scene_from_bytes(raw["scene"][0])
    cameras = []
    for i, cmeta in enumerate(header["cameras"]):
        buf, blob = raw[f"camera_{i}"]
        vec = np.frombuffer(buf, dtype="<f8")
        cameras.append(
            camera_from_vector(
                vec, cmeta["width"], cmeta["height"],
                near=cmeta["near"], far=cmeta["far"], mode=cmeta["mode"],
            )
        )
    states = {}
    for name in ("position", "radius", "opacity", "feature"):
        key = f"adam.{name}.m"
        if key in raw:
            m_buf, m_blob = raw[key]
            v_buf, _ = raw[f"adam.{name}.v"]
            shape = tuple(m_blob["shape"])
            states[name] = AdamState(
                m=np.frombuffer(m_buf, dtype="<f8").reshape(shape).copy(),
                v=np.frombuffer(v_buf, dtype="<f8").reshape(shape).copy(),
                t=int(m_blob.get("t", 0)),
            )
    return scene, cameras, states, header.get("meta", {})
