"""Command-line entry points: render, fit, benchmark, convert.

Exit codes: 0 success, 1 numerical divergence, 2 usage/format/I-O errors.
Run configuration comes from an optional key = value file plus flag
overrides; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .blend import BlendParams
from .camera import PINHOLE, Camera, camera_from_vector
from .errors import (
    ConfigurationError,
    DivergenceError,
    FormatError,
    SoftSphereError,
    ValidationError,
)
from .grad import render_backward
from .imageio import read_png, write_png
from .optim import FitConfig, Observation, fit, save_checkpoint
from .raster import render_forward
from .scene import (
    SphereScene,
    add_sphere_arrays,
    import_point_cloud,
    load_scene,
    new_scene,
    save_scene,
)
from .testkit import oracle_render


@dataclass
class RunConfig:
    """All tunables reachable from the CLI and config files."""

    gamma: float = 0.1
    epsilon: float = 1e-2
    tau: float = 0.01
    top_k: int = 5
    min_depth: float = 0.1
    max_depth: float = 45.0
    workers: int = 1
    precision: int = 64
    seed: int = 0
    tile_size: int = 16
    steps: int = 500
    lr_position: float = 1e-3
    lr_radius: float = 1e-3
    lr_opacity: float = 1e-2
    lr_feature: float = 1e-2
    lr_camera: float = 0.0
    gamma_start: float = 0.1
    gamma_end: float = 1e-3
    lambda_od: float = 0.0
    prune_every: int = 0
    prune_opacity_min: float = 0.05
    prune_background_dist: float = 0.0
    subdivide_at: str = ""  # comma-separated step indices
    subdivide_scale: float = float(np.sqrt(2.0))

    def apply_file(self, path):
        """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
        known = {f.name: f.type for f in fields(self)}
        text = Path(path).read_text()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            current = getattr(self, key)
            try:
                if isinstance(current, bool):
                    setattr(self, key, value.lower() in ("1", "true", "yes"))
                elif isinstance(current, int):
                    setattr(self, key, int(value))
                elif isinstance(current, float):
                    setattr(self, key, float(value))
                else:
                    setattr(self, key, value)
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {exc}")

    def blend_params(self) -> BlendParams:
        return BlendParams(
            gamma=self.gamma, epsilon=self.epsilon, tau=self.tau, top_k=self.top_k
        )

    def dtype(self):
        if self.precision == 32:
            return np.float32
        if self.precision == 64:
            return np.float64
        raise ConfigurationError("precision must be 32 or 64")

    def fit_config(self) -> FitConfig:
        sub = tuple(int(s) for s in self.subdivide_at.split(",") if s.strip())
        return FitConfig(
            lr_position=self.lr_position,
            lr_radius=self.lr_radius,
            lr_opacity=self.lr_opacity,
            lr_feature=self.lr_feature,
            lr_camera=self.lr_camera,
            steps=self.steps,
            gamma_start=self.gamma_start,
            gamma_end=self.gamma_end,
            epsilon=self.epsilon,
            tau=self.tau,
            top_k=self.top_k,
            lambda_od=self.lambda_od,
            prune_every=self.prune_every,
            prune_opacity_min=self.prune_opacity_min,
            prune_background_dist=self.prune_background_dist,
            subdivide_at=sub,
            subdivide_scale=self.subdivide_scale,
            seed=self.seed,
            workers=self.workers,
        )


def _parse_camera_values(text: str) -> np.ndarray:
    vals = [float(t) for t in text.replace(",", " ").split()]
    return np.array(vals)


def _load_pose_file(path) -> list[np.ndarray]:
    poses = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vec = _parse_camera_values(line)
        if vec.size not in (8, 11):
            raise FormatError(f"{path}:{lineno}: camera vector needs 8 or 11 values")
        poses.append(vec)
    return poses


def _camera_from_args(cfg: RunConfig, vec, width, height, mode) -> Camera:
    return camera_from_vector(
        vec, width, height, near=cfg.min_depth, far=cfg.max_depth, mode=mode
    )


def _image_from_feature(data: np.ndarray, channels: str | None):
    d = data.shape[2]
    if channels:
        idx = [int(c) for c in channels.split(",")]
        if len(idx) not in (1, 3) or any(i < 0 or i >= d for i in idx):
            raise ConfigurationError(f"--channels must select 1 or 3 of 0..{d - 1}")
        data = data[:, :, idx]
        d = len(idx)
    if d == 1:
        return data[:, :, 0]
    if d == 3:
        return data
    raise ConfigurationError(
        f"cannot write d={d} channels directly; use --channels to select 1 or 3"
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_render(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    cam = _camera_from_args(
        cfg, _parse_camera_values(args.camera), args.width, args.height, args.mode
    )
    t0 = time.perf_counter()
    image, _, stats = render_forward(
        scene, cam, cfg.blend_params(),
        workers=cfg.workers, dtype=cfg.dtype(), tile_size=cfg.tile_size,
        store_buffer=False,
    )
    wall = time.perf_counter() - t0
    write_png(args.out, _image_from_feature(image.data, args.channels), args.bit_depth)
    n_pix = cam.width * cam.height
    print(f"spheres_on_sensor {stats.spheres_on_sensor}/{stats.spheres_total}")
    print(f"candidates_tested {stats.candidates_tested}")
    print(f"hits_blended {stats.hits_blended}")
    print(f"early_stop_ratio {stats.early_stop_ratio(n_pix):.4f}")
    print(f"wall_time_s {wall:.4f}")
    return 0


def cmd_convert(args, cfg: RunConfig) -> int:
    scene = import_point_cloud(args.ply, args.radius, args.opacity)
    save_scene(scene, args.out)
    print(f"wrote {args.out} with {len(scene)} spheres")
    return 0


def _volume_fill(count: int, camera: Camera, rng, target_px: float = 4.0) -> SphereScene:
    """Uniformly seed the camera frustum; radius grows with depth so each
    sphere keeps a roughly constant projected footprint."""
    lo = camera.near + 0.05 * (camera.far - camera.near)
    hi = camera.far - 0.1 * (camera.far - camera.near)
    depth = rng.uniform(lo, hi, count)
    if camera.mode == PINHOLE:
        half_w = depth * (camera.sensor_width / 2.0) / camera.focal_length
        half_h = depth * (camera.sensor_height / 2.0) / camera.focal_length
        radius = target_px * depth * camera.pixel_size / camera.focal_length
    else:
        half_w = np.full(count, camera.sensor_width / 2.0)
        half_h = np.full(count, camera.sensor_height / 2.0)
        radius = np.full(count, target_px * camera.pixel_size)
    x = rng.uniform(-1, 1, count) * half_w
    y = rng.uniform(-1, 1, count) * half_h
    pts_cam = np.column_stack([x, y, depth])
    pts = camera.camera_to_world(pts_cam)
    scene = new_scene(3, [0.0, 0.0, 0.0])
    add_sphere_arrays(
        scene, pts, radius, np.full(count, 0.9), rng.uniform(0.2, 0.8, (count, 3))
    )
    return scene


def _init_scene(spec: str, cameras, cfg: RunConfig, rng, feature_dim: int) -> SphereScene:
    kind, _, arg = spec.partition(":")
    if kind == "scene":
        return load_scene(arg)
    if kind == "ply":
        return import_point_cloud(arg, default_radius=0.05, default_opacity=0.9)
    if kind == "volume":
        scene = _volume_fill(int(arg), cameras[0], rng)
        if feature_dim != 3:
            feats = np.full((len(scene), feature_dim), 0.5)
            return SphereScene(
                feature_dim=feature_dim,
                background=np.zeros(feature_dim),
                positions=scene.positions,
                radii=scene.radii,
                opacities=scene.opacities,
                features=feats,
            )
        return scene
    raise ConfigurationError(
        f"--init must be scene:<path>, ply:<path>, or volume:<count>, got {spec!r}"
    )


def cmd_fit(args, cfg: RunConfig) -> int:
    image_paths = sorted(Path(args.images).glob("*.png"))
    if not image_paths:
        raise ValidationError(f"no .png images found in {args.images}")
    poses = _load_pose_file(args.cameras)
    if len(poses) != len(image_paths):
        raise ValidationError(
            f"{len(image_paths)} images but {len(poses)} camera vectors"
        )
    images = []
    for p in image_paths:
        arr = read_png(p)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(arr)
    h, w, d = images[0].shape
    observations = [
        Observation(
            image=img,
            camera=_camera_from_args(cfg, vec, w, h, args.mode),
        )
        for img, vec in zip(images, poses)
    ]
    rng = np.random.default_rng(cfg.seed)
    scene = _init_scene(args.init, [o.camera for o in observations], cfg, rng, d)
    if scene.feature_dim != d:
        raise ValidationError(
            f"init scene has d={scene.feature_dim}, images have d={d}"
        )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_rows = []

    def on_step(step, loss, cur_scene, cams):
        loss_rows.append((step, loss))
        if args.preview_every and (step + 1) % args.preview_every == 0:
            img, _, _ = render_forward(
                cur_scene, cams[0], cfg.blend_params(), workers=cfg.workers,
                store_buffer=False,
            )
            write_png(
                out_dir / f"preview_{step + 1:05d}.png",
                _image_from_feature(img.data, None),
            )

    result = fit(scene, observations, cfg.fit_config(), on_step=on_step)

    with open(out_dir / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows(loss_rows)
    save_scene(result.scene, out_dir / "scene.psc")
    save_checkpoint(
        out_dir / "checkpoint.psk",
        result.scene,
        result.cameras,
        meta={"steps": cfg.steps, "seed": cfg.seed},
    )
    print(f"final_loss {result.trace[-1]:.6f}")
    print(f"spheres {len(result.scene)}")
    return 0


def _benchmark_scene(count: int, camera: Camera, profile: str, rng) -> SphereScene:
    scene = new_scene(3, [0.0, 0.0, 0.0])
    if profile == "occluded":
        # opaque wall near the camera, then `count` hidden spheres behind it
        n_wall = 256
        side = int(np.ceil(np.sqrt(n_wall)))
        depth_w = 5.0
        half = depth_w * (camera.sensor_width / 2.0) / camera.focal_length
        gx, gy = np.meshgrid(
            np.linspace(-half, half, side), np.linspace(-half, half, side)
        )
        wall = np.column_stack(
            [gx.ravel(), gy.ravel(), np.full(side * side, depth_w)]
        )
        r_wall = np.full(side * side, 2.2 * 2 * half / side)
        add_sphere_arrays(
            scene, camera.camera_to_world(wall), r_wall,
            np.ones(side * side), rng.uniform(0.2, 1.0, (side * side, 3)),
        )
        depth = rng.uniform(30.0, 43.0, count)
    elif profile == "uniform":
        depth = rng.uniform(6.0, 43.0, count)
    else:
        raise ConfigurationError(f"unknown profile {profile!r}")
    half_w = depth * (camera.sensor_width / 2.0) / camera.focal_length
    x = rng.uniform(-1, 1, count) * half_w
    y = rng.uniform(-1, 1, count) * half_w
    pts = np.column_stack([x, y, depth])
    radius = 3.0 * depth * camera.pixel_size / camera.focal_length
    add_sphere_arrays(
        scene, camera.camera_to_world(pts), radius,
        rng.uniform(0.5, 1.0, count), rng.uniform(0, 1, (count, 3)),
    )
    return scene


def cmd_benchmark(args, cfg: RunConfig) -> int:
    if args.repeats < 1:
        raise ConfigurationError("--repeats must be >= 1")
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    if not counts:
        raise ConfigurationError("--counts must list at least one sphere count")
    rng = np.random.default_rng(cfg.seed)
    cam = _camera_from_args(
        cfg,
        np.array([0, 0, 0, 0, 0, 0, 5.0, 2.0]),
        args.width, args.height, PINHOLE,
    )
    params = cfg.blend_params()
    rows = []
    for count in counts:
        scene = _benchmark_scene(count, cam, args.profile, rng)
        fwd, bwd, oracle_t = [], [], []
        stats = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            image, buffer, stats = render_forward(
                scene, cam, params, workers=cfg.workers, dtype=cfg.dtype(),
                tile_size=cfg.tile_size,
            )
            fwd.append(time.perf_counter() - t0)
            upstream = np.sign(image.data - 0.5)
            t0 = time.perf_counter()
            render_backward(
                scene, cam, params, buffer, upstream, workers=cfg.workers
            )
            bwd.append(time.perf_counter() - t0)
            if count <= args.oracle_max:
                t0 = time.perf_counter()
                oracle_render(scene, cam, params)
                oracle_t.append(time.perf_counter() - t0)
        n_pix = cam.width * cam.height
        rows.append(
            {
                "count": count,
                "forward_ms_median": 1e3 * float(np.median(fwd)),
                "forward_ms_std": 1e3 * float(np.std(fwd)),
                "backward_ms_median": 1e3 * float(np.median(bwd)),
                "backward_ms_std": 1e3 * float(np.std(bwd)),
                "oracle_ms_median": 1e3 * float(np.median(oracle_t)) if oracle_t else "",
                "candidates_tested": stats.candidates_tested,
                "hits_blended": stats.hits_blended,
                "early_stop_ratio": round(stats.early_stop_ratio(n_pix), 4),
            }
        )
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--min-depth", dest="min_depth", type=float)
    p.add_argument("--max-depth", dest="max_depth", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-size", dest="tile_size", type=int)


_FIT_KEYS = (
    "steps", "lr_position", "lr_radius", "lr_opacity", "lr_feature", "lr_camera",
    "gamma_start", "gamma_end", "lambda_od", "prune_every", "prune_opacity_min",
    "prune_background_dist", "subdivide_at", "subdivide_scale",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softsphere",
        description="Differentiable sphere-splatting renderer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene file to a PNG")
    p.add_argument("scene")
    p.add_argument("--camera", required=True, help="8 or 11 values: t R f s")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--mode", choices=("pinhole", "orthographic"), default="pinhole")
    p.add_argument("--channels", help="comma channel selection for d not in (1, 3)")
    p.add_argument("--bit-depth", dest="bit_depth", type=int, default=8)
    p.add_argument("-o", "--out", default="render.png")
    _add_common(p)

    p = sub.add_parser("fit", help="fit a sphere scene to posed images")
    p.add_argument("--images", required=True, help="directory of target PNGs")
    p.add_argument("--cameras", required=True, help="file with one camera vector per line")
    p.add_argument("--init", required=True, help="scene:<psc>, ply:<ply>, or volume:<count>")
    p.add_argument("--mode", choices=("pinhole", "orthographic"), default="pinhole")
    p.add_argument("--out", default="fit_out")
    p.add_argument("--preview-every", dest="preview_every", type=int, default=0)
    _add_common(p)
    for key in _FIT_KEYS:
        flag = "--" + key.replace("_", "-")
        if key == "subdivide_at":
            p.add_argument(flag, dest=key, type=str)
        elif key in ("steps", "prune_every"):
            p.add_argument(flag, dest=key, type=int)
        else:
            p.add_argument(flag, dest=key, type=float)

    p = sub.add_parser("benchmark", help="timing table over sphere counts")
    p.add_argument("--counts", required=True, help="comma-separated sphere counts")
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--height", type=int, default=1000)
    p.add_argument("--profile", choices=("uniform", "occluded"), default="uniform")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--oracle-max", dest="oracle_max", type=int, default=20000)
    p.add_argument("--out", default="")
    _add_common(p)

    p = sub.add_parser("convert", help="ASCII PLY point cloud -> PSC1 scene")
    p.add_argument("ply")
    p.add_argument("out")
    p.add_argument("--radius", type=float, default=0.05)
    p.add_argument("--opacity", type=float, default=0.9)
    _add_common(p)

    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.apply_file(args.config)
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        np.random.default_rng(cfg.seed)
        handler = {
            "render": cmd_render,
            "fit": cmd_fit,
            "benchmark": cmd_benchmark,
            "convert": cmd_convert,
        }[args.command]
        return handler(args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SoftSphereError, FileNotFoundError, IsADirectoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
