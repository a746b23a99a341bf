"""Sphere scene container, validation, serialization, and point-cloud import.

A scene is a flat set of spheres; each sphere carries a world-space position,
a radius, an opacity, and a d-dimensional feature payload (colors or latent
channels).  Storage is column-oriented numpy arrays; the renderer converts to
sorted draw records internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError

RADIUS_MIN = 1e-6

_MAGIC = b"PSC1"


@dataclass
class Sphere:
    """A single sphere record.

    Opacity is stored unconstrained; the renderer clamps it to [0, 1] so
    optimizers can take free gradient steps.
    """

    position: np.ndarray
    radius: float
    opacity: float
    feature: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.feature = np.atleast_1d(np.asarray(self.feature, dtype=np.float64))
        self.radius = float(self.radius)
        self.opacity = float(self.opacity)


@dataclass
class SphereScene:
    """Column-oriented storage for M spheres with a shared feature dimension."""

    feature_dim: int
    background: np.ndarray
    positions: np.ndarray = field(default=None)  # (M, 3)
    radii: np.ndarray = field(default=None)  # (M,)
    opacities: np.ndarray = field(default=None)  # (M,)
    features: np.ndarray = field(default=None)  # (M, d)

    def __post_init__(self):
        d = self.feature_dim
        if self.positions is None:
            self.positions = np.zeros((0, 3))
        if self.radii is None:
            self.radii = np.zeros(0)
        if self.opacities is None:
            self.opacities = np.zeros(0)
        if self.features is None:
            self.features = np.zeros((0, d))
        self.background = np.asarray(self.background, dtype=np.float64).reshape(d)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_spheres(self) -> int:
        return self.positions.shape[0]

    def sphere(self, i: int) -> Sphere:
        return Sphere(
            position=self.positions[i].copy(),
            radius=float(self.radii[i]),
            opacity=float(self.opacities[i]),
            feature=self.features[i].copy(),
        )

    def copy(self) -> "SphereScene":
        return SphereScene(
            feature_dim=self.feature_dim,
            background=self.background.copy(),
            positions=self.positions.copy(),
            radii=self.radii.copy(),
            opacities=self.opacities.copy(),
            features=self.features.copy(),
        )

    def validate(self) -> None:
        """Raise ValidationError on any NaN/Inf field or non-positive radius."""
        m = len(self)
        if self.features.shape != (m, self.feature_dim):
            raise ValidationError(
                f"feature array shape {self.features.shape} does not match "
                f"(M={m}, d={self.feature_dim})"
            )
        if not np.all(np.isfinite(self.background)):
            raise ValidationError("background feature contains non-finite values")
        for name, arr in (
            ("position", self.positions),
            ("radius", self.radii),
            ("opacity", self.opacities),
            ("feature", self.features),
        ):
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise ValidationError(f"non-finite {name} at sphere index {idx}")
        bad_r = self.radii <= 0
        if bad_r.any():
            idx = int(np.argmax(bad_r))
            raise ValidationError(f"non-positive radius at sphere index {idx}")


def new_scene(feature_dim: int, background_feature) -> SphereScene:
    """Create an empty scene with the given channel count and background."""
    if int(feature_dim) < 1:
        raise ConfigurationError(f"feature_dim must be >= 1, got {feature_dim}")
    bg = np.atleast_1d(np.asarray(background_feature, dtype=np.float64))
    if bg.shape != (int(feature_dim),):
        raise ConfigurationError(
            f"background feature has length {bg.size}, expected {feature_dim}"
        )
    return SphereScene(feature_dim=int(feature_dim), background=bg)


def add_spheres(scene: SphereScene, spheres: list[Sphere]) -> SphereScene:
    """Append spheres to a scene, validating each record.

    Input order is preserved in storage.  Returns the mutated scene for
    chaining; the update happens in place.
    """
    if not spheres:
        return scene
    pos = np.stack([s.position for s in spheres])
    rad = np.array([s.radius for s in spheres], dtype=np.float64)
    opa = np.array([s.opacity for s in spheres], dtype=np.float64)
    feats = np.stack([s.feature for s in spheres])
    return add_sphere_arrays(scene, pos, rad, opa, feats)


def add_sphere_arrays(scene, positions, radii, opacities, features) -> SphereScene:
    """Bulk append; same validation as add_spheres."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = positions.shape[0]
    if not (radii.shape[0] == opacities.shape[0] == features.shape[0] == n):
        raise ValidationError("sphere column arrays have mismatched lengths")
    if features.shape[1] != scene.feature_dim:
        raise ValidationError(
            f"feature dim {features.shape[1]} does not match scene d={scene.feature_dim}"
        )
    for name, arr in (
        ("position", positions),
        ("radius", radii),
        ("opacity", opacities),
        ("feature", features),
    ):
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad)[0][0])
            raise ValidationError(f"non-finite {name} at input index {idx}")
    bad_r = radii <= 0
    if bad_r.any():
        raise ValidationError(
            f"non-positive radius at input index {int(np.argmax(bad_r))}"
        )
    scene.positions = np.concatenate([scene.positions, positions])
    scene.radii = np.concatenate([scene.radii, radii])
    scene.opacities = np.concatenate([scene.opacities, opacities])
    scene.features = np.concatenate([scene.features, features])
    return scene


def scene_to_bytes(scene: SphereScene) -> bytes:
    """Encode the PSC1 little-endian binary format.

    Layout: magic "PSC1", feature_dim u32, sphere count u64, background f32*d,
    then per-sphere records (position*3, radius, opacity, feature*d) as f32.
    Values are stored at 32-bit precision; round-trips are bit-exact for
    float32-representable scenes.
    """
    scene.validate()
    m, d = len(scene), scene.feature_dim
    rec = np.empty((m, 5 + d), dtype="<f4")
    rec[:, 0:3] = scene.positions
    rec[:, 3] = scene.radii
    rec[:, 4] = scene.opacities
    rec[:, 5:] = scene.features
    return b"".join(
        [
            _MAGIC,
            struct.pack("<IQ", d, m),
            scene.background.astype("<f4").tobytes(),
            rec.tobytes(),
        ]
    )


def scene_from_bytes(blob: bytes) -> SphereScene:
    """Decode a PSC1 byte string."""
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < 16:
        raise FormatError("truncated header")
    d, m = struct.unpack("<IQ", blob[4:16])
    if d < 1:
        raise FormatError(f"invalid feature_dim {d}")
    need = 16 + 4 * d + 4 * m * (5 + d)
    if len(blob) < need:
        raise FormatError(f"truncated scene data: {len(blob)} bytes, need {need}")
    bg = np.frombuffer(blob[16 : 16 + 4 * d], dtype="<f4").astype(np.float64)
    rec = (
        np.frombuffer(blob[16 + 4 * d : need], dtype="<f4")
        .reshape(m, 5 + d)
        .astype(np.float64)
    )
    scene = SphereScene(feature_dim=int(d), background=bg)
    scene.positions = np.ascontiguousarray(rec[:, 0:3])
    scene.radii = np.ascontiguousarray(rec[:, 3])
    scene.opacities = np.ascontiguousarray(rec[:, 4])
    scene.features = np.ascontiguousarray(rec[:, 5:])
    return scene


def save_scene(scene: SphereScene, path) -> None:
    """Write the PSC1 binary format (see scene_to_bytes)."""
    with open(path, "wb") as f:
        f.write(scene_to_bytes(scene))


def load_scene(path) -> SphereScene:
    """Read a PSC1 file written by save_scene."""
    with open(path, "rb") as f:
        return scene_from_bytes(f.read())


def import_point_cloud(path, default_radius: float, default_opacity: float) -> SphereScene:
    """Build a scene from an ASCII PLY point cloud.

    One sphere per point.  red/green/blue properties (uchar 0..255 or float)
    map to a 3-channel feature; without color every feature equals the black
    background.  Radius and opacity take the provided defaults.
    """
    if default_radius <= 0:
        raise ValidationError("default_radius must be positive")
    with open(path, "r", encoding="ascii", errors="replace") as f:
        lines = f.readlines()

    def fail(lineno, msg):
        raise FormatError(f"{path}:{lineno + 1}: {msg}")

    if not lines or lines[0].strip() != "ply":
        fail(0, "not a PLY file (missing 'ply' header)")
    n_vertices = None
    props: list[tuple[str, str]] = []  # (type, name) for the vertex element
    in_vertex_element = False
    header_end = None
    for i, raw in enumerate(lines[1:], start=1):
        tok = raw.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                fail(i, f"unsupported PLY format {' '.join(tok[1:])!r}; only ascii")
        elif tok[0] == "element":
            in_vertex_element = tok[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertices = int(tok[2])
                except (IndexError, ValueError):
                    fail(i, "malformed vertex element line")
        elif tok[0] == "property" and in_vertex_element:
            if len(tok) < 3:
                fail(i, "malformed property line")
            props.append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None:
        fail(len(lines) - 1, "missing end_header")
    if n_vertices is None:
        fail(header_end, "missing vertex element")
    names = [name for _, name in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            fail(header_end, f"vertex element lacks '{axis}' coordinate")
    has_color = all(c in names for c in ("red", "green", "blue"))
    col = {name: names.index(name) for name in names}
    color_is_byte = has_color and props[col["red"]][0] in ("uchar", "uint8", "char")

    scene = new_scene(3, [0.0, 0.0, 0.0])
    pts = np.zeros((n_vertices, 3))
    feats = np.tile(scene.background, (n_vertices, 1))
    row = 0
    for i in range(header_end + 1, len(lines)):
        tok = lines[i].split()
        if not tok:
            continue
        if row >= n_vertices:
            break
        if len(tok) < len(props):
            fail(i, f"expected {len(props)} values, got {len(tok)}")
        try:
            vals = [float(t) for t in tok[: len(props)]]
        except ValueError:
            fail(i, "non-numeric vertex value")
        pts[row] = (vals[col["x"]], vals[col["y"]], vals[col["z"]])
        if has_color:
            rgb = np.array([vals[col["red"]], vals[col["green"]], vals[col["blue"]]])
            feats[row] = rgb / 255.0 if color_is_byte else rgb
        row += 1
    if row < n_vertices:
        fail(len(lines) - 1, f"expected {n_vertices} vertices, file ends after {row}")
    add_sphere_arrays(
        scene,
        pts,
        np.full(n_vertices, float(default_radius)),
        np.full(n_vertices, float(default_opacity)),
        feats,
    )
    return scene
