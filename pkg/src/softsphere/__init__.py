"""softsphere: differentiable sphere-splatting renderer.

Forward-renders scenes of feature-carrying spheres with soft depth blending,
computes analytic gradients for every sphere and camera parameter, and fits
scenes to posed images with Adam.
"""

from .blend import BlendParams, RayHit, blend_feature, blend_weights, stop_depth_bound
from .camera import (
    Camera,
    Ray,
    camera_from_vector,
    camera_to_vector,
    ndc_depth,
    pixel_ray,
    project_point,
    ray_through,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    FormatError,
    SoftSphereError,
    ValidationError,
)
from .grad import (
    CameraGradients,
    SceneGradients,
    accumulate_and_normalize,
    gate_small_spheres,
    render_backward,
)
from .optim import (
    AdamState,
    FitConfig,
    FitResult,
    Observation,
    adam_step,
    fit,
    load_checkpoint,
    opacity_depth_regularizer,
    photometric_loss,
    prune,
    save_checkpoint,
    subdivide,
)
from .raster import (
    BackwardBuffer,
    FeatureImage,
    RenderStats,
    compute_bounds,
    draw_pixel,
    gather_tile_candidates,
    render_forward,
    sort_draw_records,
)
from .scene import (
    Sphere,
    SphereScene,
    add_spheres,
    import_point_cloud,
    load_scene,
    new_scene,
    save_scene,
)
from .shade import (
    DirectionalLight,
    LinearShader,
    shade_diffuse,
    shade_identity,
    shade_linear,
)
from .testkit import OracleConfig, fd_gradient, oracle_render

__version__ = "0.1.0"
