"""Per-ray feature aggregation: soft depth-weighted blending of sphere hits.

A hit at NDC depth z with closeness c and clamped opacity o contributes the
un-normalized mass ``s = o * c * exp(o * z / gamma)``; the background always
contributes ``exp(epsilon / gamma)``.  Weights are the normalized masses.
Small gamma approaches a hard z-buffer, large gamma a translucent composite.

All evaluation is shift-stabilized (softmax trick): the raw exponentials
overflow 64-bit floats below roughly gamma = 1.5e-3, so the largest exponent
is factored out everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

GAMMA_MIN = 1e-5
GAMMA_MAX = 1.0


@dataclass
class BlendParams:
    """Blending configuration.

    gamma is clamped into [1e-5, 1]; values outside are numerically unstable
    (small) or wash out depth ordering entirely (large).
    """

    gamma: float = 0.1
    epsilon: float = 1e-2  # background offset in the exponent
    tau: float = 0.01  # minimum relative contribution for early stopping
    top_k: int = 5  # hits recorded per pixel for the backward pass

    def __post_init__(self):
        self.gamma = float(np.clip(self.gamma, GAMMA_MIN, GAMMA_MAX))
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if not (0.0 <= self.tau < 1.0):
            raise ValidationError("tau must be in [0, 1)")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")


@dataclass
class RayHit:
    """One ray-sphere intersection as seen by the blending function."""

    sphere_id: int
    z: float  # NDC depth in [0, 1]
    closeness: float  # 1 - normalized orthogonal distance, in [0, 1]
    opacity: float  # clamped to [0, 1]
    feature: np.ndarray = field(default=None)


def _hit_arrays(hits):
    z = np.array([h.z for h in hits], dtype=np.float64)
    c = np.array([h.closeness for h in hits], dtype=np.float64)
    o = np.clip([h.opacity for h in hits], 0.0, 1.0)
    return z, c, np.asarray(o, dtype=np.float64)


def blend_arrays(z, c, o, params: BlendParams):
    """Stabilized weights for parallel hit arrays.

    Returns (weights, w_bg, log_denominator); the log of the true denominator
    is what survives in the backward buffer.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    o = np.clip(np.asarray(o, dtype=np.float64), 0.0, 1.0)
    g = params.gamma
    # zero-mass hits must not drive the stabilization shift, or they underflow
    # every real term out of the denominator
    mass = o * c
    exps = np.where(mass > 0.0, o * z / g, -np.inf)
    bg_exp = params.epsilon / g
    m = max(bg_exp, exps.max()) if exps.size else bg_exp
    terms = mass * np.exp(exps - m)
    t_bg = np.exp(bg_exp - m)
    denom = t_bg + terms.sum()
    return terms / denom, t_bg / denom, m + np.log(denom)


def blend_weights(hits, params: BlendParams):
    """Blending weights for a list of RayHit, plus the background weight."""
    if not hits:
        return np.zeros(0), 1.0
    z, c, o = _hit_arrays(hits)
    w, w_bg, _ = blend_arrays(z, c, o, params)
    return w, float(w_bg)


def blend_feature(hits, params: BlendParams, background) -> np.ndarray:
    """Blend hit features against the background; order independent."""
    background = np.asarray(background, dtype=np.float64)
    if not hits:
        return background.copy()
    d = background.shape[0]
    for h in hits:
        if np.asarray(h.feature).shape != (d,):
            raise ValidationError(
                f"hit feature dim {np.asarray(h.feature).shape} != background ({d},)"
            )
    w, w_bg = blend_weights(hits, params)
    feats = np.stack([np.asarray(h.feature, dtype=np.float64) for h in hits])
    return w @ feats + w_bg * background


def stop_depth_bound(current_denominator: float, params: BlendParams) -> float:
    """Smallest NDC depth at which a best-case future hit reaches weight tau.

    A hypothetical sphere with o = c = 1 at depth z achieves weight
    exp(z/g) / (D + exp(z/g)); solving for weight >= tau gives
    z >= g * ln(tau * D / (1 - tau)).  Monotone nondecreasing in D.
    tau = 0 disables early stopping (returns -inf).
    """
    if params.tau == 0.0:
        return -np.inf
    return stop_depth_bound_log(np.log(current_denominator), params)


def stop_depth_bound_log(log_denominator, params: BlendParams):
    """stop_depth_bound on the log of the denominator (overflow-safe form)."""
    if params.tau == 0.0:
        return -np.inf if np.isscalar(log_denominator) else np.full_like(
            np.asarray(log_denominator, dtype=np.float64), -np.inf
        )
    t = params.tau
    return params.gamma * (np.log(t / (1.0 - t)) + log_denominator)


def blend_weight_partials(hits, params: BlendParams):
    """Full analytic Jacobians of the weights w.r.t. hit fields and gamma.

    Returns a dict with 'dz', 'dc', 'do' of shape (n, n) where entry [i, j]
    is d w_i / d x_j, and 'dgamma' of shape (n,).  Reference implementation
    for property tests; the production backward uses the fused form.
    """
    z, c, o = _hit_arrays(hits)
    g = params.gamma
    w, w_bg, log_d = blend_arrays(z, c, o, params)
    n = z.size
    # d s_j / d x_j, divided by the denominator for stability
    exp_shift = np.exp(o * z / g - log_d)
    sz = w * o / g  # (s_j * o_j / gamma) / D
    sc = o * exp_shift
    so = c * exp_shift * (1.0 + o * z / g)
    eye = np.eye(n)
    dz = (eye - w[:, None]) * sz[None, :]
    dc = (eye - w[:, None]) * sc[None, :]
    do = (eye - w[:, None]) * so[None, :]
    mean_exponent = (w * o * z).sum() + w_bg * params.epsilon
    dgamma = w / g**2 * (mean_exponent - o * z)
    return {"dz": dz, "dc": dc, "do": do, "dgamma": dgamma}
