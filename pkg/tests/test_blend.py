import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softsphere.blend import (
    BlendParams,
    RayHit,
    blend_arrays,
    blend_feature,
    blend_weight_partials,
    blend_weights,
    stop_depth_bound,
)
from softsphere.errors import ValidationError


def hits_from(z, c, o, d=3, rng=None):
    rng = rng or np.random.default_rng(0)
    return [
        RayHit(sphere_id=i, z=zi, closeness=ci, opacity=oi, feature=rng.uniform(0, 1, d))
        for i, (zi, ci, oi) in enumerate(zip(z, c, o))
    ]


def literal_weights(z, c, o, gamma, eps):
    """The blending formula evaluated verbatim (test-local oracle)."""
    terms = [oi * ci * math.exp(oi * zi / gamma) for zi, ci, oi in zip(z, c, o)]
    denom = math.exp(eps / gamma) + sum(terms)
    return [t / denom for t in terms], math.exp(eps / gamma) / denom


class TestBlendWeights:
    def test_empty_is_background_only(self):
        w, w_bg = blend_weights([], BlendParams())
        assert w.size == 0 and w_bg == 1.0

    def test_transparent_sphere(self):
        w, w_bg = blend_weights(hits_from([0.5], [1.0], [0.0]), BlendParams(gamma=0.1))
        assert w[0] == 0.0 and w_bg == 1.0

    def test_two_hit_values(self):
        params = BlendParams(gamma=0.1, epsilon=0.01)
        z, c, o = [0.8, 0.6], [1.0, 1.0], [1.0, 1.0]
        w, w_bg = blend_weights(hits_from(z, c, o), params)
        ref_w, ref_bg = literal_weights(z, c, o, 0.1, 0.01)
        assert np.allclose(w, ref_w, rtol=1e-12)
        assert abs(w_bg - ref_bg) < 1e-12
        # frozen magnitudes
        assert abs(w[0] - 0.8805) < 5e-4
        assert abs(w[1] - 0.1192) < 5e-4
        assert abs(w_bg - 3.3e-4) < 5e-5

    def test_no_overflow_at_hard_gamma(self):
        params = BlendParams(gamma=1e-5)
        w, w_bg = blend_weights(hits_from([1.0, 0.9], [1.0, 1.0], [1.0, 1.0]), params)
        assert np.isfinite(w).all() and np.isfinite(w_bg)
        assert abs(w.sum() + w_bg - 1.0) < 1e-12


class TestBlendFeature:
    def test_no_hits_returns_background(self):
        bg = np.array([0.3, 0.6, 0.9])
        out = blend_feature([], BlendParams(), bg)
        assert np.array_equal(out, bg)

    def test_single_opaque_hard_hit(self):
        # hard gamma, z well above epsilon: sphere feature wins outright
        params = BlendParams(gamma=1e-5, epsilon=0.01)
        hit = RayHit(0, z=0.5, closeness=1.0, opacity=1.0, feature=np.array([0.2, 0.4, 0.8]))
        out = blend_feature([hit], params, np.zeros(3))
        assert np.abs(out - hit.feature).max() < 1e-6

    def test_duplicated_sphere_equals_single_feature(self):
        params = BlendParams(gamma=0.3)
        f = np.array([0.5, 0.1, 0.7])
        twice = [
            RayHit(0, 0.6, 0.8, 0.9, f.copy()),
            RayHit(1, 0.6, 0.8, 0.9, f.copy()),
        ]
        out = blend_feature(twice, params, np.zeros(3))
        once = blend_feature(twice[:1], params, np.zeros(3))
        # equal features: any convex weighting of the pair lands between
        w2, bg2 = blend_weights(twice, params)
        expect = w2.sum() * f
        assert np.allclose(out, expect + bg2 * 0.0, atol=1e-12)
        assert np.all(out >= np.minimum(once, expect) - 1e-12)

    def test_feature_dim_mismatch(self):
        with pytest.raises(ValidationError):
            blend_feature(
                [RayHit(0, 0.5, 1.0, 1.0, np.zeros(2))], BlendParams(), np.zeros(3)
            )


class TestStopDepthBound:
    def test_tau_zero_never_stops(self):
        assert stop_depth_bound(10.0, BlendParams(tau=0.0)) == -np.inf

    def _binary_search(self, denom, params, lo=-50.0, hi=1.0):
        # smallest z where a best-case hit reaches weight tau (test-local oracle)
        def weight(z):
            e = math.exp(z / params.gamma)
            return e / (denom + e)

        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if weight(mid) >= params.tau:
                hi = mid
            else:
                lo = mid
        return hi

    def test_matches_binary_search(self):
        params = BlendParams(gamma=0.1, tau=0.01)
        denom = math.exp(10.0)
        z = stop_depth_bound(denom, params)
        assert abs(z - 0.5404879) < 1e-6
        assert abs(z - self._binary_search(denom, params)) < 1e-6

    def test_background_only_no_stopping(self):
        params = BlendParams(gamma=1.0, epsilon=0.01, tau=0.01)
        z = stop_depth_bound(math.exp(0.01), params)
        assert abs(z - (-4.58512)) < 1e-4
        assert z < 0.0  # below any achievable depth: no stopping yet

    def test_monotone_in_denominator(self):
        params = BlendParams(gamma=0.2, tau=0.05)
        zs = [stop_depth_bound(d, params) for d in (1.1, 5.0, 100.0, 1e8)]
        assert all(a <= b for a, b in zip(zs, zs[1:]))


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

unit = st.floats(0.0, 1.0, allow_nan=False)
hit_lists = st.lists(st.tuples(unit, unit, unit), min_size=0, max_size=16)
gammas = st.floats(1e-5, 1.0, allow_nan=False)


@given(hit_lists, gammas)
@settings(max_examples=200, deadline=None)
def test_normalization_property(hits, gamma):
    params = BlendParams(gamma=gamma)
    z, c, o = (np.array([h[i] for h in hits]) for i in range(3))
    w, w_bg, _ = blend_arrays(z, c, o, params)
    assert abs(w.sum() + w_bg - 1.0) < 1e-12
    assert np.all((w >= 0) & (w <= 1)) and 0 <= w_bg <= 1


@given(hit_lists, gammas, st.randoms())
@settings(max_examples=150, deadline=None)
def test_order_invariance(hits, gamma, pyrandom):
    params = BlendParams(gamma=gamma)
    rng = np.random.default_rng(pyrandom.randrange(2**32))
    rhits = hits_from(*(list(t) for t in zip(*hits)) if hits else ([], [], []), rng=rng)
    perm = list(range(len(rhits)))
    pyrandom.shuffle(perm)
    a = blend_feature(rhits, params, np.array([0.2, 0.5, 0.8]))
    b = blend_feature([rhits[i] for i in perm], params, np.array([0.2, 0.5, 0.8]))
    assert np.abs(a - b).max() < 1e-6


@given(
    st.lists(st.tuples(unit, st.floats(0.05, 1.0), st.floats(0.05, 1.0)), min_size=1, max_size=8),
    st.floats(0.01, 1.0),
    st.integers(0, 7),
)
@settings(max_examples=150, deadline=None)
def test_monotonicity_in_z_and_c(hits, gamma, which):
    params = BlendParams(gamma=gamma)
    idx = which % len(hits)
    z, c, o = (np.array([h[i] for h in hits]) for i in range(3))
    w0, _, _ = blend_arrays(z, c, o, params)
    dz = (1.0 - z[idx]) * 0.5
    z2 = z.copy()
    z2[idx] += dz
    w1, _, _ = blend_arrays(z2, c, o, params)
    assert w1[idx] >= w0[idx] - 1e-12
    c2 = c.copy()
    c2[idx] = min(1.0, c[idx] * 1.5)
    w2, _, _ = blend_arrays(z, c2, o, params)
    assert w2[idx] >= w0[idx] - 1e-12


@given(
    st.lists(st.tuples(st.floats(0.1, 1.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0)),
             min_size=1, max_size=8),
    st.integers(0, 7),
)
@settings(max_examples=100, deadline=None)
def test_monotonicity_in_opacity_above_epsilon(hits, which):
    # for z >= epsilon, more opacity cannot lower the weight
    params = BlendParams(gamma=0.2, epsilon=0.01)
    idx = which % len(hits)
    z, c, o = (np.array([h[i] for h in hits]) for i in range(3))
    w0, _, _ = blend_arrays(z, c, o, params)
    o2 = o.copy()
    o2[idx] = min(1.0, o[idx] + 0.3)
    w1, _, _ = blend_arrays(z, c, o2, params)
    assert w1[idx] >= w0[idx] - 1e-12


def test_hard_limit_winner_takes_all(rng):
    params = BlendParams(gamma=1e-5, epsilon=0.01)
    for _ in range(50):
        n = rng.integers(1, 8)
        z = rng.uniform(0.05, 1.0, n)
        o = rng.uniform(0.5, 1.0, n)
        c = rng.uniform(0.1, 1.0, n)
        oz = o * z
        win = int(np.argmax(oz))
        others = np.delete(oz, win)
        if oz[win] < params.epsilon + 1e-3:
            continue
        if others.size and oz[win] - others.max() < 1e-3:
            continue
        w, _, _ = blend_arrays(z, c, o, params)
        assert w[win] > 1.0 - 1e-9


@given(st.integers(0, 100_000))
@settings(max_examples=100, deadline=None)
def test_stop_bound_soundness(seed):
    # sorted hit stacks with z-gaps >= 2*gamma: truncating at the bound moves
    # every weight by at most tau/(1-tau) relative
    rng = np.random.default_rng(seed)
    params = BlendParams(gamma=float(rng.uniform(0.005, 0.05)), tau=0.01)
    n = int(rng.integers(5, 40))
    gaps = rng.uniform(2 * params.gamma, 6 * params.gamma, n)
    z = np.clip(0.98 - np.concatenate([[0.0], np.cumsum(gaps[:-1])]), 0.0, 1.0)
    c = rng.uniform(0.05, 1.0, n)
    o = rng.uniform(0.3, 1.0, n)

    w_full, _, _ = blend_arrays(z, c, o, params)
    # walk in depth order, maintaining the running denominator
    denom = math.exp(params.epsilon / params.gamma)
    kept = 0
    for i in range(n):
        if z[i] < stop_depth_bound(denom, params):
            break
        denom += o[i] * c[i] * math.exp(o[i] * z[i] / params.gamma)
        kept += 1
    w_trunc, _, _ = blend_arrays(z[:kept], c[:kept], o[:kept], params)
    if kept < n:
        rel = np.abs(w_trunc - w_full[:kept]) / np.maximum(w_full[:kept], 1e-300)
        assert rel.max() <= params.tau / (1.0 - params.tau) + 1e-9


def test_partials_match_finite_differences(rng):
    params = BlendParams(gamma=0.12, epsilon=0.01)
    n = 5
    z = rng.uniform(0.1, 0.9, n)
    c = rng.uniform(0.1, 0.9, n)
    o = rng.uniform(0.1, 0.9, n)
    hits = hits_from(z, c, o, rng=rng)
    parts = blend_weight_partials(hits, params)
    h = 1e-6

    def weights_at(z=z, c=c, o=o, gamma=params.gamma):
        w, _, _ = blend_arrays(z, c, o, BlendParams(gamma=gamma, epsilon=params.epsilon))
        return w

    for name, arr in (("dz", z), ("dc", c), ("do", o)):
        for j in range(n):
            plus, minus = arr.copy(), arr.copy()
            plus[j] += h
            minus[j] -= h
            fd = (weights_at(**{name[1]: plus}) - weights_at(**{name[1]: minus})) / (2 * h)
            got = parts[name][:, j]
            rel = np.abs(got - fd) / np.maximum(np.abs(fd), 1e-9)
            assert rel.max() < 1e-5, f"{name}[{j}]"
    fd_g = (weights_at(gamma=params.gamma + h) - weights_at(gamma=params.gamma - h)) / (2 * h)
    rel = np.abs(parts["dgamma"] - fd_g) / np.maximum(np.abs(fd_g), 1e-9)
    assert rel.max() < 1e-5
