import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nltvsar.core import DimensionError, ParameterError
from nltvsar.regularization import (
    DualField,
    NLTVConfig,
    NLWeights,
    compute_weights,
    estimate_filter_h,
    gmc_penalty,
    gmc_threshold,
    nl_divergence,
    nl_gradient,
    nltv_energy,
    nltv_objective,
    nltv_prox,
)


def _toy_weights():
    # two pixels joined both ways with unit weight
    return NLWeights(shape=(1, 2), src=np.array([0, 1]), dst=np.array([1, 0]),
                     weight=np.ones(2), rev=np.array([1, 0]))


def _random_weights(seed, shape=(12, 12), k=6):
    rng = np.random.default_rng(seed)
    guide = rng.rayleigh(1.0, shape)
    return guide, compute_weights(guide, NLTVConfig(patch_size=3, search_radius=3, neighbors_kept=k))


def test_config_invariants():
    with pytest.raises(ParameterError):
        NLTVConfig(patch_size=4)
    with pytest.raises(ParameterError):
        NLTVConfig(search_radius=1, neighbors_kept=9)
    NLTVConfig(search_radius=1, neighbors_kept=8)
    k = NLTVConfig().patch_kernel()
    assert np.outer(k, k).sum() == pytest.approx(1.0)


def test_constant_guide_unit_weights():
    w = compute_weights(np.full((10, 10), 3.0), NLTVConfig(patch_size=3, search_radius=2, neighbors_kept=4))
    assert w.n_edges > 0
    assert np.all(w.weight == 1.0)


def test_weights_symmetric_and_bounded():
    _, w = _random_weights(0)
    assert np.all((w.weight > 0) & (w.weight <= 1))
    assert np.array_equal(w.src[w.rev], w.dst)
    assert np.array_equal(w.dst[w.rev], w.src)
    assert np.array_equal(w.weight[w.rev], w.weight)
    assert np.all(w.src != w.dst)


def test_each_pixel_keeps_k_neighbours():
    _, w = _random_weights(1, k=5)
    # union symmetrisation can only add edges
    assert np.all(np.bincount(w.src, minlength=w.n_pixels) >= 5)


def test_identical_patches_unit_weight():
    rng = np.random.default_rng(2)
    guide = rng.random((15, 15))
    guide[9:12, 9:12] = guide[2:5, 2:5]
    for h in (0.01, 1.0):
        w = compute_weights(guide, NLTVConfig(patch_size=3, search_radius=7,
                                              neighbors_kept=20, filter_h=h))
        pairs = dict(w.neighbors(3 * 15 + 3))
        assert pairs.get(10 * 15 + 10) == 1.0


@pytest.mark.parametrize("h", [0.05, 0.3, 2.0])
def test_step_edge_weights(h):
    guide = np.zeros((16, 16))
    guide[:, 8:] = 1.0
    w = compute_weights(guide, NLTVConfig(patch_size=3, search_radius=3,
                                          neighbors_kept=48, filter_h=h))
    pix = 4 * 16 + 2
    left = [wt for j, wt in w.neighbors(pix) if j % 16 < 5]
    far = [wt for j, wt in w.neighbors(pix) if j % 16 >= 8]
    assert not far or max(far) < min(left)


def test_filter_h_estimate_positive():
    rng = np.random.default_rng(3)
    assert estimate_filter_h(rng.random((20, 20))) > 0
    assert estimate_filter_h(np.zeros((20, 20))) > 0


def test_gradient_examples():
    w = _toy_weights()
    np.testing.assert_array_equal(nl_gradient(np.array([[1.0, 0.0]]), w), [1.0, -1.0])
    _, w = _random_weights(4)
    assert np.all(nl_gradient(np.full((12, 12), 2.5), w) == 0)
    rng = np.random.default_rng(4)
    g = nl_gradient(rng.random((12, 12)), w)
    np.testing.assert_allclose(g, -g[w.rev], atol=1e-15)


def test_divergence_examples():
    w = _toy_weights()
    np.testing.assert_array_equal(nl_divergence(np.zeros(2), w), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        nl_divergence(np.zeros(3), w)
    with pytest.raises(DimensionError):
        nl_gradient(np.zeros((2, 2)), w)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_divergence_adjoint(seed):
    _, w = _random_weights(seed % 1000)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(w.shape)
    p = rng.standard_normal(w.n_edges)
    lhs = float(np.dot(nl_gradient(u, w), p))
    rhs = -float(np.sum(u * nl_divergence(p, w)))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_norm_bound_dominates_operator_norm():
    _, w = _random_weights(5)
    rng = np.random.default_rng(5)
    u = rng.standard_normal(w.shape)
    for _ in range(50):  # power iteration on -div(grad)
        u = -nl_divergence(nl_gradient(u, w), w)
        u /= np.linalg.norm(u)
    est = float(np.sum(u * -nl_divergence(nl_gradient(u, w), w)))
    assert est <= w.norm_bound()


@pytest.mark.parametrize("seed", range(10))
def test_chambolle_monotone(seed):
    guide, w = _random_weights(seed)
    rng = np.random.default_rng(seed + 100)
    v = guide + 0.3 * rng.standard_normal(guide.shape)
    hist = []
    nltv_prox(v, 0.2, 0.99 / w.norm_bound(), None, w, inner_iters=25, history=hist)
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, abs(hist[0])))
    assert hist[-1] < nltv_objective(v, v, 0.2, w)


def test_prox_examples():
    _, w = _random_weights(6)
    tau = 0.5 / w.norm_bound()
    const = np.full(w.shape, 1.7)
    z, p = nltv_prox(const, 0.5, tau, None, w)
    np.testing.assert_allclose(z, const, atol=1e-12)
    rng = np.random.default_rng(6)
    v = rng.random(w.shape)
    z, _ = nltv_prox(v, 0.0, tau, None, w)
    assert np.array_equal(z, v)
    with pytest.raises(ParameterError):
        nltv_prox(v, 0.1, 1.5 / w.norm_bound(), None, w)
    with pytest.raises(ParameterError):
        nltv_prox(v, -0.1, tau, None, w)


def test_prox_reduces_energy_and_keeps_phase():
    guide, w = _random_weights(7)
    rng = np.random.default_rng(7)
    phase = np.exp(2j * np.pi * rng.random(w.shape))
    v = guide * phase
    z, p = nltv_prox(v, 0.3, 0.9 / w.norm_bound(), None, w, inner_iters=20)
    assert nltv_energy(np.abs(z), w) < nltv_energy(guide, w)
    nz = np.abs(z) > 1e-9
    np.testing.assert_allclose(z[nz] / np.abs(z[nz]), phase[nz], atol=1e-12)
    assert isinstance(p, DualField) and np.all(np.isfinite(p.values))


def test_dual_warm_start_and_remap():
    guide, w = _random_weights(8)
    tau = 0.9 / w.norm_bound()
    _, p = nltv_prox(guide, 0.3, tau, None, w, inner_iters=5)
    _, w2 = _random_weights(9)
    moved = p.remap(w2)
    assert moved.values.shape == (w2.n_edges,)
    common = np.isin(w2.keys, w.keys)
    lookup = dict(zip(w.keys.tolist(), p.values.tolist()))
    np.testing.assert_array_equal(moved.values[common], [lookup[k] for k in w2.keys[common]])
    assert np.all(moved.values[~common] == 0)
    assert p.remap(w) is p


def _firm_oracle(b, delta, theta):
    """Piecewise closed form of the firm threshold, evaluated per entry."""
    out = np.empty_like(b)
    for i, x in enumerate(b):
        a = abs(x)
        if a <= delta:
            out[i] = 0.0
        elif a >= theta * delta:
            out[i] = x
        else:
            out[i] = np.sign(x) * theta * (a - delta) / (theta - 1.0)
    return out


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(1.1, 50.0), st.integers(0, 2**31 - 1))
def test_gmc_matches_piecewise_oracle(delta, theta, seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(-3 * theta * delta, 3 * theta * delta, 200)
    np.testing.assert_allclose(gmc_threshold(b, delta, theta), _firm_oracle(b, delta, theta),
                               rtol=1e-12, atol=1e-12)


def test_gmc_examples():
    assert gmc_threshold(np.array([0.5]), 1.0, 3.0)[0] == 0.0
    assert gmc_threshold(np.array([5.0]), 1.0, 3.0)[0] == 5.0
    assert gmc_threshold(np.array([2.0]), 1.0, 3.0)[0] == pytest.approx(1.5)
    b = np.linspace(-4, 4, 17)
    assert np.array_equal(gmc_threshold(b, 0.0, 3.0), b)
    np.testing.assert_allclose(gmc_threshold(b, 1.0, np.inf), np.sign(b) * np.maximum(np.abs(b) - 1, 0))
    with pytest.raises(ParameterError):
        gmc_threshold(b, 1.0, 1.0)
    with pytest.raises(ParameterError):
        gmc_threshold(b, -1.0, 2.0)


def test_gmc_complex_keeps_phase():
    b = np.array([3 * np.exp(0.7j), 0.2j, 0.0])
    out = gmc_threshold(b, 0.5, 2.0)
    assert out[0] == pytest.approx(b[0])
    assert out[1] == 0 and out[2] == 0


def test_gmc_penalty_saturates():
    bw = 0.5
    knee = 1 / bw**2
    assert gmc_penalty(np.array([0.0]), bw) == 0.0
    assert gmc_penalty(np.array([knee]), bw) == pytest.approx(knee / 2)
    assert gmc_penalty(np.array([10 * knee]), bw) == pytest.approx(knee / 2)
    assert gmc_penalty(np.array([-1.0, 1.0]), 0.0) == 2.0
    x = np.linspace(0, knee, 50)
    vals = [gmc_penalty(np.array([t]), bw) for t in x]
    assert np.all(np.diff(vals) >= 0)
