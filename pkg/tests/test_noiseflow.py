"""Conditional radial flow: transforms, densities, fitting, baselines."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from stemtomo import noiseflow as nf
from stemtomo.core import FileFormatError, ValidationError

# One radial layer at z0=0.3, a_raw=0.5, b_raw=-0.2, evaluated at z=1.1.
# Values computed independently at 30 significant digits.
ORACLE_F = 0.93047494865178901
ORACLE_LOGDET = -0.12369371607758172
ORACLE_ALPHA = 0.97407698418010668
ORACLE_BETA = -0.37593811479851484


def random_flow(cfg, seed=0, scale=0.4):
    base = nf.init_flow(cfg, seed=seed)
    vec = nf.flow_flatten(base)
    vec = np.random.default_rng(seed + 100).normal(0.0, scale, vec.shape)
    return nf.flow_unflatten(cfg, vec)


def test_layer_forward_matches_high_precision_reference():
    f, ld = nf.layer_forward(1.1, 0.3, 0.5, -0.2)
    assert_allclose(float(f), ORACLE_F, rtol=1e-14)
    assert_allclose(float(ld), ORACLE_LOGDET, rtol=1e-13)
    assert_allclose(nf.softplus(0.5), ORACLE_ALPHA, rtol=1e-14)
    assert_allclose(-nf.softplus(0.5) + nf.softplus(-0.2), ORACLE_BETA, rtol=1e-13)


def test_layer_is_monotone_so_log_det_is_finite():
    z = np.linspace(-6, 6, 4001)
    f, ld = nf.layer_forward(z, 0.3, 0.5, -0.2)
    assert np.all(np.diff(f) > 0)
    assert np.all(np.isfinite(ld))


def test_layer_inverse_round_trip():
    z = np.linspace(-5, 5, 101)
    f, _ = nf.layer_forward(z, 0.3, 0.5, -0.2)
    back = nf.layer_inverse(f, 0.3, 0.5, -0.2)
    assert np.abs(back - z).max() < 1e-10


def test_full_flow_round_trip_via_sampling():
    cfg = nf.FlowConfig(n_layers=4, n_conditioned=2)
    params = random_flow(cfg, seed=1)
    rng = np.random.default_rng(5)
    e = rng.uniform(0.05, 0.95, size=10_000)
    r = nf.sample(params, e, np.random.default_rng(6))
    # data -> base -> data must return the input
    lp, cache = nf.log_prob(params, r, e, with_cache=True)
    z = cache["z_final"]
    layers, _ = nf._resolve_layers(params, e)
    back = z
    for layer in reversed(layers):
        back = nf._layer_inverse(layer, back)
    assert np.abs(back - r).max() < 1e-9
    assert np.all(np.isfinite(lp))


def test_identity_flow_is_exactly_standard_normal():
    params = nf.identity_flow()
    r = np.linspace(-4, 4, 41)
    lp = nf.log_prob(params, r, np.full_like(r, 0.5))
    want = -0.5 * r**2 - 0.5 * np.log(2 * np.pi)
    assert_array_equal(lp, want)


def test_density_integrates_to_one():
    cfg = nf.FlowConfig(n_layers=4, n_conditioned=2)
    params = random_flow(cfg, seed=2)
    z = np.linspace(-12.0, 12.0, 200_001)
    for e_val in (0.1, 0.5, 0.9):
        p = np.exp(nf.log_prob(params, z, np.full_like(z, e_val)))
        integral = np.trapezoid(p, z)
        assert abs(integral - 1.0) < 1e-3


def test_samples_match_the_density_histogram():
    cfg = nf.FlowConfig(n_layers=4, n_conditioned=2)
    params = random_flow(cfg, seed=3)
    n = 150_000
    e = np.full(n, 0.3)
    draws = nf.sample(params, e, np.random.default_rng(7))
    lo, hi = np.quantile(draws, [0.001, 0.999])
    edges = np.linspace(lo, hi, 33)
    counts, _ = np.histogram(draws, bins=edges)
    observed = counts / n
    fine = np.linspace(lo, hi, 32 * 16 + 1)
    dens = np.exp(nf.log_prob(params, fine, np.full_like(fine, 0.3)))
    expected = np.array([
        np.trapezoid(dens[k * 16:(k + 1) * 16 + 1], fine[k * 16:(k + 1) * 16 + 1])
        for k in range(32)
    ])
    assert np.abs(observed - expected).sum() < 0.03


def test_log_prob_clamps_conditioner_with_warning():
    params = nf.identity_flow()
    with pytest.warns(RuntimeWarning):
        a = nf.log_prob(params, np.zeros(3), np.array([-0.2, 0.5, 1.7]))
    b = nf.log_prob(params, np.zeros(3), np.array([0.0, 0.5, 1.0]))
    assert_array_equal(a, b)


def test_log_prob_rejects_misaligned_shapes():
    with pytest.raises(ValidationError):
        nf.log_prob(nf.identity_flow(), np.zeros(4), np.zeros(3))


def test_backward_matches_finite_differences_everywhere():
    cfg = nf.FlowConfig(n_layers=3, n_conditioned=1)
    params = random_flow(cfg, seed=4)
    rng = np.random.default_rng(8)
    n = 7
    r = rng.normal(0.0, 0.6, n)
    e = rng.uniform(0.1, 0.9, n)
    upstream = rng.normal(size=n)

    _, cache = nf.log_prob(params, r, e, with_cache=True)
    grads, d_r, d_e = nf.log_prob_backward(params, cache, upstream)
    flat = nf.flow_grads_flatten(grads)

    def value(vec, rr, ee):
        p = nf.flow_unflatten(cfg, vec)
        return float(upstream @ nf.log_prob(p, rr, ee))

    vec0 = nf.flow_flatten(params)
    eps = 1e-6
    for i in range(vec0.size):
        up = vec0.copy(); up[i] += eps
        dn = vec0.copy(); dn[i] -= eps
        fd = (value(up, r, e) - value(dn, r, e)) / (2 * eps)
        assert abs(fd - flat[i]) < 1e-6 * max(1.0, abs(flat[i])), f"param {i}"
    for j in range(n):
        ru = r.copy(); ru[j] += eps
        rd = r.copy(); rd[j] -= eps
        fd = (value(vec0, ru, e) - value(vec0, rd, e)) / (2 * eps)
        assert abs(fd - d_r[j]) < 1e-6 * max(1.0, abs(d_r[j]))
        eu = e.copy(); eu[j] += eps
        ed = e.copy(); ed[j] -= eps
        fd = (value(vec0, r, eu) - value(vec0, r, ed)) / (2 * eps)
        assert abs(fd - d_e[j]) < 1e-6 * max(1.0, abs(d_e[j]))


def test_flat_views_round_trip_and_axpy():
    cfg = nf.FlowConfig(n_layers=4, n_conditioned=2)
    params = random_flow(cfg, seed=9)
    vec = nf.flow_flatten(params)
    back = nf.flow_unflatten(cfg, vec)
    assert_array_equal(nf.flow_flatten(back), vec)

    twin = nf.clone_flow(params)
    _, cache = nf.log_prob(params, np.array([0.2]), np.array([0.5]),
                           with_cache=True)
    grads, _, _ = nf.log_prob_backward(params, cache, np.ones(1))
    nf.flow_axpy(twin, grads, -0.1)
    moved = nf.flow_flatten(twin)
    assert_allclose(moved, vec - 0.1 * nf.flow_grads_flatten(grads),
                    rtol=0, atol=1e-15)
    assert_array_equal(nf.flow_flatten(params), vec)  # clone is independent


def test_fit_improves_on_the_near_identity_start():
    rng = np.random.default_rng(11)
    e = rng.uniform(0.2, 1.0, 6000)
    r = nf.synthetic_residuals(e, rng)
    cfg = nf.FitConfig(flow=nf.FlowConfig(n_layers=2, n_conditioned=1),
                       iterations=400, batch=512, lr=0.05,
                       validate_every=50, seed=0)
    fitted = nf.fit_supervised(e, r, cfg)
    assert nf.nll(fitted, r, e) < nf.nll(nf.init_flow(cfg.flow, seed=cfg.seed), r, e)


def test_fit_is_deterministic():
    rng = np.random.default_rng(12)
    e = rng.uniform(0.2, 1.0, 3000)
    r = nf.synthetic_residuals(e, rng)
    cfg = nf.FitConfig(flow=nf.FlowConfig(n_layers=2, n_conditioned=1),
                       iterations=150, batch=256, lr=0.05,
                       validate_every=50, seed=3)
    a = nf.fit_supervised(e, r, cfg)
    b = nf.fit_supervised(e, r, cfg)
    assert_array_equal(nf.flow_flatten(a), nf.flow_flatten(b))


def test_synthetic_residuals_are_negatively_skewed():
    rng = np.random.default_rng(13)
    e = np.full(200_000, 0.5)
    r = nf.synthetic_residuals(e, rng)
    # standardized Gamma(2) median, computed independently
    xi_median = 0.227443024548
    spread = 0.03 + 0.09 * 0.5
    assert abs(np.mean(r) - 0.05) < 1e-3
    assert abs(np.std(r) - spread) < 1e-3
    assert abs(np.median(r) - (0.05 + spread * xi_median)) < 1e-3
    assert np.median(r) > np.mean(r)  # the skew pulls the median up
    # attenuation-dependent: residuals vanish in the fully transmissive limit
    r1 = nf.synthetic_residuals(np.ones(50_000), np.random.default_rng(14))
    assert abs(np.mean(r1)) < 1e-3
    assert abs(np.std(r1) - 0.03) < 1e-3


def test_synthetic_residuals_are_reproducible():
    e = np.linspace(0.1, 1.0, 100)
    a = nf.synthetic_residuals(e, np.random.default_rng(5))
    b = nf.synthetic_residuals(e, np.random.default_rng(5))
    assert_array_equal(a, b)


def test_gaussian_baseline_is_the_closed_form_mle():
    rng = np.random.default_rng(15)
    e = rng.uniform(0, 1, 500)
    r = rng.normal(0.02, 0.1, 500)
    fit = nf.fit_baseline("gaussian", e, r)
    assert fit.params["mu"] == pytest.approx(float(np.mean(r)), abs=0)
    assert fit.params["var"] == pytest.approx(float(np.mean((r - r.mean())**2)), abs=0)
    # MLE optimality: any other (mu, var) has higher NLL
    worse = nf.ScalarNoiseBaseline("gaussian",
                                   {"mu": fit.params["mu"] + 0.03,
                                    "var": fit.params["var"] * 1.5})
    assert fit.nll(r) < worse.nll(r)


def test_poisson_baseline_recovers_the_rate():
    rng = np.random.default_rng(16)
    rate, gain = 400.0, 1.0 / 400.0
    e = rng.uniform(0.2, 1.0, 50_000)
    counts = rng.poisson(rate * e)
    r = gain * counts - e
    fit = nf.fit_baseline("poisson", e, r, gain=gain, offset=0.0)
    assert fit.params["rate"] == pytest.approx(rate, rel=0.02)
    est = nf.fit_baseline("poisson", e, r)  # photon-transfer regression path
    assert est.params["gain"] == pytest.approx(gain, rel=0.25)
    assert est.params["rate"] == pytest.approx(rate, rel=0.25)
    draws = fit.sample(e[:1000], np.random.default_rng(17))
    assert np.all(np.isfinite(fit.log_prob(draws, e[:1000])))


def test_baseline_validation():
    with pytest.raises(ValidationError):
        nf.fit_baseline("gaussian", np.zeros(1), np.zeros(1))
    with pytest.raises(ValidationError):
        nf.fit_baseline("lognormal", np.zeros(9), np.zeros(9))


def test_flow_save_load_round_trip(tmp_path):
    cfg = nf.FlowConfig(n_layers=4, n_conditioned=2)
    params = random_flow(cfg, seed=21)
    nf.save_flow(params, tmp_path / "n.flw")
    back = nf.load_flow(tmp_path / "n.flw")
    assert back.cfg == params.cfg
    assert_array_equal(nf.flow_flatten(back), nf.flow_flatten(params))


def test_flow_load_rejects_corruption(tmp_path):
    params = nf.identity_flow()
    nf.save_flow(params, tmp_path / "n.flw")
    buf = bytearray((tmp_path / "n.flw").read_bytes())
    buf[1] ^= 0x55
    (tmp_path / "n.flw").write_bytes(bytes(buf))
    with pytest.raises(FileFormatError):
        nf.load_flow(tmp_path / "n.flw")


def test_flow_config_validation():
    with pytest.raises(ValidationError):
        nf.FlowConfig(n_layers=0, n_conditioned=0).validate()
    with pytest.raises(ValidationError):
        nf.FlowConfig(n_layers=2, n_conditioned=3).validate()


@settings(max_examples=25)
@given(z0=st.floats(-1, 1), a_raw=st.floats(-2, 2), b_raw=st.floats(-2, 2),
       z=st.floats(-5, 5))
def test_layer_round_trip_property(z0, a_raw, b_raw, z):
    f, ld = nf.layer_forward(z, z0, a_raw, b_raw)
    assert np.isfinite(ld)
    back = nf.layer_inverse(f, z0, a_raw, b_raw)
    assert abs(float(back) - z) < 1e-9
