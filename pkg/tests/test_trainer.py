"""Batching, losses, the optimiser, and the training loop."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from stemtomo import field as fm
from stemtomo import metrics, noiseflow, trainer
from stemtomo.core import ConfigError, Geometry, TiltSeries, rng_from, ray_for_pixel
from stemtomo.optics import DefocusConfig, QuadratureConfig, render_stack, transmittance
from stemtomo.phantom import PhantomSpec, Shell, density_fn


def tiny_field(seed=0, dtype="f64le", width=8):
    cfg = fm.FieldConfig(width=width, n_hidden=2, skip_at=1, dtype=dtype,
                         encoding=fm.EncodingConfig(n_freqs=2))
    return fm.init_params(cfg, seed=seed)


def tiny_stack(n_tilts=3, size=6, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0.3, 1.0, size=(n_tilts, size, size)).astype(np.float32)
    return TiltSeries(images=imgs, angles_deg=np.linspace(-30, 30, n_tilts),
                      pixel_spacing=2.0 / size)


Q8 = QuadratureConfig(n_samples=8, stratified=False)
NO_BLUR = DefocusConfig(enabled=False)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def test_sample_batch_returns_the_observed_pixels():
    ts = tiny_stack()
    tilts, px, py, values = trainer.sample_batch(ts, 200, np.random.default_rng(0))
    assert_array_equal(values, ts.images[tilts, py, px].astype(np.float64))
    assert tilts.min() >= 0 and tilts.max() < ts.n_tilts
    assert px.max() < ts.width and py.max() < ts.height


def test_sample_batch_is_deterministic_under_seed():
    ts = tiny_stack()
    a = trainer.sample_batch(ts, 64, rng_from(9, "train"))
    b = trainer.sample_batch(ts, 64, rng_from(9, "train"))
    for x, y in zip(a, b):
        assert_array_equal(x, y)


def test_sample_batch_single_pixel_stack():
    ts = TiltSeries(images=np.full((1, 1, 1), 0.7, dtype=np.float32),
                    angles_deg=[0.0], pixel_spacing=2.0)
    tilts, px, py, values = trainer.sample_batch(ts, 1, np.random.default_rng(0))
    assert (tilts[0], px[0], py[0]) == (0, 0, 0)
    assert values[0] == np.float32(0.7)


def test_sample_batch_is_uniform_over_all_pixels():
    ts = tiny_stack(n_tilts=2, size=4)  # 32 cells
    tilts, px, py, _ = trainer.sample_batch(ts, 1_000_000,
                                            np.random.default_rng(42))
    flat = (tilts * 16 + py * 4 + px).astype(np.int64)
    counts = np.bincount(flat, minlength=32)
    assert stats.chisquare(counts).pvalue > 0.01


# --------------------------------------------------------------------------
# rendering a batch
# --------------------------------------------------------------------------

def test_render_batch_agrees_with_the_single_ray_renderer():
    params = tiny_field(seed=1)
    ts = tiny_stack()
    geom = Geometry.of(ts)
    tilts = np.array([0, 1, 2, 1])
    px = np.array([0, 2, 5, 3])
    py = np.array([1, 4, 0, 3])
    e = trainer.render_batch(params, geom, tilts, px, py, Q8, NO_BLUR,
                             np.random.default_rng(0))
    dens = fm.as_density_fn(params)
    for k in range(4):
        ray = ray_for_pixel(geom, int(tilts[k]), int(px[k]), int(py[k]))
        assert_allclose(e[k], transmittance(dens, ray, Q8), rtol=1e-12)


def test_render_batch_backward_matches_finite_differences():
    params = tiny_field(seed=2)
    ts = tiny_stack()
    geom = Geometry.of(ts)
    tilts, px, py = np.array([0, 2]), np.array([1, 4]), np.array([2, 2])
    d_e = np.array([0.7, -1.3])

    _, cache = trainer.render_batch(params, geom, tilts, px, py, Q8, NO_BLUR,
                                    np.random.default_rng(0), with_cache=True)
    got = fm.flatten_grads(trainer.render_batch_backward(params, cache, d_e))

    vec0 = fm.flatten(params)
    eps = 1e-6

    def value(vec):
        p = fm.unflatten(params.cfg, vec)
        e = trainer.render_batch(p, geom, tilts, px, py, Q8, NO_BLUR,
                                 np.random.default_rng(0))
        return float(e @ d_e)

    idx = np.random.default_rng(3).choice(vec0.size, size=25, replace=False)
    for i in idx:
        up = vec0.copy(); up[i] += eps
        dn = vec0.copy(); dn[i] -= eps
        fd = (value(up) - value(dn)) / (2 * eps)
        assert abs(fd - got[i]) < 1e-6 * max(1.0, abs(got[i]))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def exact_batch(params, ts, n=5):
    """A batch whose observed values equal the current render."""
    geom = Geometry.of(ts)
    rng = np.random.default_rng(1)
    tilts = rng.integers(0, ts.n_tilts, n)
    px = rng.integers(0, ts.width, n)
    py = rng.integers(0, ts.height, n)
    e = trainer.render_batch(params, geom, tilts, px, py, Q8, NO_BLUR, rng)
    return geom, (tilts, px, py, e)


def test_matched_observations_give_zero_lp_loss_and_gradient():
    params = tiny_field(seed=4)
    ts = tiny_stack()
    geom, batch = exact_batch(params, ts)
    for p in (1, 2):
        loss, fgrads, aux = trainer.loss_lp(params, geom, batch, Q8, NO_BLUR,
                                            np.random.default_rng(0), p=p)
        assert loss == 0.0
        assert np.all(trainer.field_mod.flatten_grads(fgrads) == 0.0)
        assert_array_equal(aux["residual"], np.zeros(5))


def test_one_matched_ray_with_identity_flow_is_the_gaussian_constant():
    params = tiny_field(seed=5)
    ts = tiny_stack()
    geom, batch = exact_batch(params, ts, n=1)
    loss, fgrads, flgrads, _ = trainer.loss_mle(
        params, noiseflow.identity_flow(), geom, batch, Q8, NO_BLUR,
        np.random.default_rng(0))
    assert loss == 0.5 * np.log(2.0 * np.pi)
    assert np.all(fm.flatten_grads(fgrads) == 0.0)


def test_identity_flow_mle_gradient_is_half_the_l2_gradient():
    params = tiny_field(seed=6)
    ts = tiny_stack()
    geom = Geometry.of(ts)
    batch = trainer.sample_batch(ts, 12, np.random.default_rng(2))
    _, g2, _ = trainer.loss_lp(params, geom, batch, Q8, NO_BLUR,
                               np.random.default_rng(0), p=2)
    _, gm, _, _ = trainer.loss_mle(params, noiseflow.identity_flow(), geom,
                                   batch, Q8, NO_BLUR, np.random.default_rng(0))
    a = fm.flatten_grads(gm)
    b = 0.5 * fm.flatten_grads(g2)
    denom = np.abs(b).max()
    assert np.abs(a - b).max() < 1e-10 * denom


def test_mle_gradients_match_finite_differences():
    params = tiny_field(seed=7)
    flow_cfg = noiseflow.FlowConfig(n_layers=2, n_conditioned=1)
    n_flow = noiseflow.flow_flatten(noiseflow.init_flow(flow_cfg)).size
    flow = noiseflow.flow_unflatten(
        flow_cfg, np.random.default_rng(4).normal(0, 0.3, n_flow))
    ts = tiny_stack()
    geom = Geometry.of(ts)
    batch = trainer.sample_batch(ts, 6, np.random.default_rng(5))

    _, fgrads, flgrads, _ = trainer.loss_mle(params, flow, geom, batch, Q8,
                                             NO_BLUR, np.random.default_rng(0))
    flat_f = fm.flatten_grads(fgrads)
    flat_fl = noiseflow.flow_grads_flatten(flgrads)

    eps = 1e-6

    def value(fvec, flvec):
        p = fm.unflatten(params.cfg, fvec)
        fl = noiseflow.flow_unflatten(flow.cfg, flvec)
        loss, _, _, _ = trainer.loss_mle(p, fl, geom, batch, Q8, NO_BLUR,
                                         np.random.default_rng(0))
        return loss

    f0 = fm.flatten(params)
    fl0 = noiseflow.flow_flatten(flow)
    idx = np.random.default_rng(6).choice(f0.size, size=20, replace=False)
    for i in idx:
        up = f0.copy(); up[i] += eps
        dn = f0.copy(); dn[i] -= eps
        fd = (value(up, fl0) - value(dn, fl0)) / (2 * eps)
        assert abs(fd - flat_f[i]) < 1e-5 * max(1.0, abs(flat_f[i]))
    for i in range(fl0.size):
        up = fl0.copy(); up[i] += eps
        dn = fl0.copy(); dn[i] -= eps
        fd = (value(f0, up) - value(f0, dn)) / (2 * eps)
        assert abs(fd - flat_fl[i]) < 1e-5 * max(1.0, abs(flat_fl[i]))


def test_loss_lp_rejects_other_exponents():
    params = tiny_field()
    ts = tiny_stack()
    geom, batch = exact_batch(params, ts)
    with pytest.raises(Exception):
        trainer.loss_lp(params, geom, batch, Q8, NO_BLUR,
                        np.random.default_rng(0), p=3)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

def test_adam_matches_a_reference_implementation():
    params = tiny_field(seed=8)
    opt = trainer.Adam(params, lr=0.01)
    rng = np.random.default_rng(9)

    ref = [w.copy() for w in params.weights] + [b.copy() for b in params.biases]
    m = [np.zeros_like(a) for a in ref]
    v = [np.zeros_like(a) for a in ref]
    b1, b2, eps = 0.9, 0.999, 1e-8

    for t in range(1, 4):
        gw = [rng.normal(size=w.shape) for w in params.weights]
        gb = [rng.normal(size=b.shape) for b in params.biases]
        opt.step(params, (gw, gb))
        for k, g in enumerate(gw + gb):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            ref[k] -= 0.01 * (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)

    got = params.weights + params.biases
    for a, b in zip(got, ref):
        assert_allclose(a, b, rtol=1e-12, atol=1e-14)


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------

def small_train_cfg(loss="l2", iterations=30, seed=0):
    return trainer.TrainConfig(
        loss=loss, batch_rays=16, iterations=iterations, field_lr=1e-3,
        flow_lr=1e-3, validate_every=10, val_rays=32, seed=seed,
        field=fm.FieldConfig(width=8, n_hidden=2, skip_at=1,
                             encoding=fm.EncodingConfig(n_freqs=2)),
        flow=noiseflow.FlowConfig(n_layers=2, n_conditioned=1),
        quadrature=QuadratureConfig(n_samples=8, stratified=True))


def test_zero_iterations_returns_the_initial_parameters():
    ts = tiny_stack()
    cfg = small_train_cfg(iterations=0)
    res = trainer.train(ts, ts, cfg)
    want = fm.init_params(cfg.field, cfg.seed)
    assert_array_equal(fm.flatten(res.field), fm.flatten(want))
    assert res.report.checkpoints == []
    assert res.report.to_json()["best_val_loss"] is None


def test_training_is_bit_deterministic():
    ts = tiny_stack(seed=3)
    a = trainer.train(ts, ts, small_train_cfg(loss="mle", seed=5))
    b = trainer.train(ts, ts, small_train_cfg(loss="mle", seed=5))
    assert_array_equal(fm.flatten(a.field), fm.flatten(b.field))
    assert_array_equal(noiseflow.flow_flatten(a.flow),
                       noiseflow.flow_flatten(b.flow))
    ja, jb = a.report.to_json(False), b.report.to_json(False)
    assert ja == jb
    assert a.report.to_json()["wall_clock_s"] != jb.get("wall_clock_s")


def test_returned_params_are_the_best_checkpoint():
    ts = tiny_stack(seed=4)
    res = trainer.train(ts, ts, small_train_cfg(iterations=50))
    losses = [c["val_loss"] for c in res.report.checkpoints]
    assert res.report.best_val_loss == min(losses)
    k = losses.index(min(losses))
    assert res.report.best_iteration == res.report.checkpoints[k]["iteration"]


def test_l1_and_frozen_flow_paths_run():
    ts = tiny_stack(seed=6)
    res = trainer.train(ts, ts, small_train_cfg(loss="l1", iterations=10))
    assert res.flow is None
    cfg = small_train_cfg(loss="mle", iterations=10)
    cfg.flow_frozen = True
    init = noiseflow.identity_flow()
    res = trainer.train(ts, ts, cfg, flow_init=init)
    assert_array_equal(noiseflow.flow_flatten(res.flow),
                       noiseflow.flow_flatten(init))


def test_config_validation_lists_every_bad_field():
    cfg = small_train_cfg()
    cfg.loss = "huber"
    cfg.batch_rays = 0
    cfg.field_lr = 0.0
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert set(exc.value.details["fields"]) == {"loss", "batch_rays", "field_lr"}
    cfg2 = small_train_cfg(loss="mle")
    cfg2.flow = None
    with pytest.raises(ConfigError):
        cfg2.validate()


@pytest.mark.slow
def test_clean_desk_run_reaches_25db_on_a_held_out_tilt():
    # single-component phantom, 16 training tilts at 48^2, clean data, L2
    spec = PhantomSpec(shells=[Shell(center=(0.05, -0.1, 0.0),
                                     radii=(0.62, 0.5, 0.55),
                                     euler_rad=(0.3, 0.2, 0.1),
                                     thickness=0.35, density=0.8)])
    dens = density_fn(spec)
    size, ps = 48, 2.0 / 48
    angles = np.linspace(-60.0, 60.0, 16)
    held_out = np.array([3.9])
    q_data = QuadratureConfig(n_samples=96)

    def stack(angs):
        geom = Geometry(width=size, height=size, pixel_spacing=ps,
                        angles_deg=tuple(float(a) for a in angs))
        return render_stack(dens, geom, q=q_data)

    ts_all = stack(angles)
    tr = np.ones(16, dtype=bool)
    tr[[5, 10]] = False
    ts_train = TiltSeries(images=ts_all.images[tr], angles_deg=angles[tr],
                          pixel_spacing=ps)
    ts_val = TiltSeries(images=ts_all.images[~tr], angles_deg=angles[~tr],
                        pixel_spacing=ps)
    ts_test = stack(held_out)

    cfg = trainer.TrainConfig(
        loss="l2", batch_rays=128, iterations=5000, field_lr=1e-3,
        validate_every=1000, val_rays=2048, seed=0,
        field=fm.FieldConfig(width=32, n_hidden=3, skip_at=1,
                             encoding=fm.EncodingConfig(n_freqs=6)),
        flow=None,
        quadrature=QuadratureConfig(n_samples=32, stratified=True))
    res = trainer.train(ts_train, ts_val, cfg)

    geom_test = Geometry.of(ts_test)
    pred = render_stack(fm.as_density_fn(res.field), geom_test,
                        q=QuadratureConfig(n_samples=64))
    psnr = metrics.psnr_db(pred.images[0], ts_test.images[0])
    assert psnr > 25.0, f"held-out PSNR {psnr:.2f} dB"
