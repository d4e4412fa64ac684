import math
import warnings

import numpy as np
import pytest
import torch

from dmliv.learners import (
    BOOSTED_TREES,
    FEEDFORWARD,
    BoostedTrees,
    DensityConfig,
    FixedMixture,
    GaussianRegressionDensity,
    MixtureOfGaussians,
    RegressorConfig,
    dumps,
    fit_conditional_density,
    fit_regressor,
    loads,
    new_counterfactual_model,
    sample_actions,
)
from dmliv.learners.density import mixture_logpdf, mixture_nll
from dmliv.learners.nets import FeedForwardRegressor, train_minibatch, mse_loss

FAST = RegressorConfig(FEEDFORWARD, layer_widths=(32, 16), epochs=30, batch_size=128, dropout_rate=0.0)


def rng(seed=0):
    return np.random.default_rng(seed)


# config ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        RegressorConfig(FEEDFORWARD, learning_rate=0.0)
    with pytest.raises(ValueError):
        RegressorConfig(BOOSTED_TREES, n_trees=0)
    with pytest.raises(ValueError):
        RegressorConfig("forest")


def test_config_dict_round_trip():
    for cfg in (RegressorConfig(), DensityConfig(n_components=4), RegressorConfig(BOOSTED_TREES, n_trees=7)):
        assert RegressorConfig.from_dict(cfg.to_dict()) == cfg
        assert type(RegressorConfig.from_dict(cfg.to_dict())) is type(cfg)


def test_dropout_formula():
    assert RegressorConfig().resolved_dropout(5000) == pytest.approx(0.1)
    assert RegressorConfig(dropout_rate=0.3).resolved_dropout(5000) == 0.3


# regressors -----------------------------------------------------------------------


@pytest.mark.parametrize("kind", [FEEDFORWARD, BOOSTED_TREES])
def test_constant_targets(kind):
    x = rng().normal(size=(300, 3))
    cfg = FAST if kind == FEEDFORWARD else RegressorConfig(BOOSTED_TREES, n_trees=20, min_leaf=5)
    model = fit_regressor(x, np.full(300, 2.5), cfg)
    pred = model.predict(rng(1).normal(size=(100, 3)))
    np.testing.assert_allclose(pred, 2.5, atol=1e-3)


def test_feedforward_linear_target():
    r = rng(2)
    x = r.uniform(-1, 1, size=(2000, 2))
    y = 3 * x[:, 0] + 1
    cfg = RegressorConfig(FEEDFORWARD, epochs=100, dropout_rate=0.0)
    model = fit_regressor(x, y, cfg, seed=0)
    xt = r.uniform(-1, 1, size=(2000, 2))
    mse = np.mean((model.predict(xt) - (3 * xt[:, 0] + 1)) ** 2)
    design = np.column_stack([np.ones(2000), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    ols_mse = np.mean((np.column_stack([np.ones(2000), xt]) @ coef - (3 * xt[:, 0] + 1)) ** 2)
    assert ols_mse < 1e-20
    assert mse < 1e-2


def test_trees_step_function():
    r = rng(3)
    x = r.uniform(-1, 1, size=(2000, 2))
    cfg = RegressorConfig(BOOSTED_TREES, n_trees=100, min_leaf=10)
    model = fit_regressor(x, (x[:, 0] > 0).astype(float), cfg)
    xt = r.uniform(-1, 1, size=(2000, 2))
    assert np.mean((model.predict(xt) - (xt[:, 0] > 0)) ** 2) < 0.02


def test_trees_training_mse_non_increasing():
    r = rng(4)
    x = r.normal(size=(500, 3))
    y = np.sin(x[:, 0]) + 0.1 * r.normal(size=500)
    model = BoostedTrees.fit(x, y, RegressorConfig(BOOSTED_TREES, n_trees=60, min_leaf=20))
    trace = np.asarray(model.training_trace)
    assert np.all(np.diff(trace) <= 1e-12)
    staged = [np.mean((p - y) ** 2) for p in model.staged_predict(x)]
    np.testing.assert_allclose(staged, trace, rtol=1e-10)


@pytest.mark.parametrize("kind", [FEEDFORWARD, BOOSTED_TREES])
def test_beats_constant_predictor_and_is_deterministic(kind):
    r = rng(5)
    x = r.normal(size=(600, 2))
    y = x[:, 0] ** 2 + 0.1 * r.normal(size=600)
    cfg = FAST.with_(dropout_rate=0.2) if kind == FEEDFORWARD else RegressorConfig(BOOSTED_TREES, n_trees=50, min_leaf=10)
    model = fit_regressor(x, y, cfg)
    p1, p2 = model.predict(x), model.predict(x)
    assert np.array_equal(p1, p2)  # no dropout at predict time
    assert np.mean((p1 - y) ** 2) < np.var(y)


def test_full_batch_loss_is_monotone():
    r = rng(6)
    x = r.normal(size=(256, 2))
    y = x @ np.array([1.0, -2.0]) + 0.5
    net = FeedForwardRegressor.fit(x, y, RegressorConfig(FEEDFORWARD, layer_widths=(16,), epochs=1, dropout_rate=0.0)).net
    cfg = RegressorConfig(FEEDFORWARD, epochs=50, batch_size=256, learning_rate=1e-3, weight_decay=0.0, dropout_rate=0.0)
    trace = train_minibatch(net, mse_loss, x, y, cfg, seed=0)
    assert all(math.isfinite(v) for v in trace)
    assert np.all(np.diff(trace) <= 1e-9)


def test_same_seed_same_fit():
    x = rng(7).normal(size=(200, 2))
    y = x[:, 0]
    a = fit_regressor(x, y, FAST, seed=3).predict(x)
    b = fit_regressor(x, y, FAST, seed=3).predict(x)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", [FEEDFORWARD, BOOSTED_TREES])
def test_regressor_input_errors(kind):
    cfg = FAST if kind == FEEDFORWARD else RegressorConfig(BOOSTED_TREES, n_trees=2)
    with pytest.raises(ValueError, match="dimension mismatch"):
        fit_regressor(np.zeros((10, 2)), np.zeros(9), cfg)
    bad = np.zeros((10, 2))
    bad[3, 1] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        fit_regressor(bad, np.zeros(10), cfg)
    with pytest.raises(ValueError):
        fit_regressor(np.zeros((1, 2)), np.zeros(1), cfg)


# conditional density -----------------------------------------------------------------


def test_mdn_standard_normal_nll():
    r = rng(8)
    x = r.normal(size=(10_000, 2))
    a = r.normal(size=10_000)
    cfg = DensityConfig(FEEDFORWARD, layer_widths=(32, 16), n_components=3, epochs=30, batch_size=256, dropout_rate=0.0)
    model = fit_conditional_density(x, a, cfg)
    xt, at = r.normal(size=(10_000, 2)), r.normal(size=10_000)
    analytic = 0.5 * math.log(2 * math.pi) + 0.5
    assert abs(model.nll(xt, at) - analytic) < 0.1


def test_mdn_learns_identity_mean():
    r = rng(9)
    z = r.normal(size=(5000, 1))
    cfg = DensityConfig(FEEDFORWARD, layer_widths=(32, 16), n_components=3, epochs=40, batch_size=256, dropout_rate=0.0, learning_rate=3e-3)
    model = fit_conditional_density(z, z[:, 0], cfg)
    zt = r.normal(size=(2000, 1))
    assert np.mean((model.mean(zt) - zt[:, 0]) ** 2) < 0.01


@pytest.fixture(scope="module")
def small_mdn():
    r = rng(10)
    x = r.normal(size=(3000, 2))
    a = np.where(r.random(3000) < 0.5, -1.0, 1.0) + x[:, 0] + 0.3 * r.normal(size=3000)
    cfg = DensityConfig(FEEDFORWARD, layer_widths=(32, 16), n_components=4, epochs=20, batch_size=256, dropout_rate=0.0)
    return fit_conditional_density(x, a, cfg, seed=1), x, a


def test_mdn_simplex_and_floor(small_mdn):
    model, _, _ = small_mdn
    w, mu, sd = model.mixture_params(rng(11).normal(size=(100, 2)))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w >= 0)
    assert np.all(sd >= model.cfg.std_floor * float(model.net.a_std) - 1e-12)


def test_mdn_beats_pooled_gaussian(small_mdn):
    model, x, a = small_mdn
    pooled = 0.5 * math.log(2 * math.pi * a.var()) + 0.5
    assert model.nll(x, a) <= pooled


def test_density_normalization(small_mdn):
    model, _, _ = small_mdn
    pts = rng(12).normal(size=(20, 2))
    w, mu, sd = model.mixture_params(pts)
    lo, hi = (mu - 12 * sd).min(), (mu + 12 * sd).max()
    grid = np.linspace(lo, hi, 200_001)
    for i in range(20):
        logp = mixture_logpdf(
            np.repeat(w[i : i + 1], grid.size, 0), np.repeat(mu[i : i + 1], grid.size, 0), np.repeat(sd[i : i + 1], grid.size, 0), grid
        )
        assert abs(np.trapezoid(np.exp(logp), grid) - 1.0) < 1e-3


def test_degenerate_actions_warn():
    x = rng(13).normal(size=(50, 2))
    cfg = DensityConfig(FEEDFORWARD, layer_widths=(8,), n_components=2, epochs=2, dropout_rate=0.0)
    with pytest.warns(RuntimeWarning):
        model = fit_conditional_density(x, np.full(50, 3.0), cfg)
    assert model.degenerate


def test_density_needs_enough_rows():
    with pytest.raises(ValueError):
        fit_conditional_density(np.zeros((3, 1)), np.arange(3.0), DensityConfig(n_components=10))


def test_tree_density_is_gaussian_location_model():
    r = rng(14)
    x = r.uniform(-1, 1, size=(2000, 1))
    a = 2 * (x[:, 0] > 0) + 0.5 * r.normal(size=2000)
    cfg = DensityConfig(BOOSTED_TREES, n_trees=50, min_leaf=20)
    model = fit_conditional_density(x, a, cfg)
    assert isinstance(model, GaussianRegressionDensity)
    assert model.sigma == pytest.approx(0.5, rel=0.1)


# sampling --------------------------------------------------------------------------


def test_sample_single_component_floor():
    m = FixedMixture([1.0], [2.0], [1e-3])
    draws = sample_actions(m, [0.0], [0.0], 10_000, seed=0)
    assert abs(draws.mean() - 2.0) < 0.05


def test_sample_symmetric_pair():
    m = FixedMixture([0.5, 0.5], [-1.0, 1.0], [1e-3, 1e-3])
    draws = sample_actions(m, [0.0], [0.0], 10_000, seed=1)
    assert abs(draws.mean()) < 0.05


def test_sample_mean_matches_mixture_mean(small_mdn):
    model, _, _ = small_mdn
    c = np.array([0.3])
    z = np.array([-0.2])
    w, mu, sd = model.mixture_params(np.array([[0.3, -0.2]]))
    mean = float(np.sum(w * mu))
    sigma = math.sqrt(float(np.sum(w * (sd**2 + mu**2))) - mean**2)
    draws = sample_actions(model, c, z, 100_000, seed=2)
    assert abs(draws.mean() - mean) < 4 * sigma / math.sqrt(100_000)
    assert np.array_equal(draws, sample_actions(model, c, z, 100_000, seed=2))


def test_sample_count_zero():
    with pytest.raises(ValueError):
        sample_actions(FixedMixture([1.0], [0.0], [1.0]), [0.0], [0.0], 0, seed=0)


# counterfactual model ----------------------------------------------------------------


@pytest.fixture(scope="module")
def cf64():
    model = new_counterfactual_model(RegressorConfig(FEEDFORWARD, layer_widths=(16, 8), dtype="float64"), 2, seed=3)
    with torch.no_grad():
        for p in model.net.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return model


def _points(n, seed):
    r = rng(seed)
    return r.normal(size=(n, 2)), r.normal(size=n)


def test_grad_theta_matches_central_differences(cf64):
    c, a = _points(10, 15)
    jac = cf64.grad_theta(c, a)
    theta = cf64.theta
    h = 1e-6
    fd = np.empty_like(jac)
    model = cf64.copy()
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        model.theta = theta + e
        up = model.value(c, a)
        model.theta = theta - e
        fd[:, j] = (up - model.value(c, a)) / (2 * h)
    np.testing.assert_allclose(jac, fd, rtol=1e-4, atol=1e-8)


def test_equal_theta_equal_values(cf64):
    twin = new_counterfactual_model(RegressorConfig(FEEDFORWARD, layer_widths=(16, 8), dtype="float64"), 2, seed=99)
    twin.theta = cf64.theta
    c, a = _points(50, 16)
    assert np.array_equal(twin.value(c, a), cf64.value(c, a))


def test_first_order_taylor(cf64):
    c, a = _points(5, 17)
    theta = cf64.theta
    jac = cf64.grad_theta(c, a)
    j = int(np.argmax(np.abs(jac).sum(axis=0)))
    model = cf64.copy()
    delta = 1e-5
    e = np.zeros_like(theta)
    e[j] = delta
    model.theta = theta + e
    np.testing.assert_allclose(model.value(c, a) - cf64.value(c, a), delta * jac[:, j], rtol=1e-3)


def test_fresh_model_grad_check():
    model = new_counterfactual_model(RegressorConfig(FEEDFORWARD, layer_widths=(8,), dtype="float64"), 1, seed=0)
    c, a = rng(18).normal(size=(10, 1)), rng(19).normal(size=10)
    jac = model.grad_theta(c, a)
    theta = model.theta
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        model.theta = theta + e
        up = model.value(c, a)
        model.theta = theta - e
        down = model.value(c, a)
        model.theta = theta
        np.testing.assert_allclose(jac[:, j], (up - down) / 2e-6, rtol=1e-4, atol=1e-8)


def test_stage2_tree_kind_rejected():
    with pytest.raises(ValueError, match="fit_stage2_trees"):
        new_counterfactual_model(RegressorConfig(BOOSTED_TREES), 2)


def test_mdn_nll_gradient_matches_finite_differences():
    torch.manual_seed(0)
    from dmliv.learners.density import MixtureNet

    net = MixtureNet(2, (6,), 0.0, 3, 1e-3).double()
    x = torch.randn(20, 2, dtype=torch.float64)
    a = torch.randn(20, dtype=torch.float64)
    params = list(net.parameters())
    loss = mixture_nll(net(x), a)
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for j in range(flat.numel()):
                old = flat[j].item()
                flat[j] = old + h
                up = mixture_nll(net(x), a).item()
                flat[j] = old - h
                down = mixture_nll(net(x), a).item()
                flat[j] = old
                assert (up - down) / (2 * h) == pytest.approx(gflat[j].item(), rel=1e-4, abs=1e-8)


# serialization ------------------------------------------------------------------------


def test_serialization_round_trip(small_mdn):
    r = rng(20)
    x = r.normal(size=(200, 2))
    y = x[:, 0] - x[:, 1]
    ff = fit_regressor(x, y, FAST.with_(epochs=2))
    bt = fit_regressor(x, y, RegressorConfig(BOOSTED_TREES, n_trees=5, min_leaf=10))
    gd = fit_conditional_density(x, y, DensityConfig(BOOSTED_TREES, n_trees=5, min_leaf=10))
    cf = new_counterfactual_model(RegressorConfig(layer_widths=(8,)), 1, seed=1)
    fm = FixedMixture([0.3, 0.7], [0.0, 1.0], [1.0, 2.0])
    for model in (ff, bt):
        np.testing.assert_allclose(loads(dumps(model)).predict(x), model.predict(x), rtol=0, atol=1e-12)
    for dens in (small_mdn[0], gd, fm):
        back = loads(dumps(dens))
        for got, want in zip(back.mixture_params(x), dens.mixture_params(x)):
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(loads(dumps(cf)).value(x[:, :1], x[:, 1]), cf.value(x[:, :1], x[:, 1]), rtol=0, atol=1e-12)


def test_blob_version_checked():
    blob = '{"format": "dmliv.model", "version": 99, "class": "FixedMixture"}'
    with pytest.raises(ValueError, match="version"):
        loads(blob)
    with pytest.raises(ValueError):
        loads('{"format": "other"}')
