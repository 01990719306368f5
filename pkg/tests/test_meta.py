import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reweightlab.data import NoiseSpec, make_splits, to_pm1
from reweightlab.errors import ConfigError, DivergenceError
from reweightlab.meta import (MetaConfig, hypergrad, hypergrad_fd, init_gram, measured_margin,
                              meta_train, pseudo_update, relative_error, residuals, val_objective,
                              weight_step)
from reweightlab.analysis import predicted_t1
from reweightlab.net import NetConfig, forward, init_network, jacobian, weighted_sgd_step

from conftest import perturbed, tiny_problem


def explicit_hypergrad(p, X, y, Xv, yv, w, eta):
    """Chain rule with materialized Jacobians, independent of the VJP/JVP path."""
    J = jacobian(p, X).values
    u = forward(p, X) - y
    theta_hat = p.flat() - eta * J @ (w * u)
    ph = type(p).from_flat(p.config, theta_hat)
    Jv = jacobian(ph, Xv).values
    uv = forward(ph, Xv) - yv
    return -eta * u * (J.T @ (Jv @ uv))


class TestPseudoUpdate:
    def test_zero_weights(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        assert np.array_equal(pseudo_update(p, X, y, np.zeros(len(y)), 1e-3).flat(), p.flat())

    def test_equals_sgd_step(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        a = pseudo_update(p, X, y, w, 1e-3).flat()
        b = weighted_sgd_step(p, X, y, w, 1e-3).flat()
        assert np.array_equal(a, b)

    def test_linear_in_w(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        w2 = rng.uniform(0, 1, len(w)) * 0.5
        base = p.flat()
        lhs = pseudo_update(p, X, y, w + w2, 1e-3).flat() - base
        rhs = (pseudo_update(p, X, y, w, 1e-3).flat() - base) + (pseudo_update(p, X, y, w2, 1e-3).flat() - base)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_pure(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        before = p.flat().copy()
        pseudo_update(p, X, y, w, 0.1)
        assert np.array_equal(p.flat(), before)


class TestHypergrad:
    def test_zero_when_clean_set_fit(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        yv_fit = forward(pseudo_update(p, X, y, w, 1e-3), Xv)
        g, _ = hypergrad(p, X, y, Xv, yv_fit, w, 1e-3)
        assert np.all(g == 0.0)

    def test_tiny_instance_fd(self, rng):
        cfg = NetConfig.uniform(3, 8, 1, seed=11)
        p = perturbed(cfg, 0.3, 11)
        X, Xv = rng.uniform(-0.5, 0.5, (4, 3)), rng.uniform(-0.5, 0.5, (2, 3))
        y, yv = np.array([1.0, -1.0, 1.0, -1.0]), np.array([1.0, -1.0])
        w = np.full(4, 0.5)
        g, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3)
        assert relative_error(g, hypergrad_fd(p, X, y, Xv, yv, w, 1e-3, step=1e-6)) <= 1e-6

    def test_matches_explicit_jacobian_oracle(self, rng):
        for _ in range(20):
            p, X, y, Xv, yv, w = tiny_problem(rng)
            g, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3)
            ref = explicit_hypergrad(p, X, y, Xv, yv, w, 1e-3)
            assert np.max(np.abs(g - ref)) <= 1e-12 * max(1.0, np.max(np.abs(ref))) + 1e-18

    def test_fd_oracle_many_instances(self, rng):
        worst = 0.0
        for _ in range(50):
            p, X, y, Xv, yv, w = tiny_problem(rng)
            g, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3)
            worst = max(worst, relative_error(g, hypergrad_fd(p, X, y, Xv, yv, w, 1e-3)))
        assert worst <= 1e-6

    def test_backends(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        K0 = jacobian(p, X).values.T @ jacobian(p, Xv).values
        g_e, diag = hypergrad(p, X, y, Xv, yv, w, 1e-3, "exact", K0, diagnostics=True)
        g_f, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3, "first_order")
        g_n, _ = hypergrad(p, X, y, Xv, yv, w, 1e-3, "ntk_frozen", K0)
        assert np.array_equal(diag.g_exact, g_e)
        assert np.array_equal(diag.g_first_order, g_f)
        assert np.array_equal(diag.g_ntk, g_n)
        # K0 taken at the current parameters: first-order and NTK agree
        assert diag.e2_norm <= 1e-12 * np.max(np.abs(g_f))
        assert diag.e1_norm == np.max(np.abs(g_e - g_f))

    def test_backend_errors(self, rng):
        p, X, y, Xv, yv, w = tiny_problem(rng)
        with pytest.raises(ConfigError):
            hypergrad(p, X, y, Xv, yv, w, 1e-3, "ntk_frozen")
        with pytest.raises(ConfigError):
            hypergrad(p, X, y, Xv, yv, w, 1e-3, "second_order")
        with pytest.raises(ConfigError):
            hypergrad(p, X, y, Xv[:0], yv[:0], w, 1e-3)

    def test_initial_sign_on_clusters(self):
        sp = make_splits(200, 20, 2, 2, 4.0, NoiseSpec("symmetric", 0.4, stratified=True), seed=1,
                         spread=0.05)
        train, clean = sp["train"], sp["clean_subset"]
        p = init_network(NetConfig.uniform(2, 2048, 1, seed=5))
        g, _ = hypergrad(p, train.X, to_pm1(train.y_observed), clean.X, to_pm1(clean.y_observed),
                         np.full(train.n, 0.5), 1e-3)
        assert np.all(g[~train.noise_mask] < 0)
        assert np.all(g[train.noise_mask] > 0)

    def test_e1_quadratic_in_eta(self):
        sp = make_splits(100, 10, 2, 2, 4.0, NoiseSpec("symmetric", 0.4, stratified=True), seed=2,
                         spread=0.05)
        train, clean = sp["train"], sp["clean_subset"]
        cfg = NetConfig.uniform(2, 256, 1, seed=3)
        res = meta_train(MetaConfig(eta=1e-3, beta=0.12, epochs=5, diagnostics=False), train, clean, cfg)
        args = (res.params, train.X, to_pm1(train.y_observed), clean.X, to_pm1(clean.y_observed),
                res.trace.weights[-1])
        e1 = [hypergrad(*args, eta, diagnostics=True)[1].e1_norm for eta in (1e-2, 5e-3, 2.5e-3)]
        assert e1[0] / e1[1] >= 3 and e1[1] / e1[2] >= 3


class TestWeightStep:
    def test_examples(self):
        assert weight_step([0.5], [0.0], 10.0)[0] == 0.5
        assert weight_step([0.9], [-0.05], 10.0)[0] == 1.0
        assert weight_step([0.2], [0.07], 10.0)[0] == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20),
           st.floats(-1e6, 1e6), st.floats(0, 1e3))
    def test_clipping_safety(self, w, g, alpha):
        out = weight_step(w, np.full(len(w), g), alpha)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestConfig:
    def test_alpha_coupling(self):
        cfg = MetaConfig(eta=1e-3, beta=0.05)
        assert cfg.alpha * cfg.eta == pytest.approx(0.05)

    @pytest.mark.parametrize("kw", [{"eta": 0}, {"beta": -1}, {"backend": "x"}, {"epochs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            MetaConfig(**kw)

    def test_predicted_t1_arithmetic(self):
        assert predicted_t1(10, 0.01, 0.5) == pytest.approx(21.0)
        assert predicted_t1(10, 0.01, 0.0) == float("inf")


def small_run(noise=0.4, epochs=20, width=1024, seed=0, n=100, m=10, **kw):
    sp = make_splits(n, m, 2, 2, 4.0, NoiseSpec("symmetric", noise, stratified=True), seed=seed,
                     spread=0.05)
    train, clean = sp["train"], sp["clean_subset"]
    cfg = NetConfig.uniform(2, width, 1, seed=seed + 7)
    mc = MetaConfig(eta=1e-3, beta=0.12, epochs=epochs, **kw)
    return train, clean, cfg, meta_train(mc, train, clean, cfg)


class TestMetaTrain:
    def test_trace_shapes_and_init_residual(self):
        train, clean, cfg, res = small_run(epochs=4)
        tr = res.trace
        assert tr.weights.shape == (5, train.n) and tr.val_residuals.shape == (5, clean.n)
        assert np.array_equal(tr.residuals[0], -to_pm1(train.y_observed))
        assert np.array_equal(tr.val_residuals[0], -to_pm1(clean.y_observed))
        assert np.all(tr.weights[0] == 0.5)
        assert np.all((tr.weights >= 0) & (tr.weights <= 1))
        assert np.all(np.isfinite(tr.e1)) and np.all(np.isfinite(tr.e2))
        assert tr.e2[0] <= 1e-15

    def test_epoch_ordering(self):
        """Row t+1 weights come from the hypergradient at row t; the step uses them."""
        train, clean, cfg, res = small_run(epochs=2, width=64)
        tr = res.trace
        p0 = init_network(cfg)
        X, y = train.X, to_pm1(train.y_observed)
        g0, _ = hypergrad(p0, X, y, clean.X, to_pm1(clean.y_observed), tr.weights[0], 1e-3)
        w1 = weight_step(tr.weights[0], g0, 0.12 / 1e-3)
        assert np.array_equal(w1, tr.weights[1])
        p1 = weighted_sgd_step(p0, X, y, w1, 1e-3)
        assert np.allclose(forward(p1, X) - y, tr.residuals[1], atol=1e-14)
        assert np.array_equal(tr.directions[0], -g0)

    def test_all_clean_polarizes(self):
        train, clean, cfg, res = small_run(noise=0.0, epochs=15)
        gamma = measured_margin(init_network(cfg), train, clean)
        t1 = int(np.ceil(predicted_t1(clean.n, 0.12, gamma)))
        assert t1 <= 15
        assert np.all(res.trace.weights[t1:] == 1.0)

    def test_divergence_guard(self):
        sp = make_splits(40, 4, 2, 2, 4.0, NoiseSpec(), seed=0, spread=0.05)
        cfg = NetConfig.uniform(2, 64, 1, seed=0)
        mc = MetaConfig(eta=5.0, beta=0.1, epochs=50)
        with pytest.raises(DivergenceError) as info:
            meta_train(mc, sp["train"], sp["clean_subset"], cfg)
        assert info.value.epoch >= 1
        res = meta_train(mc, sp["train"], sp["clean_subset"], cfg, raise_on_divergence=False)
        assert res.diverged is not None
        assert len(res.trace.epochs) == res.diverged.epoch + 1

    def test_ntk_backend_uses_init_gram(self):
        train, clean, cfg, res = small_run(epochs=3, width=128, backend="ntk_frozen", diagnostics=False)
        K0 = init_gram(init_network(cfg), train, clean)
        assert np.array_equal(res.K0, K0)

    def test_rejects_multiclass(self):
        sp = make_splits(30, 3, 3, 3, 4.0, NoiseSpec(), seed=0)
        with pytest.raises(ConfigError):
            meta_train(MetaConfig(), sp["train"], sp["clean_subset"], NetConfig.uniform(3, 8))

    def test_deterministic(self):
        a = small_run(epochs=5, width=128)[3].trace
        b = small_run(epochs=5, width=128)[3].trace
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.val_residuals, b.val_residuals)


def test_objective_and_residuals(rng):
    p, X, y, Xv, yv, w = tiny_problem(rng)
    uv = residuals(p, Xv, yv)
    assert val_objective(p, Xv, yv) == pytest.approx(0.5 * uv @ uv)
