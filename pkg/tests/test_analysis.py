import json

import numpy as np
import pytest

from reweightlab.analysis import (FIGURE_KINDS, detect_phases, emit_figure_data, figure_csv,
                                  linearization_gap, linearization_gap_single, loglog_slope,
                                  predicted_t1, prop1_draw, prop1_monte_carlo)
from reweightlab.data import NoiseSpec, make_splits, to_pm1
from reweightlab.errors import ConfigError
from reweightlab.kernel import GramMatrix
from reweightlab.meta import MetaConfig, meta_train
from reweightlab.net import NetConfig
from reweightlab.trace import RunTrace, read_trace

from conftest import FIXTURES


def golden_inputs():
    return json.loads((FIXTURES / "golden_run" / "manifest.json").read_text())["summary"]["phase_inputs"]


class TestPhases:
    def test_golden(self):
        trace = read_trace(FIXTURES / "golden_run")
        inp = golden_inputs()
        rep = detect_phases(trace, inp["m"], inp["beta"], inp["gamma_hat"], inp["width"], inp["eta"])
        assert (rep.T1_emp, rep.T2_emp) == (5, 40)
        assert rep.early_bands and rep.filtering and rep.monotone
        assert rep.post_filter_onset == 50
        assert rep.T1_pred == pytest.approx(6.0)
        assert json.loads(rep.to_json()) == json.loads((FIXTURES / "golden_report.json").read_text())

    def test_all_clean_vacuous_filtering(self):
        sp = make_splits(60, 6, 2, 2, 4.0, NoiseSpec(), seed=0, spread=0.05)
        cfg = NetConfig.uniform(2, 512, 1, seed=1)
        res = meta_train(MetaConfig(eta=1e-3, beta=0.12, epochs=12), sp["train"], sp["clean_subset"], cfg)
        rep = detect_phases(res.trace, 6, 0.12, 0.05, 512, 1e-3)
        first_ones = next(t for t in range(13) if np.all(res.trace.weights[t] >= 1 - 1e-9))
        assert rep.T1_emp == first_ones
        assert rep.filtering and rep.post_filter_onset is None

    def test_never_polarizes(self):
        tr = RunTrace(np.arange(3), np.arange(2), np.array([False, True]), np.full((3, 2), 0.5),
                      np.zeros((3, 2)), np.zeros(3), np.zeros(3), np.arange(2), np.ones((3, 2)))
        rep = detect_phases(tr, 2, 0.1, 0.1, 64, 1e-3)
        assert rep.T1_emp is None and rep.T2_emp is None
        assert rep.filtering and rep.monotone and rep.early_bands

    def test_band_violation_and_missing_fields(self):
        W = np.array([[0.5, 0.5], [0.4, 0.6], [1.0, 0.0]])
        tr = RunTrace(np.arange(3), np.arange(2), np.array([False, True]), W, np.zeros((3, 2)),
                      np.zeros(3), np.zeros(3), np.arange(2), np.ones((3, 2)))
        rep = detect_phases(tr, 2, 0.1, 0.1, 64, 1e-3)
        assert rep.T1_emp == 2 and not rep.early_bands
        tr.val_residuals = None
        with pytest.raises(ConfigError):
            detect_phases(tr, 2, 0.1, 0.1, 64, 1e-3)

    def test_sign_flips_counted(self):
        V = np.array([[1.0], [0.01], [-0.01], [0.01]])
        tr = RunTrace(np.arange(4), np.arange(1), np.array([False]), np.ones((4, 1)), np.zeros((4, 1)),
                      np.zeros(4), np.zeros(4), np.arange(1), V)
        assert detect_phases(tr, 2, 0.1, 0.1, 10 ** 8, 1e-3).sign_flips == 2

    def test_t1_pred(self):
        assert predicted_t1(50, 0.12, 0.07) > 1
        with pytest.raises(ConfigError):
            predicted_t1(0, 0.1, 0.1)


class TestProp1:
    def test_constant_kernel_exact(self):
        res = prop1_monte_carlo((4, 8, 16), replicates=5, kernel="constant")
        assert np.all(res.median_c0 == 0) and np.all(res.median_S == 0)

    def test_draw_on_constant(self, rng):
        c0, S = prop1_draw(np.full((9, 3), 2.5), -rng.permutation(np.repeat([-1.0, 1.0], 4)))
        assert c0 == 0.0 and S == 0.0

    def test_feature_model_scaling(self):
        res = prop1_monte_carlo((64, 256, 1024), replicates=400, seed=1)
        assert 0.35 <= res.slope_S <= 0.65
        assert res.slope_ratio < 0
        assert len(res.rows()) == 3
        assert res.to_csv().count("\n") == 4

    def test_ntk_kernel_runs(self):
        res = prop1_monte_carlo((8, 16, 32), replicates=3, kernel="ntk", width=16, d_in=3)
        assert np.all(res.median_S > 0)

    def test_errors(self):
        with pytest.raises(ConfigError):
            prop1_monte_carlo((64, 65, 256))
        with pytest.raises(ConfigError):
            prop1_monte_carlo((256, 64, 1024))
        with pytest.raises(ConfigError):
            prop1_monte_carlo((64, 256), kernel="laplace")
        with pytest.raises(ConfigError):
            loglog_slope([1, 2], [1, 2])

    def test_slope(self):
        m = np.array([10.0, 100.0, 1000.0])
        assert loglog_slope(m, 3 * m ** 0.5) == pytest.approx(0.5)

    def test_deterministic(self):
        a = prop1_monte_carlo((8, 16, 32), replicates=10, seed=3)
        b = prop1_monte_carlo((8, 16, 32), replicates=10, seed=3)
        assert a.to_csv() == b.to_csv()


def lingap_data(seed=0, n=30):
    sp = make_splits(n, 10, 4, 2, 4.0, NoiseSpec(), seed=seed, n_test=10)
    tr = sp["train"]
    return tr.X, to_pm1(tr.y_clean), sp["test"].X


class TestLinGap:
    def test_zero_steps(self):
        X, y, P = lingap_data()
        assert linearization_gap_single(NetConfig.uniform(4, 64, 1, seed=0), X, y, P, 0.01, 0) == 0.0

    def test_width_trend(self):
        X, y, P = lingap_data()
        res = linearization_gap([64, 1024], X, y, P, 0.01, 20, seeds=(0, 1, 2))
        assert res.median[1] < res.median[0]
        assert res.to_csv().splitlines()[0] == "width,median_gap,gap_seed0,gap_seed1,gap_seed2"

    def test_eta_trend(self):
        X, y, P = lingap_data()
        cfg = NetConfig.uniform(4, 256, 1, seed=2)
        assert (linearization_gap_single(cfg, X, y, P, 0.005, 30)
                < linearization_gap_single(cfg, X, y, P, 0.01, 30))


def toy_trace(E=3, n=4, m=2):
    rng = np.random.default_rng(0)
    return RunTrace(np.arange(E), np.arange(n), np.array([False, True] * (n // 2)),
                    rng.uniform(size=(E, n)), rng.standard_normal((E, n)), np.zeros(E), np.zeros(E),
                    np.arange(m), rng.standard_normal((E, m)), rng.standard_normal((E, n)))


class TestFigures:
    def test_weight_dynamics_rows(self):
        text = figure_csv(toy_trace(), "weight_dynamics")
        assert len(text.splitlines()) == 1 + 3 * 4

    def test_hist_conserves_pairs(self, rng):
        g = GramMatrix(rng.standard_normal((6, 4)), np.arange(6), np.arange(4),
                       col_gram=rng.standard_normal((4, 4)))
        rows_l, cols_l = rng.integers(0, 2, 6), np.array([0, 0, 1, 1])
        for kind in ("ntk_hist", "centered_ntk_hist"):
            lines = figure_csv(g, kind, labels_rows=rows_l, labels_cols=cols_l, bins=9).splitlines()
            assert sum(int(line.split(",")[2]) for line in lines[1:]) == 6 * 4

    def test_mean_residual_all_clean_decreases(self):
        sp = make_splits(200, 20, 2, 2, 4.0, NoiseSpec(), seed=0, spread=0.05)
        cfg = NetConfig.uniform(2, 256, 1, seed=1)
        res = meta_train(MetaConfig(eta=1e-3, beta=0.12, epochs=60, diagnostics=False),
                         sp["train"], sp["clean_subset"], cfg)
        lines = figure_csv(res.trace, "mean_residual").splitlines()[1:]
        inf = np.array([float(line.split(",")[3]) for line in lines])
        assert np.all(np.diff(inf) <= 1e-12)
        assert inf[-1] < 0.5 * inf[0]

    def test_all_kinds_and_determinism(self, rng, tmp_path):
        tr = toy_trace()
        g = GramMatrix(rng.standard_normal((4, 2)), np.arange(4), np.arange(2),
                       col_gram=rng.standard_normal((2, 2)))
        labels = dict(labels_rows=np.array([0, 1, 0, 1]), labels_cols=np.array([0, 1]))
        for kind in FIGURE_KINDS:
            src = g if "hist" in kind else tr
            kw = labels if "hist" in kind else {}
            a = emit_figure_data(src, kind, tmp_path / "a", **kw).read_bytes()
            b = emit_figure_data(src, kind, tmp_path / "b", **kw).read_bytes()
            assert a == b
        assert len(list((tmp_path / "a").iterdir())) == 6

    def test_mismatch(self, rng):
        with pytest.raises(ConfigError):
            figure_csv(toy_trace(), "ntk_hist")
        with pytest.raises(ConfigError):
            figure_csv(GramMatrix(np.eye(2), np.arange(2), np.arange(2)), "weight_dynamics")
        with pytest.raises(ConfigError):
            figure_csv(toy_trace(), "scatter")
