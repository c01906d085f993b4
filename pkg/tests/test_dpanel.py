import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dynamic_panel, random_panel
from gfic.dpanel import (
    DpanelSpec,
    build_instruments,
    build_regressors,
    dpanel_bias_correct,
    estimate_dpanel_bias,
    fit_candidate,
    get_target,
    gfic_batch,
    gfic_dpanel,
    gfic_dpanel_details,
    permutation_matrix,
    robust_vcov,
    scores_vcov,
    select_batch,
    strict_vcov_valid,
    target_long_run,
    target_short_run,
    tsls_fit,
)
from gfic.engine import finite_difference_gradient
from gfic.errors import ConfigError, SingularDesign, TooFewPeriods, UnitRootTarget
from gfic.panel import PanelDataset, first_difference


def dense_block_diagonal(Z):
    n, P, w = Z.shape
    out = np.zeros((n * P, P * w))
    for i in range(n):
        for p in range(P):
            out[i * P + p, p * w : (p + 1) * w] = Z[i, p]
    return out


class TestSpec:
    @pytest.mark.parametrize(
        "label,lag,exog",
        [("LP", 1, "P"), ("LS", 1, "S"), ("P", 0, "P"), ("S", 0, "S"), ("L1", 1, "P"), ("L2", 2, "P"), ("L2S", 2, "S")],
    )
    def test_parse(self, label, lag, exog):
        s = DpanelSpec.parse(label, k=1)
        assert (s.lag, s.exog, s.label) == (lag, exog, label)

    def test_bad_label(self):
        with pytest.raises(ConfigError):
            DpanelSpec.parse("Q")

    @given(st.integers(0, 4), st.integers(2, 10), st.booleans())
    def test_moment_count(self, lag, T, strict):
        spec = DpanelSpec(lag, "S" if strict else "P")
        if T < lag + 2:
            with pytest.raises(TooFewPeriods):
                build_instruments(PanelDataset.from_arrays(np.zeros((1, T)), np.zeros((1, T))), spec)
            return
        blk = build_instruments(PanelDataset.from_arrays(np.zeros((2, T)), np.zeros((2, T))), spec)
        expected = (lag + (2 if strict else 1)) * (T - lag - 1)
        assert blk.n_moments == spec.n_moments(T) == expected
        assert blk.block_diagonal().shape == (2, T - lag - 1, expected)


class TestInstruments:
    def test_lag1_predetermined(self, rng):
        blk = build_instruments(random_panel(rng, T=5), DpanelSpec(1, "P"))
        assert blk.Z.shape[1:] == (3, 2) and blk.n_moments == 6

    def test_lag0_strict(self, rng):
        p = random_panel(rng, n=3, T=4)
        blk = build_instruments(p, DpanelSpec(0, "S"))
        assert blk.n_moments == 6
        for j, t in enumerate((2, 3, 4)):
            np.testing.assert_array_equal(blk.Z[:, j, 0], p.x[:, t - 2])
            np.testing.assert_array_equal(blk.Z[:, j, 1], p.x[:, t - 1])

    def test_lag2_index_oracle(self, rng):
        p = random_panel(rng, n=4, T=4)
        blk = build_instruments(p, DpanelSpec(2, "P"))
        assert blk.Z.shape == (4, 1, 3)
        y = lambda i, t: p.y[i, t - 1]  # 1-based periods
        x = lambda i, t: p.x[i, t - 1]
        for i in range(4):
            np.testing.assert_array_equal(blk.Z[i, 0], [y(i, 2), y(i, 1), x(i, 3)])

    def test_accepts_diff_panel(self, rng):
        p = random_panel(rng)
        a = build_instruments(first_difference(p), DpanelSpec(1, "S")).Z
        np.testing.assert_array_equal(a, build_instruments(p, DpanelSpec(1, "S")).Z)


class TestRegressors:
    def test_extended_period_design(self, rng):
        p = random_panel(rng, T=6)
        W2 = build_regressors(p, 2, full_k=2)
        W1 = build_regressors(p, 1, full_k=2)
        assert list(W2.periods) == [4, 5, 6]
        assert list(W1.periods) == [3, 4, 5, 6]
        assert W1.W.shape[1] == W2.W.shape[1] + 1
        assert W1.W.shape[2] == W2.W.shape[2] - 1

    def test_lag0_single_column(self, rng):
        p = random_panel(rng, T=4)
        W = build_regressors(p, 0)
        assert W.W.shape[2] == 1
        np.testing.assert_array_equal(W.W[..., 0], np.diff(p.x, axis=1))

    def test_loop_oracle(self, rng):
        p = random_panel(rng, n=3, T=6)
        blk = build_regressors(p, 2)
        for i in range(3):
            for j, t in enumerate(blk.periods):
                dy = lambda s: p.y[i, s - 1] - p.y[i, s - 2]
                dx = p.x[i, t - 1] - p.x[i, t - 2]
                np.testing.assert_array_equal(blk.W[i, j], [dx, dy(t - 1), dy(t - 2)])
                assert blk.dy[i, j] == dy(t)

    def test_too_few_periods(self, rng):
        with pytest.raises(TooFewPeriods):
            build_regressors(random_panel(rng, T=3), 2)


class TestTsls:
    def test_exact_identification_is_iv(self, rng):
        n = 40
        Z, W = rng.normal(size=(n, 1, 2)), rng.normal(size=(n, 1, 2))
        dy = rng.normal(size=(n, 1))
        fit = tsls_fit(Z, W, dy)
        direct = np.linalg.solve(Z[:, 0].T @ W[:, 0], Z[:, 0].T @ dy[:, 0])
        np.testing.assert_allclose(fit.beta_hat, direct, atol=1e-10)

    def test_noiseless_recovery(self, rng):
        Z, W = rng.normal(size=(50, 3, 3)), rng.normal(size=(50, 3, 2))
        b0 = np.array([0.5, -0.25])
        fit = tsls_fit(Z, W, W @ b0)
        np.testing.assert_allclose(fit.beta_hat, b0, atol=1e-10)

    def test_two_stage_oracle(self, rng):
        p = dynamic_panel(rng, n=50, T=5)
        fit = fit_candidate(p, DpanelSpec(1, "S"))
        Zd = dense_block_diagonal(fit.Z)
        Wd = fit.W.reshape(-1, 2)
        dyd = fit.dy.ravel()
        fitted = Zd @ np.linalg.lstsq(Zd, Wd, rcond=None)[0]
        beta = np.linalg.lstsq(fitted, dyd, rcond=None)[0]
        np.testing.assert_allclose(fit.beta_hat, beta, rtol=1e-8, atol=1e-10)
        # normal equations of the estimator
        Pz = Zd @ np.linalg.solve(Zd.T @ Zd, Zd.T)
        ne = Wd.T @ Pz @ (dyd - Wd @ fit.beta_hat)
        assert np.abs(ne).max() < 1e-8 * max(1.0, np.abs(Wd.T @ Pz @ dyd).max())

    def test_q_matrix(self, rng):
        p = dynamic_panel(rng, n=60, T=5)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        n = 60
        Zd = dense_block_diagonal(fit.Z)
        Wd = fit.W.reshape(-1, 2)
        A = Wd.T @ Zd @ np.linalg.inv(Zd.T @ Zd)
        Q = n * np.linalg.inv(A @ Zd.T @ Wd) @ A
        np.testing.assert_allclose(fit.Q_hat, Q, rtol=1e-8)
        np.testing.assert_allclose(fit.beta_hat, fit.Q_hat @ (Zd.T @ fit.dy.ravel() / n), rtol=1e-8)

    def test_singular_instruments(self, rng):
        Z = np.zeros((20, 2, 2))
        with pytest.raises(SingularDesign, match="Z'Z"):
            tsls_fit(Z, rng.normal(size=(20, 2, 2)), rng.normal(size=(20, 2)))

    def test_one_more_period_without_lag(self, rng):
        p = dynamic_panel(rng, n=40, T=5)
        with_lag, without = fit_candidate(p, DpanelSpec(1, "P")), fit_candidate(p, DpanelSpec(0, "P"))
        assert without.n_periods == with_lag.n_periods + 1
        assert without.t_range == (2, 5) and with_lag.t_range == (3, 5)

    def test_minimal_strict_design(self, rng):
        fit = fit_candidate(random_panel(rng, n=30, T=3), DpanelSpec(0, "S"))
        assert fit.V_hat.shape == (4, 4)


class TestRobustVcov:
    def test_zero_residuals(self, rng):
        fit = fit_candidate(dynamic_panel(rng, n=30), DpanelSpec(1, "P"))
        fit = dataclasses.replace(fit, residuals=np.zeros_like(fit.residuals))
        assert not robust_vcov(fit).any()

    def test_centering_removes_constants(self):
        S = np.tile([1.0, -2.0, 3.0], (10, 1))
        assert np.abs(scores_vcov(S, True)).max() < 1e-15

    @pytest.mark.parametrize("label", ["LP", "LS"])
    def test_loop_oracle(self, rng, label):
        fit = fit_candidate(dynamic_panel(rng, n=20), DpanelSpec.parse(label))
        Zi = fit.Z  # (n, P, w)
        g = np.array([np.concatenate([Zi[i, p] * fit.residuals[i, p] for p in range(Zi.shape[1])]) for i in range(20)])
        m = g.mean(axis=0) if fit.spec.strict else np.zeros(g.shape[1])
        V = np.zeros((g.shape[1], g.shape[1]))
        for i in range(20):
            V += np.outer(g[i] - m, g[i] - m)
        np.testing.assert_allclose(fit.V_hat, V / 20, atol=1e-10)
        assert np.array_equal(fit.V_hat, fit.V_hat.T)
        assert np.linalg.eigvalsh(fit.V_hat).min() > -1e-10


class TestBias:
    def test_tau_zero_when_orthogonal(self, rng):
        p = dynamic_panel(rng, n=50)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        xk = p.x[:, 2:].ravel()
        r = fit.residuals.ravel()
        r = r - xk * (xk @ r) / (xk @ xk)
        db = estimate_dpanel_bias(dataclasses.replace(fit, residuals=r.reshape(fit.residuals.shape)), p, 1, 1)
        assert abs(db.tau_hat) < 1e-12

    def test_delta_arithmetic(self, rng):
        p = dynamic_panel(rng, n=400)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        fit = dataclasses.replace(fit, beta_hat=np.array([0.5, 0.03]))
        db = estimate_dpanel_bias(fit, p, 1, 1)
        assert db.delta_hat[0] == pytest.approx(0.6, abs=1e-12)

    def test_tau_formula(self, rng):
        p = dynamic_panel(rng, n=80, T=6)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        db = estimate_dpanel_bias(fit, p, 1, 1)
        per_period = [(p.x[:, t - 1] * fit.residuals[:, j]).sum() / np.sqrt(80) for j, t in enumerate(range(3, 7))]
        assert db.tau_hat == pytest.approx(np.mean(per_period), rel=1e-12)

    def test_permutation_oracle(self):
        k, Tk = 1, 2  # k = 1, T = 4
        w = k + 2
        strict = [f"t{t}:{name}" for t in range(Tk) for name in ("y_lag2", "x_lag1", "x_now")]
        wanted = [f"t{t}:{name}" for t in range(Tk) for name in ("y_lag2", "x_lag1")] + [f"t{t}:x_now" for t in range(Tk)]
        Pi = permutation_matrix(k, Tk)
        assert Pi.shape == (w * Tk, w * Tk)
        assert set(np.unique(Pi)) == {0.0, 1.0}
        assert (Pi.sum(axis=0) == 1).all() and (Pi.sum(axis=1) == 1).all()
        assert np.array_equal(Pi @ Pi.T, np.eye(w * Tk))
        reordered = [strict[int(np.flatnonzero(row)[0])] for row in Pi]
        assert reordered == wanted

    @given(st.integers(0, 3), st.integers(1, 6))
    def test_permutation_orthogonal(self, k, Tk):
        Pi = permutation_matrix(k, Tk)
        assert np.array_equal(Pi @ Pi.T, np.eye(Pi.shape[0]))

    def test_psi_dimensions(self, rng):
        p = dynamic_panel(rng, n=60, T=6)
        fit = fit_candidate(p, DpanelSpec(2, "P"))
        db = estimate_dpanel_bias(fit, p, 2, 1)
        assert db.psiP_hat.shape == (2, 1)
        assert db.psiS_hat.shape == (1,)
        assert db.Psi_hat.shape == (2, 4 * 3)

    def test_correction_zero_variance(self, rng):
        p = dynamic_panel(rng, n=60)
        db = estimate_dpanel_bias(fit_candidate(p, DpanelSpec(1, "P")), p, 1, 1)
        c = dpanel_bias_correct(db, np.zeros((9, 9)))
        assert c.delta_delta[0, 0] == db.delta_hat[0] ** 2
        assert c.tau_tau == db.tau_hat**2
        assert c.delta_tau[0] == db.delta_hat[0] * db.tau_hat

    def test_correction_pure_noise(self, rng):
        p = dynamic_panel(rng, n=60)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        db = estimate_dpanel_bias(fit, p, 1, 1)
        db0 = dataclasses.replace(db, delta_hat=np.zeros(1), tau_hat=0.0)
        V = strict_vcov_valid(fit, p)
        corr = db.Psi_hat @ db.Pi @ V @ db.Pi.T @ db.Psi_hat.T
        np.testing.assert_allclose(dpanel_bias_correct(db0, V).B, -0.5 * (corr + corr.T), atol=1e-14)

    def test_too_few_periods(self, rng):
        p = dynamic_panel(rng, n=30, T=3)
        fit = fit_candidate(p, DpanelSpec(1, "P"))
        with pytest.raises(TooFewPeriods):
            estimate_dpanel_bias(fit, p.window(1, 2), 1, 1)


class TestTargets:
    def test_long_run_example(self):
        t = target_long_run()
        assert t([0.5, 0.4]) == pytest.approx(0.5 / 0.6, rel=1e-15)
        np.testing.assert_allclose(t.gradient(np.array([0.5, 0.4])), [1 / 0.6, 0.5 / 0.36], rtol=1e-14)

    def test_zero_lags(self):
        t = target_long_run()
        assert t([0.7, 0.0, 0.0]) == 0.7
        np.testing.assert_allclose(t.gradient(np.array([0.7, 0.0, 0.0])), [1.0, 0.7, 0.7])

    def test_short_run(self):
        t = target_short_run()
        assert t([0.3, 0.9]) == 0.3
        np.testing.assert_array_equal(t.gradient(np.array([0.3, 0.9])), [1.0, 0.0])

    def test_unit_root(self):
        with pytest.raises(UnitRootTarget):
            target_long_run()([0.5, 0.6, 0.4])

    @settings(max_examples=300)
    @given(st.floats(-3, 3), st.lists(st.floats(-0.9, 0.9), min_size=1, max_size=3))
    def test_gradient_finite_differences(self, theta, gammas):
        beta = np.array([theta, *gammas])
        if abs(1 - sum(gammas)) <= 1e-3:
            return
        t = target_long_run()
        fd = finite_difference_gradient(t, beta, h=1e-7)
        np.testing.assert_allclose(fd, t.gradient(beta), rtol=1e-6, atol=1e-9)

    def test_get_target(self):
        assert get_target("long-run").name == "LR"
        with pytest.raises(ConfigError):
            get_target("medium")


class TestGfic:
    def test_valid_spec_has_no_bias_term(self, rng):
        scores = gfic_dpanel(dynamic_panel(rng, n=300), ["LP", "LS", "P", "S"], "SR", 1)
        lp = next(s for sp, s in scores.items() if sp.label == "LP")
        assert lp.sq_bias == 0.0
        assert lp.gfic == lp.avar

    def test_batched_equals_looped(self, rng):
        from gfic.mclab import DpanelDgp

        dgp = DpanelDgp(n=100, T=5)
        Y, X = dgp.transform(rng.standard_normal((3, 100, dgp.dim())))
        gb = gfic_batch(Y, X, ["LP", "LS", "P", "S"], "LR", 1)
        for r in range(3):
            one = gfic_batch(Y[r], X[r], ["LP", "LS", "P", "S"], "LR", 1)
            for lab in gb.labels:
                assert gb.gfic(lab)[r] == pytest.approx(float(one.gfic(lab)), rel=1e-10, abs=1e-12)
            assert select_batch(gb)[r] == int(select_batch(one))

    def test_period_boundary(self, rng):
        p = dynamic_panel(rng, n=100, T=4)
        res = gfic_dpanel_details(p, ["L2", "L1", "P"], "SR", 2)
        assert {s.label for s in res.scores} == {"L2", "L1", "P"} and not res.errors
        with pytest.raises(TooFewPeriods):
            gfic_dpanel(p.window(1, 3), ["L2", "P"], "SR", 2)

    def test_lag_above_ceiling(self, rng):
        with pytest.raises(ConfigError):
            gfic_dpanel(dynamic_panel(rng), ["L2"], "SR", 1)

    def test_selection_runs_end_to_end(self, rng):
        res = gfic_dpanel_details(dynamic_panel(rng, n=300), ["LP", "LS", "P", "S"], "SR", 1)
        assert res.select("gfic").label in {"LP", "LS", "P", "S"}
        assert res.bias.B.shape == (2, 2)
        assert np.array_equal(res.bias.B, res.bias.B.T)
