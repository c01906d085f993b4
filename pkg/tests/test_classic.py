import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfic.classic import (
    fe_weight,
    re_covariance,
    re_precision,
    refe_arrays,
    refe_average,
    refe_fit,
    refe_select,
    refe_select_arrays,
    slopehet_arrays,
    slopehet_fit,
    slopehet_select,
    slopehet_select_arrays,
    within_projector,
)
from gfic.errors import ConfigError, DegenerateSigma, NoWithinVariation, ZeroIndividualVariation
from gfic.mclab import ReFeDgp, SlopeHetDgp, draw_batch
from gfic.panel import PanelDataset


class TestReFeAlgebra:
    @pytest.mark.parametrize("T", [2, 3, 7])
    def test_within_annihilates_constants(self, T):
        np.testing.assert_allclose(within_projector(T) @ np.ones(T), 0.0, atol=1e-15)

    def test_fe_invariant_to_effects(self, rng):
        y, x = rng.normal(size=(2, 40, 4))
        shifted = y + rng.normal(size=(40, 1)) * 10
        assert refe_arrays(shifted, x)["beta_fe"] == pytest.approx(refe_arrays(y, x)["beta_fe"], rel=1e-12)

    @given(st.integers(2, 8), st.floats(0, 10), st.floats(0.01, 10))
    def test_precision_inverts_covariance(self, T, sa, se):
        np.testing.assert_allclose(re_precision(T, sa, se) @ re_covariance(T, sa, se), np.eye(T), atol=1e-9)

    def test_truncated_alpha_gives_ols(self, rng):
        # residuals alternate within each individual, so between variation is nil
        n, T = 30, 4
        x = rng.normal(size=(n, T))
        y = 0.5 * x + np.tile([1.0, -1.0], (n, T // 2))
        f = refe_fit(PanelDataset.from_arrays(y, x))
        assert f.alpha_truncated and f.sigma2_alpha == 0.0
        assert f.beta_re == pytest.approx(f.beta_ols, rel=1e-12)

    def test_noiseless(self, rng):
        x = rng.normal(size=(20, 3))
        r = refe_arrays(0.8 * x, x)
        assert r["beta_fe"] == pytest.approx(0.8, abs=1e-14)
        assert r["beta_ols"] == pytest.approx(0.8, abs=1e-14)
        with pytest.raises(DegenerateSigma):
            refe_fit(PanelDataset.from_arrays(0.8 * x, x))
        f = refe_fit(PanelDataset.from_arrays(0.8 * x + 1e-8 * rng.normal(size=x.shape), x))
        assert f.beta_re == pytest.approx(0.8, abs=1e-7)
        assert abs(f.tau_hat) < 1e-6

    def test_no_within_variation(self):
        x = np.repeat([[1.0], [2.0], [3.0]], 3, axis=1)
        with pytest.raises(NoWithinVariation):
            refe_fit(PanelDataset.from_arrays(x + np.arange(3), x))

    def test_tau_centered_when_valid(self):
        dgp = ReFeDgp(n=200, T=2)
        Y, X = draw_batch(dgp, 8, 0, range(2000))
        tau = refe_arrays(Y, X)["tau_hat"]
        assert abs(tau.mean()) < 3 * tau.std() / math.sqrt(tau.size)

    def test_batched_matches_single(self, rng):
        Y, X = draw_batch(ReFeDgp(n=50, T=3, gamma=0.3), 2, 0, range(3))
        rb = refe_arrays(Y, X)
        for r in range(3):
            f = refe_fit(PanelDataset.from_arrays(Y[r], X[r]))
            assert f.tau_hat == pytest.approx(rb["tau_hat"][r], rel=1e-12)


def fit_with(tau, s2tau, rng=np.random.default_rng(0)):
    base = refe_fit(PanelDataset.from_arrays(rng.normal(size=(10, 3)), rng.normal(size=(10, 3))))
    return dataclasses.replace(base, tau_hat=tau, sigma2_tau=s2tau)


class TestReFeSelection:
    @pytest.mark.parametrize("tau,expected", [(0.0, "RE"), (2.0, "FE"), (math.sqrt(2.0), "RE"), (-2.0, "FE")])
    def test_examples(self, tau, expected):
        assert refe_select(fit_with(tau, 1.0)) == expected

    @pytest.mark.parametrize("s2", [0.0, -1.0, float("nan")])
    def test_degenerate(self, s2):
        with pytest.raises(DegenerateSigma):
            refe_select(fit_with(1.0, s2))

    @pytest.mark.parametrize("tau2,re_weight", [(1.0, 1.0), (2.0, 0.5), (3.0, 1 / 3), (0.2, 1.0)])
    def test_weights(self, tau2, re_weight):
        a = refe_average(fit_with(math.sqrt(tau2), 1.0))
        assert a.omega_literal == pytest.approx(re_weight, abs=1e-15)
        assert a.omega == pytest.approx(1 - re_weight, abs=1e-15)

    def test_average_is_convex_combination(self):
        f = fit_with(2.0, 1.0)
        a = refe_average(f)
        assert a.mu == pytest.approx(0.75 * f.beta_fe + 0.25 * f.beta_re, rel=1e-14)

    @given(st.floats(0, 20), st.floats(0, 20), st.floats(0.01, 5))
    def test_fe_weight_monotone(self, t1, t2, s2):
        lo, hi = sorted((t1, t2))
        assert fe_weight(lo, s2) <= fe_weight(hi, s2)
        assert 0.0 <= fe_weight(hi, s2) < 1.0

    def test_select_vectorized(self):
        np.testing.assert_array_equal(refe_select_arrays([0.0, 2.0, -1.0], [1.0, 1.0, 1.0]), [True, False, True])


def slopehet_oracle(y, x):
    """Loop-level reference for the OLS / mean-group plug-ins."""
    n, T = y.shape
    b = [sum(x[i, t] * y[i, t] for t in range(T)) / sum(x[i, t] ** 2 for t in range(T)) for i in range(n)]
    xx = [sum(x[i, t] ** 2 for t in range(T)) for i in range(n)]
    mg = sum(b) / n
    ols = sum(x[i, t] * y[i, t] for i in range(n) for t in range(T)) / sum(xx)
    s2e = sum((y[i, t] - b[i] * x[i, t]) ** 2 for i in range(n) for t in range(T)) / (n * (T - 1))
    kappa = sum(xx) / n
    zeta = sum(1 / v for v in xx) / n
    lam2 = sum((v - kappa) ** 2 for v in xx) / (n - 1)
    s2eta = sum((bi - mg) ** 2 for bi in b) / (n - 1) - s2e * zeta
    tau = sum(xx[i] * (b[i] - mg) for i in range(n)) / math.sqrt(n)
    return dict(beta_ols=ols, beta_mg=mg, sigma2_eps_hat=s2e, kappa_hat=kappa, zeta_hat=zeta,
                lambda2_hat=lam2, sigma2_eta_hat=s2eta, tau_hat=tau)


class TestSlopeHet:
    def test_small_hand_case(self):
        y = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 1.5]])
        x = np.array([[1.0, 1.5], [2.0, -0.5], [0.5, 1.0]])
        f = slopehet_fit(PanelDataset.from_arrays(y, x))
        for k, v in slopehet_oracle(y, x).items():
            assert getattr(f, k) == pytest.approx(v, rel=1e-12, abs=1e-14), k

    def test_random_case_matches_oracle(self, rng):
        y, x = rng.normal(size=(2, 12, 5))
        f = slopehet_fit(PanelDataset.from_arrays(y, x))
        for k, v in slopehet_oracle(y, x).items():
            assert getattr(f, k) == pytest.approx(v, rel=1e-10, abs=1e-12), k

    def test_mg_is_mean_of_slopes(self, rng):
        y, x = rng.normal(size=(2, 8, 4))
        b = (x * y).sum(axis=1) / (x * x).sum(axis=1)
        assert slopehet_fit(PanelDataset.from_arrays(y, x)).beta_mg == pytest.approx(b.mean(), rel=1e-13)

    def test_equal_norms_give_equal_estimates(self, rng):
        x = rng.normal(size=(6, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.normal(size=(6, 4))
        f = slopehet_fit(PanelDataset.from_arrays(y, x))
        assert f.beta_ols == pytest.approx(f.beta_mg, rel=1e-12)

    def test_heterogeneity_variance_centered(self):
        Y, X = draw_batch(SlopeHetDgp(n=100, T=5), 4, 0, range(2000))
        s = slopehet_arrays(Y, X)["sigma2_eta_hat"]
        assert abs(s.mean()) < 3 * s.std() / math.sqrt(s.size)

    def test_zero_variation(self):
        x = np.ones((3, 2))
        x[1] = 0.0
        p = PanelDataset.from_arrays(np.ones((3, 2)), x, ids=["a", "b", "c"])
        with pytest.raises(ZeroIndividualVariation, match="'b'"):
            slopehet_fit(p)

    def test_unknown_sigma_method(self, rng):
        with pytest.raises(ConfigError):
            slopehet_arrays(*rng.normal(size=(2, 4, 3)), sigma_eps="median")

    @pytest.mark.parametrize(
        "r,ols",
        [
            # MG variance no larger: MG without looking at the bias
            (dict(kappa_hat=1.0, zeta_hat=1.0, lambda2_hat=0.0, sigma2_eta_hat=0.0, sigma2_eps_hat=1.0, tau_hat=0.0, sigma2_tau_hat=0.0), False),
            # OLS more precise and unbiased
            (dict(kappa_hat=2.0, zeta_hat=1.0, lambda2_hat=0.5, sigma2_eta_hat=0.0, sigma2_eps_hat=1.0, tau_hat=0.0, sigma2_tau_hat=0.1), True),
            # OLS more precise but the squared bias outweighs the gain
            (dict(kappa_hat=2.0, zeta_hat=1.0, lambda2_hat=0.5, sigma2_eta_hat=0.0, sigma2_eps_hat=1.0, tau_hat=3.0, sigma2_tau_hat=0.1), False),
        ],
    )
    def test_select_branches(self, r, ols):
        assert bool(slopehet_select_arrays(r)) is ols

    def test_select_labels(self, rng):
        Y, X = draw_batch(SlopeHetDgp(n=200, T=5, sigma2_eta=0.0), 1, 0, [0])
        f = slopehet_fit(PanelDataset.from_arrays(Y[0], X[0]))
        assert slopehet_select(f) in ("OLS", "MG")
        assert f.avar_ols <= f.avar_mg + 1e-12 or slopehet_select(f) == "MG"

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_avars_positive(self, seed):
        r = np.random.default_rng(seed)
        f = slopehet_fit(PanelDataset.from_arrays(r.normal(size=(10, 3)), r.normal(size=(10, 3))))
        assert f.avar_ols > 0 and f.avar_mg > 0
