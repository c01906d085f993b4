"""Two textbook selection problems handled with the same AMSE logic.

* Random effects GLS versus fixed effects (within) estimation of a scalar slope
  when the regressor may be correlated with the individual effect.
* Pooled OLS versus the mean-group estimator of an average slope under slope
  heterogeneity.

The array routines accept leading batch axes (``(..., n, T)``) so Monte Carlo
replications can be evaluated in one pass; the panel-level wrappers validate
inputs and raise on degenerate data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateSigma, NoWithinVariation, TooFewPeriods, ZeroIndividualVariation
from .panel import PanelDataset

RE, FE = "RE", "FE"
OLS, MG = "OLS", "MG"


def _yx(panel) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(panel, PanelDataset):
        return panel.y, panel.x
    y, x = panel
    return np.asarray(y, dtype=float), np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# random versus fixed effects


def within_projector(T: int) -> np.ndarray:
    """``Q = I - ii'/T``."""
    return np.eye(T) - np.full((T, T), 1.0 / T)


def re_precision(T: int, sigma2_alpha, sigma2_eps) -> np.ndarray:
    """Closed-form inverse of the equicorrelated error covariance, batched over
    the variance components."""
    sa = np.asarray(sigma2_alpha, dtype=float)[..., None, None]
    se = np.asarray(sigma2_eps, dtype=float)[..., None, None]
    return (np.eye(T) - sa / (T * sa + se) * np.ones((T, T))) / se


def re_covariance(T: int, sigma2_alpha, sigma2_eps) -> np.ndarray:
    sa = np.asarray(sigma2_alpha, dtype=float)[..., None, None]
    se = np.asarray(sigma2_eps, dtype=float)[..., None, None]
    return se * np.eye(T) + sa * np.ones((T, T))


@dataclass(frozen=True)
class ReFeFit:
    """Random/fixed effects estimates and the plug-in constants of their joint limit.

    ``eta2_hat`` is the asymptotic variance of the RE estimator, ``c_hat`` the
    factor mapping the bias parameter into RE bias and ``sigma2_tau`` the
    asymptotic variance of ``tau_hat``.
    """

    beta_re: float
    beta_fe: float
    beta_ols: float
    sigma2_alpha: float
    sigma2_alpha_raw: float
    sigma2_eps: float
    sigma2_v: float
    tau_hat: float
    sigma2_tau: float
    eta2_hat: float
    c_hat: float
    n: int
    T: int

    @property
    def alpha_truncated(self) -> bool:
        return self.sigma2_alpha_raw < 0

    @property
    def avar_fe(self) -> float:
        return self.c_hat**2 * self.sigma2_tau + self.eta2_hat


def refe_arrays(y, x) -> dict:
    """Batched RE/FE computations; returns a dict of arrays over the batch axes."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n, T = y.shape[-2:]
    xd = x - x.mean(axis=-1, keepdims=True)
    yd = y - y.mean(axis=-1, keepdims=True)
    Bsum = np.einsum("...nt,...nt->...", xd, xd)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta_fe = np.einsum("...nt,...nt->...", xd, yd) / Bsum
        beta_ols = np.einsum("...nt,...nt->...", x, y) / np.einsum("...nt,...nt->...", x, x)
    eps = yd - xd * beta_fe[..., None, None]
    s2e = np.einsum("...nt,...nt->...", eps, eps) / (n * (T - 1) - 1)
    v = y - x * beta_ols[..., None, None]
    s2v = np.einsum("...nt,...nt->...", v, v) / (n * T - 1)
    s2a_raw = s2v - s2e
    s2a = np.maximum(s2a_raw, 0.0)
    Oinv = re_precision(T, s2a, s2e)
    xO = np.einsum("...nt,...ts->...ns", x, Oinv)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.einsum("...ns,...ns->...", xO, x) / n
        beta_re = np.einsum("...ns,...ns->...", xO, y) / n / A
        B = Bsum / n
        C = T * s2a + s2e
        resid_fe = y - x * beta_fe[..., None, None]
        tau = C * np.einsum("...ns,...ns->...", xO, resid_fe) / math.sqrt(n)
        eta2 = 1.0 / A
        c = 1.0 / (A * C)
        s2tau = C**2 * A * (A * s2e / B - 1.0)
    return dict(
        beta_re=beta_re, beta_fe=beta_fe, beta_ols=beta_ols, sigma2_alpha=s2a, sigma2_alpha_raw=s2a_raw,
        sigma2_eps=s2e, sigma2_v=s2v, tau_hat=tau, sigma2_tau=s2tau, eta2_hat=eta2, c_hat=c, B=B,
    )


def refe_fit(panel) -> ReFeFit:
    """RE (GLS with plug-in variance components), FE and pooled OLS fits."""
    y, x = _yx(panel)
    if y.ndim != 2:
        raise ValueError("refe_fit expects a single (n, T) panel")
    n, T = y.shape
    if T < 2:
        raise TooFewPeriods(f"random/fixed effects comparison needs T >= 2, got T={T}")
    xd = x - x.mean(axis=1, keepdims=True)
    if not np.any(np.abs(xd) > 1e-12 * max(1.0, np.abs(x).max())):
        raise NoWithinVariation("the regressor has no within-individual variation; FE is undefined")
    r = refe_arrays(y, x)
    # rounding noise of an exact fit is not an idiosyncratic variance
    floor = (64 * np.finfo(float).eps) ** 2 * float(np.mean(y * y))
    if not r["sigma2_eps"] > floor:
        raise DegenerateSigma("estimated idiosyncratic variance is zero")
    return ReFeFit(**{k: float(v) for k, v in r.items() if k != "B"}, n=n, T=T)


def _sigma_checked(s2) -> np.ndarray:
    s2 = np.asarray(s2, dtype=float)
    if np.ndim(s2) == 0 and not (np.isfinite(s2) and s2 > 0):
        raise DegenerateSigma(f"the variance of the bias estimate is not positive ({float(s2)!r})")
    return s2


def refe_select_arrays(tau, sigma2_tau) -> np.ndarray:
    """True where RE is selected: ``|tau| <= sqrt(2) sigma`` (ties go to RE)."""
    return np.abs(tau) <= np.sqrt(2.0 * np.asarray(sigma2_tau))


def refe_select(fit: ReFeFit) -> str:
    """GFIC choice between RE and FE."""
    _sigma_checked(fit.sigma2_tau)
    return RE if bool(refe_select_arrays(fit.tau_hat, fit.sigma2_tau)) else FE


def fe_weight(tau, sigma2_tau):
    """AMSE-minimizing plug-in weight on FE: ``max(tau^2 - s2, 0) / (max(tau^2 - s2, 0) + s2)``."""
    s2 = np.asarray(sigma2_tau, dtype=float)
    excess = np.maximum(np.asarray(tau) ** 2 - s2, 0.0)
    return excess / (excess + s2)


@dataclass(frozen=True)
class ReFeAverage:
    """Averaging result.

    ``omega`` is the weight on the FE estimator. ``omega_literal`` is the
    closed-form ``[1 + max(tau^2 - s2, 0)/s2]^{-1}``, which equals the weight
    placed on RE (``omega_literal = 1 - omega``).
    """

    omega: float
    omega_literal: float
    mu: float


def refe_average(fit: ReFeFit) -> ReFeAverage:
    """Weighted average ``omega beta_FE + (1 - omega) beta_RE``."""
    s2 = _sigma_checked(fit.sigma2_tau)
    w = float(fe_weight(fit.tau_hat, s2))
    literal = 1.0 / (1.0 + max(fit.tau_hat**2 - float(s2), 0.0) / float(s2))
    return ReFeAverage(omega=w, omega_literal=literal, mu=w * fit.beta_fe + (1.0 - w) * fit.beta_re)


# ---------------------------------------------------------------------------
# slope heterogeneity


@dataclass(frozen=True)
class SlopeHetFit:
    """Pooled OLS and mean-group estimates with the plug-in limit components.

    ``sigma2_eta_hat`` is the raw (possibly negative) heterogeneity variance;
    the selection rule truncates it at zero.
    """

    beta_ols: float
    beta_mg: float
    kappa_hat: float
    zeta_hat: float
    lambda2_hat: float
    sigma2_eta_hat: float
    sigma2_eps_hat: float
    S_b: float
    tau_hat: float
    sigma2_tau_hat: float
    n: int
    T: int

    @property
    def avar_ols(self) -> float:
        return float(_avars(self.kappa_hat, self.zeta_hat, self.lambda2_hat, self.sigma2_eta_hat, self.sigma2_eps_hat)[0])

    @property
    def avar_mg(self) -> float:
        return float(_avars(self.kappa_hat, self.zeta_hat, self.lambda2_hat, self.sigma2_eta_hat, self.sigma2_eps_hat)[1])


SIGMA_EPS_METHODS = ("individual", "pooled")


def slopehet_arrays(y, x, sigma_eps: str = "individual") -> dict:
    """Batched OLS / mean-group computations.

    ``sigma_eps`` selects the idiosyncratic variance estimator: ``"individual"``
    uses residuals from each individual's own regression with ``n(T-1)``
    degrees of freedom; ``"pooled"`` uses pooled-OLS residuals with divisor
    ``nT - 1``. The pooled version also absorbs ``eta_i x_it`` and overstates
    the idiosyncratic variance when slopes differ.
    """
    if sigma_eps not in SIGMA_EPS_METHODS:
        raise ConfigError(f"sigma_eps must be one of {SIGMA_EPS_METHODS}, got {sigma_eps!r}")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n, T = y.shape[-2:]
    xx = np.einsum("...nt,...nt->...n", x, x)
    xy = np.einsum("...nt,...nt->...n", x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        b_i = xy / xx
        beta_ols = xy.sum(axis=-1) / xx.sum(axis=-1)
        inv_xx = 1.0 / xx
    beta_mg = b_i.mean(axis=-1)
    kappa = xx.mean(axis=-1)
    zeta = inv_xx.mean(axis=-1)
    lam2 = ((xx - kappa[..., None]) ** 2).sum(axis=-1) / (n - 1)
    if sigma_eps == "pooled":
        e = y - x * beta_ols[..., None, None]
        s2e = np.einsum("...nt,...nt->...", e, e) / (n * T - 1)
    else:
        e = y - x * b_i[..., None]
        s2e = np.einsum("...nt,...nt->...", e, e) / (n * (T - 1))
    S_b = (b_i**2).sum(axis=-1) - n * beta_mg**2
    s2eta = S_b / (n - 1) - (s2e[..., None] * inv_xx).mean(axis=-1)
    tau = (xy - xx * beta_mg[..., None]).sum(axis=-1) / math.sqrt(n)
    s2tau = lam2 * s2eta + kappa * (kappa * zeta - 1.0) * s2e
    return dict(
        beta_ols=beta_ols, beta_mg=beta_mg, kappa_hat=kappa, zeta_hat=zeta, lambda2_hat=lam2,
        sigma2_eta_hat=s2eta, sigma2_eps_hat=s2e, S_b=S_b, tau_hat=tau, sigma2_tau_hat=s2tau,
    )


def slopehet_fit(panel, sigma_eps: str = "individual") -> SlopeHetFit:
    """Pooled OLS, mean-group and the plug-in components of their joint limit."""
    y, x = _yx(panel)
    n, T = y.shape
    if T < 2:
        raise TooFewPeriods(f"slope heterogeneity comparison needs T >= 2, got T={T}")
    xx = np.einsum("nt,nt->n", x, x)
    zero = np.flatnonzero(~(xx > 0))
    if zero.size:
        ids = panel.ids if isinstance(panel, PanelDataset) else np.arange(n)
        raise ZeroIndividualVariation(f"individual {ids[zero[0]]!r} has x'x = 0; its own slope is undefined")
    r = slopehet_arrays(y, x, sigma_eps)
    return SlopeHetFit(**{k: float(v) for k, v in r.items()}, n=n, T=T)


def _avars(kappa, zeta, lam2, s2eta, s2e):
    s2eta = np.maximum(s2eta, 0.0)
    avar_ols = (lam2 + kappa**2) / kappa**2 * s2eta + s2e / kappa
    avar_mg = s2eta + zeta * s2e
    return avar_ols, avar_mg


def slopehet_select_arrays(r: dict) -> np.ndarray:
    """True where OLS is selected."""
    kappa, zeta, lam2 = r["kappa_hat"], r["zeta_hat"], r["lambda2_hat"]
    avar_ols, avar_mg = _avars(kappa, zeta, lam2, r["sigma2_eta_hat"], r["sigma2_eps_hat"])
    ols_variance_lower = avar_ols < avar_mg
    amse_ols = avar_ols + (r["tau_hat"] ** 2 - r["sigma2_tau_hat"]) / kappa**2
    return ols_variance_lower & (amse_ols <= avar_mg)


def slopehet_select(fit: SlopeHetFit) -> str:
    """MG outright when its estimated variance is no larger; otherwise the AMSE argmin."""
    r = {k: getattr(fit, k) for k in ("kappa_hat", "zeta_hat", "lambda2_hat", "sigma2_eta_hat", "sigma2_eps_hat", "tau_hat", "sigma2_tau_hat")}
    return OLS if bool(slopehet_select_arrays(r)) else MG
