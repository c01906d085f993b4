"""Dynamic panel specialization of the GFIC.

Model: ``y_it = theta x_it + sum_j gamma_j y_{i,t-j} + eta_i + v_it``, estimated
in first differences by TSLS with period-specific instruments

* predetermined set ``z_it(l, P) = (y_{t-2}, ..., y_{t-l-1}, x_{t-1})``
* strictly exogenous set ``z_it(l, S) = (z_it(l, P), x_t)``

for periods ``t = l+2, ..., T`` (1-based). A candidate ``(l, P|S)`` sets the lags
beyond ``l`` to zero. The valid candidate uses the full lag order ``k`` and the
predetermined set.

All array routines accept optional leading batch axes so that a stack of
simulated panels of shape ``(R, n, T)`` can be processed in one pass. Batched
routines report failures through boolean masks; the single-panel API raises.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import COND_LIMIT, GficScore, TargetFunction, select
from .errors import ConfigError, DimensionMismatch, EmptyCandidateSet, SingularDesign, TooFewPeriods, UnitRootTarget
from .panel import DiffPanel, PanelDataset

PREDETERMINED = "P"
STRICT = "S"


@dataclass(frozen=True)
class DpanelSpec:
    """Candidate specification: lag order used in estimation and instrument set."""

    lag: int
    exog: str = PREDETERMINED
    label: str = ""

    def __post_init__(self):
        if self.lag < 0:
            raise ConfigError("lag order must be non-negative")
        if self.exog not in (PREDETERMINED, STRICT):
            raise ConfigError(f"instrument set must be 'P' or 'S', got {self.exog!r}")
        if not self.label:
            object.__setattr__(self, "label", f"L{self.lag}{self.exog}")

    @classmethod
    def parse(cls, label: str, k: int = 1) -> "DpanelSpec":
        """Parse labels such as ``LP``, ``LS``, ``P``, ``S``, ``L1``, ``L2``, ``L2S``.

        A bare ``L`` means lag order ``k``; a missing ``L`` means no lags; a
        missing instrument letter means the predetermined set.
        """
        m = re.fullmatch(r"(L(\d*))?([PS]?)", label.strip().upper())
        if m is None or not label.strip():
            raise ConfigError(f"cannot parse candidate label {label!r}")
        if m.group(1) is None:
            lag = 0
        else:
            lag = int(m.group(2)) if m.group(2) else k
        return cls(lag=lag, exog=m.group(3) or PREDETERMINED, label=label.strip().upper())

    @property
    def strict(self) -> bool:
        return self.exog == STRICT

    @property
    def width(self) -> int:
        """Instruments per period."""
        return self.lag + (2 if self.strict else 1)

    def n_periods(self, T: int) -> int:
        return T - self.lag - 1

    def n_moments(self, T: int) -> int:
        return self.width * self.n_periods(T)

    def periods(self, T: int) -> np.ndarray:
        """1-based periods used in estimation."""
        return np.arange(self.lag + 2, T + 1)

    def check_T(self, T: int):
        if self.n_periods(T) < 1:
            raise TooFewPeriods(f"candidate {self.label} needs T >= {self.lag + 2}, got T={T}")


# ---------------------------------------------------------------------------
# array builders (batch-aware)


def instrument_array(Y, X, lag: int, strict: bool, periods=None) -> np.ndarray:
    """Instruments ``z_it`` of shape ``(..., n, len(periods), width)``.

    ``periods`` defaults to ``lag+2..T`` and may be any subset of it.
    """
    T = Y.shape[-1]
    if periods is None:
        periods = np.arange(lag + 2, T + 1)
    periods = np.asarray(periods)
    if periods.size == 0 or periods.min() < lag + 2:
        raise TooFewPeriods(f"instruments with lag {lag} need periods >= {lag + 2} and T >= {lag + 2} (T={T})")
    cols = [Y[..., periods - j - 1] for j in range(2, lag + 2)]
    cols.append(X[..., periods - 2])
    if strict:
        cols.append(X[..., periods - 1])
    return np.stack(cols, axis=-1)


def regressor_array(Y, X, lag: int, periods=None):
    """Differenced regressors ``[dx, L dy, ..., L^lag dy]`` and the differenced outcome.

    Returns
    -------
    W : ndarray, shape (..., n, P, lag + 1)
    dy : ndarray, shape (..., n, P)
    """
    T = Y.shape[-1]
    if periods is None:
        periods = np.arange(lag + 2, T + 1)
    periods = np.asarray(periods)
    if periods.size == 0 or periods.min() < lag + 2:
        raise TooFewPeriods(f"regressors with lag {lag} need T >= {lag + 2} (T={T})")
    dY = np.diff(Y, axis=-1)
    dX = np.diff(X, axis=-1)
    idx = periods - 2
    cols = [dX[..., idx]] + [dY[..., idx - j] for j in range(1, lag + 1)]
    return np.stack(cols, axis=-1), dY[..., idx]


def _safe_cond(A: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        c = np.linalg.cond(A)
    return np.where(np.isfinite(c), c, np.inf)


def _replace_bad(A: np.ndarray, bad: np.ndarray) -> np.ndarray:
    if not np.any(bad):
        return A
    A = A.copy()
    A[bad] = np.eye(A.shape[-1])
    return A


@dataclass
class _TslsCore:
    beta: np.ndarray  # (..., K)
    Q: np.ndarray  # (..., K, P*w)
    resid: np.ndarray  # (..., n, P)
    ok: np.ndarray  # (...,) bool
    failure: str = ""


def _tsls_core(Z: np.ndarray, W: np.ndarray, dy: np.ndarray) -> _TslsCore:
    n, P, w = Z.shape[-3:]
    K = W.shape[-1]
    batch = Z.shape[:-3]
    Szz = np.einsum("...npa,...npb->...pab", Z, Z) / n
    Szw = np.einsum("...npa,...npk->...pak", Z, W) / n
    Szy = np.einsum("...npa,...np->...pa", Z, dy) / n
    cz = _safe_cond(Szz)
    bad_zz = np.any(~(cz <= COND_LIMIT), axis=-1)
    Szz_ok = _replace_bad(Szz, np.broadcast_to(bad_zz[..., None], Szz.shape[:-2]))
    A = np.linalg.solve(Szz_ok, Szw).reshape(*batch, P * w, K)
    SzwF = Szw.reshape(*batch, P * w, K)
    Gm = np.swapaxes(SzwF, -1, -2) @ A
    cg = _safe_cond(Gm)
    bad_g = ~(cg <= COND_LIMIT)
    Q = np.linalg.solve(_replace_bad(Gm, bad_g), np.swapaxes(A, -1, -2))
    beta = np.einsum("...kj,...j->...k", Q, Szy.reshape(*batch, P * w))
    resid = dy - np.einsum("...npk,...k->...np", W, beta)
    ok = ~(bad_zz | bad_g)
    failure = ""
    if np.ndim(ok) == 0 and not ok:
        if bad_zz:
            worst = int(np.argmax(cz))
            failure = f"instrument Gram matrix Z'Z is singular in period block {worst + 1} (cond {cz[worst]:.3g})"
        else:
            failure = f"W'P_Z W is singular (cond {float(cg):.3g})"
    return _TslsCore(beta=beta, Q=Q, resid=resid, ok=ok, failure=failure)


def moment_scores(Z: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Per-individual moment contributions ``Z_i' dv_i`` of shape ``(..., n, P*w)``."""
    n, P, w = Z.shape[-3:]
    return (Z * resid[..., None]).reshape(*Z.shape[:-3], n, P * w)


def scores_vcov(scores: np.ndarray, center) -> np.ndarray:
    """``n^{-1} sum_i (g_i - m)(g_i - m)'`` with ``m`` the mean where ``center`` is set.

    ``center`` is a bool or a boolean mask over the score components.
    """
    n = scores.shape[-2]
    mask = np.broadcast_to(np.asarray(center, dtype=bool), scores.shape[-1:])
    if mask.any():
        scores = scores - scores.mean(axis=-2, keepdims=True) * mask
    return np.einsum("...ni,...nj->...ij", scores, scores) / n


# ---------------------------------------------------------------------------
# single-panel API


def _levels(dp) -> PanelDataset:
    return dp.levels if isinstance(dp, DiffPanel) else dp


@dataclass(frozen=True)
class InstrumentBlock:
    """Per-period instruments ``Z[i, p, :] = z_it'`` for ``t = periods[p]``.

    The block-diagonal matrix ``Z_i = diag{z_it'}`` is available via
    :meth:`block_diagonal`.
    """

    Z: np.ndarray
    periods: np.ndarray
    spec: DpanelSpec

    @property
    def n_moments(self) -> int:
        return self.Z.shape[-2] * self.Z.shape[-1]

    def block_diagonal(self) -> np.ndarray:
        """Dense ``Z_i`` of shape ``(n, P, P*w)``."""
        n, P, w = self.Z.shape
        out = np.zeros((n, P, P * w))
        for p in range(P):
            out[:, p, p * w : (p + 1) * w] = self.Z[:, p, :]
        return out


@dataclass(frozen=True)
class RegressorBlock:
    """Differenced regressors ``W[i, p, :]`` and outcome ``dy[i, p]`` for ``t = periods[p]``."""

    W: np.ndarray
    dy: np.ndarray
    periods: np.ndarray
    lag: int


def build_instruments(dp, spec: DpanelSpec) -> InstrumentBlock:
    """Period-specific instruments for ``spec`` from a panel (or its differences)."""
    p = _levels(dp)
    spec.check_T(p.T)
    periods = spec.periods(p.T)
    return InstrumentBlock(Z=instrument_array(p.y, p.x, spec.lag, spec.strict, periods), periods=periods, spec=spec)


def build_regressors(dp, lag: int, full_k: int | None = None) -> RegressorBlock:
    """Regressors ``[dx, L dy, ..., L^lag dy]`` over ``t = lag+2..T``.

    When ``lag < full_k`` this is the extended-period design: it has
    ``full_k - lag`` more period blocks and as many fewer columns than the
    design with ``full_k`` lags.
    """
    p = _levels(dp)
    if full_k is not None and lag > full_k:
        raise DimensionMismatch(f"lag {lag} exceeds the full lag order {full_k}")
    if p.T < lag + 2:
        raise TooFewPeriods(f"lag {lag} needs T >= {lag + 2}, got T={p.T}")
    periods = np.arange(lag + 2, p.T + 1)
    W, dy = regressor_array(p.y, p.x, lag, periods)
    return RegressorBlock(W=W, dy=dy, periods=periods, lag=lag)


@dataclass(frozen=True)
class DpanelFit:
    """TSLS fit of one candidate.

    Attributes
    ----------
    beta_hat : ndarray
        ``(theta, gamma_1, ..., gamma_lag)``.
    Q_hat : ndarray, shape (lag + 1, n_moments)
        ``n [W'Z (Z'Z)^{-1} Z'W]^{-1} W'Z (Z'Z)^{-1}``.
    V_hat : ndarray
        Panel-robust covariance of the moment contributions (centered for
        strictly exogenous instrument sets).
    residuals : ndarray, shape (n, P)
        Differenced residuals for ``t`` in ``t_range``.
    """

    spec: DpanelSpec
    beta_hat: np.ndarray
    Q_hat: np.ndarray
    V_hat: np.ndarray
    residuals: np.ndarray
    n_used: int
    t_range: tuple
    Z: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    dy: np.ndarray = field(repr=False)

    @property
    def scores(self) -> np.ndarray:
        return moment_scores(self.Z, self.residuals)

    @property
    def n_periods(self) -> int:
        return self.residuals.shape[1]


def tsls_fit(Z, W, dy=None, spec: DpanelSpec | None = None) -> DpanelFit:
    """First-difference TSLS with block-diagonal instruments.

    Parameters
    ----------
    Z : InstrumentBlock or ndarray, shape (n, P, w)
    W : RegressorBlock or ndarray, shape (n, P, K)
    dy : ndarray, shape (n, P), optional
        Taken from ``W`` when it is a RegressorBlock.
    """
    periods = None
    if isinstance(Z, InstrumentBlock):
        spec = spec or Z.spec
        periods = Z.periods
        Z = Z.Z
    if isinstance(W, RegressorBlock):
        dy = W.dy if dy is None else dy
        W = W.W
    Z, W, dy = (np.asarray(a, dtype=float) for a in (Z, W, dy))
    if Z.ndim != 3 or W.ndim != 3 or dy.shape != Z.shape[:2] or W.shape[:2] != Z.shape[:2]:
        raise DimensionMismatch(f"incompatible shapes Z {Z.shape}, W {W.shape}, dy {dy.shape}")
    if spec is None:
        w, K = Z.shape[2], W.shape[2]
        spec = DpanelSpec(lag=K - 1, exog=STRICT if w == K + 1 else PREDETERMINED)
    core = _tsls_core(Z, W, dy)
    if not core.ok:
        raise SingularDesign(f"candidate {spec.label}: {core.failure}")
    V = scores_vcov(moment_scores(Z, core.resid), spec.strict)
    if periods is None:
        periods = np.arange(Z.shape[1])
    return DpanelFit(
        spec=spec,
        beta_hat=core.beta,
        Q_hat=core.Q,
        V_hat=V,
        residuals=core.resid,
        n_used=Z.shape[0],
        t_range=(int(periods[0]), int(periods[-1])),
        Z=Z,
        W=W,
        dy=dy,
    )


def fit_candidate(panel, spec: DpanelSpec) -> DpanelFit:
    """Build instruments and regressors for ``spec`` and run TSLS."""
    return tsls_fit(build_instruments(panel, spec), build_regressors(panel, spec.lag), spec=spec)


def robust_vcov(fit: DpanelFit, spec: DpanelSpec | None = None, center: bool | None = None) -> np.ndarray:
    """Panel-robust covariance of ``Z_i' dv_i``; centered by default for strict sets."""
    spec = spec or fit.spec
    if center is None:
        center = spec.strict
    return scores_vcov(fit.scores, center)


# ---------------------------------------------------------------------------
# bias parameters


def permutation_matrix(k: int, n_periods: int) -> np.ndarray:
    """Reorder stacked strict-set scores into ``[predetermined scores; x scores]``."""
    perm = strict_to_split_order(k, n_periods)
    return np.eye(perm.size)[perm]


def strict_to_split_order(k: int, n_periods: int) -> np.ndarray:
    w = k + 2
    base = np.arange(n_periods)[:, None] * w
    pre = (base + np.arange(k + 1)[None, :]).ravel()
    xs = (base[:, 0] + k + 1).ravel()
    return np.concatenate([pre, xs])


def _psi_blocks(Y, X, ell: int, k: int):
    """Sample analogues of ``E[z_t(ell, P) (dy_{t-ell-1}, ..., dy_{t-k})]`` and the x-row.

    Averages run over the valid range ``t = k+2..T``.
    """
    T = Y.shape[-1]
    n = Y.shape[-2]
    periods = np.arange(k + 2, T + 1)
    Tk = periods.size
    z = instrument_array(Y, X, ell, False, periods)
    dY = np.diff(Y, axis=-1)
    D = np.stack([dY[..., periods - 2 - j] for j in range(ell + 1, k + 1)], axis=-1)
    Xk = X[..., periods - 1]
    psiP = np.einsum("...nta,...ntb->...ab", z, D) / (n * Tk)
    psiS = np.einsum("...nt,...ntb->...b", Xk, D) / (n * Tk)
    return psiP, psiS


def _bias_core(Y, X, beta_v, Q_v, resid_v, k: int, m: int):
    """delta_hat, tau_hat, xi_hat, Psi and the permuted strict-set covariance."""
    n, T = Y.shape[-2:]
    periods = np.arange(k + 2, T + 1)
    Tk = periods.size
    rt = np.sqrt(n)
    delta = rt * beta_v[..., k + 1 - m :]
    Xk = X[..., periods - 1]
    tau = np.einsum("...nt,...nt->...", Xk, resid_v) / (rt * Tk)
    Wv, _ = regressor_array(Y, X, k, periods)
    xi = np.einsum("...nt,...ntj->...j", Xk, Wv) / (n * Tk)
    batch = beta_v.shape[:-1]
    nP = Q_v.shape[-1]
    Psi = np.zeros((*batch, m + 1, nP + Tk))
    Psi[..., :m, :nP] = Q_v[..., k + 1 - m :, :]
    Psi[..., m, :nP] = -np.einsum("...j,...jc->...c", xi, Q_v)
    Psi[..., m, nP:] = 1.0 / Tk
    Zs = instrument_array(Y, X, k, True, periods)
    Vs = scores_vcov(moment_scores(Zs, resid_v), True)
    perm = strict_to_split_order(k, Tk)
    PVP = Vs[..., perm, :][..., :, perm]
    return delta, tau, xi, Psi, PVP


def _corrected_B(delta, tau, Psi, PVP):
    xi_hat = np.concatenate([delta, tau[..., None]], axis=-1)
    corr = Psi @ PVP @ np.swapaxes(Psi, -1, -2)
    corr = 0.5 * (corr + np.swapaxes(corr, -1, -2))
    return xi_hat[..., :, None] * xi_hat[..., None, :] - corr


@dataclass(frozen=True)
class DpanelBias:
    """Bias-parameter estimates from the valid fit.

    ``Psi_hat`` maps the permuted strict-set moment vector (predetermined
    scores first, then the ``x_t dv_t`` scores) to the limit noise of
    ``[delta_hat; tau_hat]``.
    """

    delta_hat: np.ndarray
    tau_hat: float
    Psi_hat: np.ndarray
    Pi: np.ndarray
    xi_hat: np.ndarray
    psiP_hat: np.ndarray
    psiS_hat: np.ndarray
    k: int
    m: int
    PVP: np.ndarray = field(repr=False, default=None)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.delta_hat, [self.tau_hat]])


def estimate_dpanel_bias(fit_kP: DpanelFit, panel, k: int, m: int) -> DpanelBias:
    """delta_hat, tau_hat, psi/xi estimates, the permutation and Psi from the valid fit."""
    p = _levels(panel)
    if p.T <= k + 1:
        raise TooFewPeriods(f"bias estimation with k={k} needs T > {k + 1}, got T={p.T}")
    if fit_kP.spec.lag != k or fit_kP.spec.strict:
        raise DimensionMismatch(f"bias estimation needs the ({k}, P) fit, got {fit_kP.spec.label}")
    if not 0 <= m <= k:
        raise DimensionMismatch(f"number of restricted lags m={m} must lie in 0..{k}")
    delta, tau, xi, Psi, PVP = _bias_core(p.y, p.x, fit_kP.beta_hat, fit_kP.Q_hat, fit_kP.residuals, k, m)
    if m > 0:
        psiP, psiS = _psi_blocks(p.y, p.x, k - m, k)
    else:
        psiP, psiS = np.zeros((k + 1, 0)), np.zeros(0)
    Tk = p.T - k - 1
    return DpanelBias(
        delta_hat=delta,
        tau_hat=float(tau),
        Psi_hat=Psi,
        Pi=permutation_matrix(k, Tk),
        xi_hat=xi,
        psiP_hat=psiP,
        psiS_hat=psiS,
        k=k,
        m=m,
        PVP=PVP,
    )


@dataclass(frozen=True)
class CorrectedProducts:
    """Bias-corrected estimates of ``delta delta'``, ``delta tau`` and ``tau^2``."""

    delta_delta: np.ndarray
    delta_tau: np.ndarray
    tau_tau: float

    @property
    def B(self) -> np.ndarray:
        m = self.delta_tau.size
        B = np.empty((m + 1, m + 1))
        B[:m, :m] = self.delta_delta
        B[:m, m] = B[m, :m] = self.delta_tau
        B[m, m] = self.tau_tau
        return B


def dpanel_bias_correct(db: DpanelBias, V_kS: np.ndarray) -> CorrectedProducts:
    """Subtract ``Psi Pi V(k,S) Pi' Psi'`` from the raw outer products."""
    V_kS = np.asarray(V_kS, dtype=float)
    if V_kS.shape != (db.Pi.shape[0],) * 2:
        raise DimensionMismatch(f"V(k,S) has shape {V_kS.shape}, expected {db.Pi.shape}")
    B = _corrected_B(db.delta_hat, np.asarray(db.tau_hat), db.Psi_hat, db.Pi @ V_kS @ db.Pi.T)
    m = db.m
    return CorrectedProducts(delta_delta=B[:m, :m], delta_tau=B[:m, m].copy(), tau_tau=float(B[m, m]))


def strict_vcov_valid(fit_kP: DpanelFit, panel) -> np.ndarray:
    """Centered covariance of the ``(k, S)`` moments evaluated at the valid residuals."""
    p = _levels(panel)
    k = fit_kP.spec.lag
    Zs = instrument_array(p.y, p.x, k, True, np.arange(k + 2, p.T + 1))
    return scores_vcov(moment_scores(Zs, fit_kP.residuals), True)


# ---------------------------------------------------------------------------
# targets

UNIT_ROOT_TOL = 1e-8


def _sr_value(beta):
    return np.asarray(beta, dtype=float)[..., 0]


def _sr_grad(beta):
    beta = np.asarray(beta, dtype=float)
    g = np.zeros_like(beta)
    g[..., 0] = 1.0
    return g


def _lr_denominator(beta, strict: bool = True):
    beta = np.asarray(beta, dtype=float)
    d = 1.0 - beta[..., 1:].sum(axis=-1)
    if strict and np.any(np.abs(d) < UNIT_ROOT_TOL):
        raise UnitRootTarget("long-run effect undefined: 1 - sum(gamma) is within 1e-8 of zero")
    return d


def _lr_value(beta):
    return np.asarray(beta, dtype=float)[..., 0] / _lr_denominator(beta)


def _lr_grad(beta):
    beta = np.asarray(beta, dtype=float)
    d = _lr_denominator(beta)
    g = np.empty_like(beta)
    g[..., 0] = 1.0 / d
    g[..., 1:] = (beta[..., 0] / d**2)[..., None]
    return g


def target_short_run() -> TargetFunction:
    """Short-run effect ``theta``."""
    return TargetFunction(value=_sr_value, gradient=_sr_grad, name="SR")


def target_long_run() -> TargetFunction:
    """Long-run effect ``theta / (1 - sum(gamma))``."""
    return TargetFunction(value=_lr_value, gradient=_lr_grad, name="LR")


def get_target(name) -> TargetFunction:
    if isinstance(name, TargetFunction):
        return name
    key = str(name).strip().lower().replace("_", "-")
    if key in ("sr", "short-run", "short"):
        return target_short_run()
    if key in ("lr", "long-run", "long"):
        return target_long_run()
    raise ConfigError(f"unknown target {name!r}; use short-run or long-run")


def _lr_value_masked(beta):
    d = _lr_denominator(beta, strict=False)
    bad = np.abs(d) < UNIT_ROOT_TOL
    with np.errstate(all="ignore"):
        v = np.asarray(beta)[..., 0] / np.where(bad, np.nan, d)
    return v


def _lr_grad_masked(beta):
    beta = np.asarray(beta, dtype=float)
    d = _lr_denominator(beta, strict=False)
    d = np.where(np.abs(d) < UNIT_ROOT_TOL, np.nan, d)
    g = np.empty_like(beta)
    g[..., 0] = 1.0 / d
    g[..., 1:] = (beta[..., 0] / d**2)[..., None]
    return g


def _masked_target(target: TargetFunction):
    """Batch versions that return NaN instead of raising near a unit root."""
    if target.name == "LR":
        return _lr_value_masked, _lr_grad_masked
    return target.value, target.gradient


# ---------------------------------------------------------------------------
# GFIC assembly (batch-aware)


@dataclass
class GficBatch:
    """GFIC components for a stack of panels (leading axes ``batch``).

    Arrays indexed by candidate label hold NaN where that candidate failed.
    """

    labels: list
    specs: dict
    estimate: dict
    avar: dict
    sq_bias: dict
    loading: dict  # label -> (..., m + 1) bias loadings
    Q: dict
    V: dict
    scores: dict
    ok: dict
    valid_ok: np.ndarray
    delta_hat: np.ndarray
    tau_hat: np.ndarray
    B_hat: np.ndarray
    Psi_hat: np.ndarray
    PVP: np.ndarray
    aux_scores: np.ndarray  # permuted strict-set scores at the valid residuals
    grad: np.ndarray
    beta: dict
    k: int
    m: int
    n: int
    T: int
    failures: dict = field(default_factory=dict)

    def gfic(self, label):
        return self.avar[label] + self.sq_bias[label]

    def gfic_plus(self, label):
        return self.avar[label] + np.maximum(self.sq_bias[label], 0.0)


def _validate_candidates(candidates, k, T, rejected=None):
    """Parse and check candidates; lags above ``k`` go to ``rejected`` when given, else raise."""
    specs = []
    for c in candidates:
        spec = c if isinstance(c, DpanelSpec) else DpanelSpec.parse(str(c), k)
        if spec.lag > k:
            msg = f"candidate {spec.label} has lag {spec.lag} above the lag ceiling k={k}"
            if rejected is None:
                raise ConfigError(msg)
            rejected[spec] = msg
            continue
        specs.append(spec)
    if not specs:
        raise EmptyCandidateSet("no dpanel candidates given")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate candidate labels {labels}")
    if T < k + 2:
        raise TooFewPeriods(f"the valid specification with k={k} needs T >= {k + 2}, got T={T}")
    return specs


def gfic_batch(Y, X, candidates: Sequence, target="SR", k: int = 1, keep_scores: bool = False) -> GficBatch:
    """GFIC components for every candidate on a (possibly batched) panel.

    Parameters
    ----------
    Y, X : ndarray, shape (..., n, T)
        Outcome and regressor levels.
    candidates : sequence of DpanelSpec or labels
        Candidates with lag orders at most ``k``.
    target : {"SR", "LR"} or TargetFunction
    k : int
        Lag order of the valid specification.
    keep_scores : bool
        Keep per-individual moment contributions (needed for simulation-based
        inference).
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, T = Y.shape[-2:]
    specs = _validate_candidates(candidates, k, T)
    target = get_target(target)
    value_fn, grad_fn = _masked_target(target)
    r_min = min(s.lag for s in specs)
    m = k - r_min
    batch = Y.shape[:-2]

    Zv = instrument_array(Y, X, k, False)
    Wv, dyv = regressor_array(Y, X, k)
    valid = _tsls_core(Zv, Wv, dyv)
    delta, tau, xi, Psi, PVP = _bias_core(Y, X, valid.beta, valid.Q, valid.resid, k, m)
    B = _corrected_B(delta, tau, Psi, PVP)
    b0 = valid.beta.copy()
    if m:
        b0[..., k + 1 - m :] = 0.0
    grad = grad_fn(b0)
    psi_cache = {}

    out = GficBatch(
        labels=[s.label for s in specs],
        specs={s.label: s for s in specs},
        estimate={},
        avar={},
        sq_bias={},
        loading={},
        Q={},
        V={},
        scores={},
        ok={},
        valid_ok=valid.ok,
        delta_hat=delta,
        tau_hat=tau,
        B_hat=B,
        Psi_hat=Psi,
        PVP=PVP,
        aux_scores=None,
        grad=grad,
        beta={},
        k=k,
        m=m,
        n=n,
        T=T,
    )
    if keep_scores:
        Tk = T - k - 1
        Zs = instrument_array(Y, X, k, True, np.arange(k + 2, T + 1))
        out.aux_scores = moment_scores(Zs, valid.resid)[..., strict_to_split_order(k, Tk)]

    for spec in specs:
        ell = spec.lag
        if spec.lag == k and not spec.strict:
            core, Z = valid, Zv
        else:
            Z = instrument_array(Y, X, ell, spec.strict)
            Wc, dyc = regressor_array(Y, X, ell)
            core = _tsls_core(Z, Wc, dyc)
            if np.ndim(core.ok) == 0 and not core.ok:
                out.failures[spec.label] = core.failure
        S = moment_scores(Z, core.resid)
        V = scores_vcov(S, spec.strict)
        g_c = grad[..., : ell + 1]
        gQ = np.einsum("...k,...kj->...j", g_c, core.Q)
        avar = np.einsum("...i,...ij,...j->...", gQ, V, gQ)
        load = np.zeros((*batch, m + 1))
        if ell < k:
            if ell not in psi_cache:
                psi_cache[ell] = _psi_blocks(Y, X, ell, k)
            psiP, psiS = psi_cache[ell]
            blk = np.concatenate([psiP, psiS[..., None, :]], axis=-2) if spec.strict else psiP
            n_per = spec.n_periods(T)
            tiled = np.concatenate([blk] * n_per, axis=-2)
            a = np.einsum("...j,...jb->...b", gQ, tiled) - grad[..., ell + 1 :]
            load[..., ell - r_min :m] = a
        if spec.strict:
            w = spec.width
            load[..., m] = gQ[..., w - 1 :: w].sum(axis=-1)
        sq = np.einsum("...i,...ij,...j->...", load, B, load)
        beta_full = np.zeros((*batch, k + 1))
        beta_full[..., : ell + 1] = core.beta
        est = value_fn(beta_full)
        ok = core.ok & valid.ok & np.isfinite(est) & np.isfinite(avar) & np.isfinite(sq)
        nan = np.where(ok, 0.0, np.nan)
        out.estimate[spec.label] = est + nan
        out.avar[spec.label] = avar + nan
        out.sq_bias[spec.label] = sq + nan
        out.loading[spec.label] = load
        out.ok[spec.label] = ok
        out.beta[spec.label] = core.beta
        out.Q[spec.label] = core.Q
        out.V[spec.label] = V
        if keep_scores:
            out.scores[spec.label] = S
    return out


def select_batch(gb: GficBatch, criterion: str = "gfic") -> np.ndarray:
    """Index (into ``gb.labels``) of the selected candidate per batch element.

    Failed candidates are never selected; ties follow :func:`engine.select`.
    Returns -1 where every candidate failed.
    """
    if criterion not in ("gfic", "gfic_plus"):
        raise ConfigError(f"unknown criterion {criterion!r}")
    order = sorted(
        range(len(gb.labels)),
        key=lambda j: (
            gb.specs[gb.labels[j]].lag + 1,
            -gb.specs[gb.labels[j]].n_moments(gb.T),
            gb.labels[j],
        ),
    )
    crit = np.stack([getattr(gb, criterion)(lab) for lab in gb.labels], axis=-1)
    crit = np.where(np.isfinite(crit), crit, np.inf)
    crit_ord = crit[..., order]
    pos = np.argmin(crit_ord, axis=-1)
    chosen = np.asarray(order)[pos]
    allbad = ~np.isfinite(crit_ord).any(axis=-1)
    return np.where(allbad, -1, chosen)


# ---------------------------------------------------------------------------
# single-panel GFIC


@dataclass(frozen=True)
class DpanelGficResult:
    """Scores, fits and bias estimates from :func:`gfic_dpanel_details`."""

    scores: dict
    errors: dict
    batch: GficBatch
    bias: CorrectedProducts
    target: str

    def select(self, criterion: str = "gfic_plus") -> DpanelSpec:
        return select(self.scores, criterion)

    def score_of(self, label: str) -> GficScore:
        for spec, s in self.scores.items():
            if spec.label == label:
                return s
        raise KeyError(label)


def gfic_dpanel_details(panel, candidates, target="SR", k: int = 1, on_error: str = "raise") -> DpanelGficResult:
    """Score candidates on one panel, keeping all intermediate quantities.

    ``on_error="skip"`` records candidates that cannot be fitted in
    ``errors`` instead of raising; failures of the valid fit always raise.
    """
    p = _levels(panel)
    errors = {}
    specs = _validate_candidates(candidates, k, p.T, errors if on_error == "skip" else None)
    feasible = []
    for spec in specs:
        try:
            spec.check_T(p.T)
            feasible.append(spec)
        except TooFewPeriods as exc:
            if on_error == "raise":
                raise
            errors[spec] = str(exc)
    if not feasible:
        raise EmptyCandidateSet("no feasible candidate for this panel")
    target_fn = get_target(target)
    if target_fn.name == "LR":
        fit_v = fit_candidate(p, DpanelSpec(k, PREDETERMINED))
        b0 = fit_v.beta_hat.copy()
        m = k - min(s.lag for s in feasible)
        if m:
            b0[k + 1 - m :] = 0.0
        _lr_denominator(b0)
    gb = gfic_batch(p.y, p.x, feasible, target_fn, k)
    if not gb.valid_ok:
        fit_candidate(p, DpanelSpec(k, PREDETERMINED))  # raises with a diagnostic
    scores = {}
    for spec in feasible:
        lab = spec.label
        if not gb.ok[lab]:
            msg = gb.failures.get(lab, "non-finite score")
            if on_error == "raise":
                raise SingularDesign(f"candidate {lab}: {msg}")
            errors[spec] = msg
            continue
        scores[spec] = GficScore(
            avar=float(max(gb.avar[lab], 0.0)),
            sq_bias=float(gb.sq_bias[lab]),
            label=lab,
            n_params=spec.lag + 1,
            n_moments=spec.n_moments(p.T),
            estimate=float(gb.estimate[lab]),
        )
    m = gb.m
    B = gb.B_hat
    corrected = CorrectedProducts(delta_delta=B[:m, :m], delta_tau=B[:m, m].copy(), tau_tau=float(B[m, m]))
    return DpanelGficResult(scores=scores, errors=errors, batch=gb, bias=corrected, target=target_fn.name)


def gfic_dpanel(panel, candidates, target="SR", k: int = 1) -> dict:
    """GFIC scores ``{DpanelSpec: GficScore}`` for each candidate."""
    return gfic_dpanel_details(panel, candidates, target, k).scores
