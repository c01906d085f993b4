"""Competitor selection rules: GMM model/moment selection criteria and the
downward J-test.

Both rest on the J statistic of the two-step efficient GMM estimator whose
weight matrix is the inverse of the centered, individual-clustered covariance
of the moment contributions at the first-step (TSLS) residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dpanel import (
    DpanelSpec,
    _levels,
    _safe_cond,
    _replace_bad,
    _tsls_core,
    instrument_array,
    moment_scores,
    regressor_array,
    scores_vcov,
)
from .engine import COND_LIMIT
from .errors import ConfigError, InvalidSampleSize, SingularDesign, SingularWeight

PENALTIES = ("BIC", "AIC", "HQ")
DOWNWARD_ORDER = ("S", "P", "LS", "LP")


@dataclass(frozen=True)
class JResult:
    """Overidentification statistic of one candidate.

    ``df`` is the number of moments minus the number of estimated parameters.
    """

    j_stat: float
    df: int
    p_value: float
    spec: DpanelSpec | None = None

    def __post_init__(self):
        if self.df < 0:
            raise ConfigError(f"under-identified candidate: df={self.df}")
        if self.df == 0:
            object.__setattr__(self, "j_stat", 0.0)
            object.__setattr__(self, "p_value", 1.0)


@dataclass
class JBatch:
    """Batched J statistics; ``ok`` flags replications where both GMM steps succeeded."""

    j_stat: np.ndarray
    df: int
    p_value: np.ndarray
    beta: np.ndarray
    ok: np.ndarray


def j_statistic_arrays(Y, X, spec: DpanelSpec) -> JBatch:
    """Two-step GMM J statistic for a candidate on a (possibly batched) panel."""
    Z = instrument_array(Y, X, spec.lag, spec.strict)
    W, dy = regressor_array(Y, X, spec.lag)
    n, P, w = Z.shape[-3:]
    K = W.shape[-1]
    df = P * w - K
    batch = Z.shape[:-3]
    first = _tsls_core(Z, W, dy)
    V = scores_vcov(moment_scores(Z, first.resid), True)
    bad_v = ~(_safe_cond(V) <= COND_LIMIT)
    Vinv = np.linalg.inv(_replace_bad(V, bad_v))
    Szw = np.einsum("...npa,...npk->...pak", Z, W).reshape(*batch, P * w, K) / n
    Szy = np.einsum("...npa,...np->...pa", Z, dy).reshape(*batch, P * w) / n
    G = np.swapaxes(Szw, -1, -2) @ Vinv @ Szw
    bad_g = ~(_safe_cond(G) <= COND_LIMIT)
    rhs = np.einsum("...ka,...a->...k", np.swapaxes(Szw, -1, -2) @ Vinv, Szy)
    beta = np.linalg.solve(_replace_bad(G, bad_g), rhs[..., None])[..., 0]
    gbar = Szy - np.einsum("...ak,...k->...a", Szw, beta)
    J = n * np.einsum("...a,...ab,...b->...", gbar, Vinv, gbar)
    J = np.maximum(J, 0.0)
    if df == 0:
        J = np.zeros_like(J)
        p = np.ones_like(J)
    else:
        p = stats.chi2.sf(J, df)
    ok = first.ok & ~bad_v & ~bad_g
    return JBatch(j_stat=J, df=df, p_value=p, beta=beta, ok=ok)


def j_statistic(panel, spec: DpanelSpec | str, k: int = 1) -> JResult:
    """J statistic of the optimal two-step GMM estimator for one candidate."""
    p = _levels(panel)
    spec = spec if isinstance(spec, DpanelSpec) else DpanelSpec.parse(spec, k)
    spec.check_T(p.T)
    jb = j_statistic_arrays(p.y, p.x, spec)
    if not jb.ok:
        first = _tsls_core(
            instrument_array(p.y, p.x, spec.lag, spec.strict), *regressor_array(p.y, p.x, spec.lag)
        )
        if not first.ok:
            raise SingularDesign(f"candidate {spec.label}: {first.failure}")
        raise SingularWeight(f"candidate {spec.label}: the centered moment covariance is singular")
    return JResult(j_stat=float(jb.j_stat), df=jb.df, p_value=float(jb.p_value), spec=spec)


def penalty(n: int, flavor: str) -> float:
    """Per-overidentifying-restriction penalty ``kappa_n``."""
    flavor = flavor.upper()
    if flavor not in PENALTIES:
        raise ConfigError(f"unknown MMSC flavor {flavor!r}; expected one of {PENALTIES}")
    if n < 2 or (flavor == "HQ" and n < 3):
        raise InvalidSampleSize(f"MMSC-{flavor} needs a larger sample (n={n})")
    if flavor == "BIC":
        return math.log(n)
    if flavor == "AIC":
        return 2.0
    return 2.01 * math.log(math.log(n))


def mmsc(j: JResult, n: int, flavor: str = "BIC") -> float:
    """``J - (|c| - |b|) kappa_n``; smaller is better."""
    return j.j_stat - j.df * penalty(n, flavor)


def mmsc_select(results: dict, n: int, flavor: str = "BIC"):
    """Key of the candidate with the smallest MMSC score (ties: fewer parameters, then label)."""
    if not results:
        raise ConfigError("no candidates to compare")
    return min(results, key=lambda s: (mmsc(results[s], n, flavor), _lag_of(s), str(_label_of(s))))


def _lag_of(s):
    return s.lag if isinstance(s, DpanelSpec) else 0


def _label_of(s):
    return s.label if isinstance(s, DpanelSpec) else s


def downward_j_test(panel, ordered: Sequence = DOWNWARD_ORDER, alpha: float = 0.05, k: int = 1) -> DpanelSpec:
    """First candidate in ``ordered`` whose J-test is not rejected at level ``alpha``.

    The last candidate is the fallback and is returned untested when every
    earlier one is rejected.
    """
    specs = [s if isinstance(s, DpanelSpec) else DpanelSpec.parse(s, k) for s in ordered]
    if not specs:
        raise ConfigError("downward J-test needs at least one candidate")
    for spec in specs[:-1]:
        if j_statistic(panel, spec, k).p_value >= alpha:
            return spec
    return specs[-1]


def downward_from_pvalues(pvalues: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized downward rule: ``pvalues`` has the candidates on the last axis in
    test order; returns the chosen index per row."""
    pv = np.asarray(pvalues, dtype=float)
    accept = pv[..., :-1] >= alpha
    first = np.argmax(accept, axis=-1)
    return np.where(accept.any(axis=-1), first, pv.shape[-1] - 1)
