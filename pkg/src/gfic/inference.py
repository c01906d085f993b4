"""Averaging estimators and simulation-based post-selection inference.

The limit of ``sqrt(n)(mu_hat - mu_n)`` for a randomly weighted average of
candidate estimators is

    Lambda = -sum_c w_c(N, xi) (a_c' N + m_c' xi),   N ~ N(0, Omega),

where ``a_c`` are noise loadings, ``m_c`` bias loadings and ``xi`` the stacked
bias parameters ``(delta, tau)``. :class:`LambdaSampler` tabulates ``Lambda``
by simulation; :func:`one_step_ci` plugs in the bias estimates and
:func:`two_step_ci` takes the union over a confidence region for ``xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.stats import qmc

from .dpanel import scores_vcov
from .engine import LimitObjects, SpecId, compute_K, compute_M, compute_Psi
from .errors import ConfigError, KeyMismatch, NonPsdOmega, SingularRegionMetric

DRAW_CHUNK = 4096
GRID_CHUNK_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class AveragingWeights:
    """Candidate weights that sum to one."""

    weights: Mapping[Hashable, float]

    def __post_init__(self):
        total = math.fsum(float(w) for w in self.weights.values())
        if not self.weights or abs(total - 1.0) > 1e-12:
            raise ConfigError(f"averaging weights must sum to 1, got {total!r}")

    @classmethod
    def indicator(cls, keys, chosen) -> "AveragingWeights":
        return cls({k: float(k == chosen) for k in keys})


def averaging_mu(weights: AveragingWeights | Mapping, estimates: Mapping) -> float:
    """``sum_c w_c mu_hat_c`` over a common key set."""
    w = weights.weights if isinstance(weights, AveragingWeights) else weights
    if set(w) != set(estimates):
        raise KeyMismatch(f"weight keys {sorted(map(str, w))} differ from estimate keys {sorted(map(str, estimates))}")
    return math.fsum(float(w[k]) * float(estimates[k]) for k in w)


# ---------------------------------------------------------------------------
# weight rules


@dataclass
class DrawSet:
    """Simulated normal draws and their projections used by weight rules."""

    N: np.ndarray  # (J, d)
    AN: np.ndarray  # (J, C) noise-loading projections a_c' N_j
    PN: np.ndarray | None  # (J, r+q) Psi N_j


class WeightRule:
    """Maps draws and a batch of bias-parameter points to candidate weights.

    Subclasses implement :meth:`weights` returning an array of shape
    ``(G, J, C)`` for ``xis`` of shape ``(G, r+q)``; a rule may instead
    return ``(G, J)`` integer indices of the selected candidate.
    """

    def weights(self, draws: DrawSet, xis: np.ndarray, sampler: "LambdaSampler") -> np.ndarray:
        raise NotImplementedError


@dataclass
class FixedWeights(WeightRule):
    """Non-random weights."""

    w: np.ndarray

    def weights(self, draws, xis, sampler):
        w = np.asarray(self.w, dtype=float)
        return np.broadcast_to(w, (xis.shape[0], draws.N.shape[0], w.size))


@dataclass
class CallableRule(WeightRule):
    """Wrap ``fn(N, xi) -> (J, C)`` weights evaluated one point at a time."""

    fn: Callable

    def weights(self, draws, xis, sampler):
        return np.stack([np.asarray(self.fn(draws.N, xi), dtype=float) for xi in xis])


@dataclass
class GficRule(WeightRule):
    """Limit of GFIC selection: argmin over candidates of

    ``avar_c + m_c' [(xi + Psi N)(xi + Psi N)' - Psi Omega Psi'] m_c``.

    ``criterion="gfic_plus"`` truncates the squared-bias term at zero. Ties
    follow ``order`` (a permutation of candidate indices, most preferred first).
    """

    avar: np.ndarray
    criterion: str = "gfic"
    order: Sequence[int] | None = None

    def weights(self, draws, xis, sampler):
        if draws.PN is None:
            raise ConfigError("the GFIC weight rule needs Psi on the sampler")
        m = sampler.bias_loadings  # (C, r+q)
        U = draws.PN @ m.T  # (J, C)
        Psi = sampler.psi
        corr = np.einsum("ci,ij,cj->c", m @ Psi, sampler.omega, m @ Psi)
        s = xis @ m.T  # (G, C)
        sq = (s[:, None, :] + U[None, :, :]) ** 2 - corr
        if self.criterion == "gfic_plus":
            sq = np.maximum(sq, 0.0)
        elif self.criterion != "gfic":
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        score = np.asarray(self.avar)[None, None, :] + sq
        order = np.arange(m.shape[0]) if self.order is None else np.asarray(self.order)
        return order[np.argmin(score[..., order], axis=-1)]


# ---------------------------------------------------------------------------
# sampler


def _psd_sqrt(Omega: np.ndarray, error=NonPsdOmega, what="Omega") -> np.ndarray:
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    if not np.all(np.isfinite(Omega)):
        raise error(f"{what} has non-finite entries")
    if not np.allclose(Omega, Omega.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(Omega).max())):
        raise error(f"{what} is not symmetric")
    sym = 0.5 * (Omega + Omega.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, np.abs(vals).max())
    if vals.min() < -1e-10 * scale:
        raise error(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def standard_normal_draws(seed: int, J: int, d: int) -> np.ndarray:
    """``J x d`` standard normals from counter-based Philox substreams.

    Draws are generated in fixed-size chunks; chunk ``c`` uses the substream
    keyed by ``(seed, c)`` so the result does not depend on evaluation order.
    """
    out = np.empty((J, d))
    for c, start in enumerate(range(0, J, DRAW_CHUNK)):
        stop = min(J, start + DRAW_CHUNK)
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(c,))))
        out[start:stop] = gen.standard_normal((stop - start, d))
    return out


@dataclass
class LambdaSampler:
    """Simulator for the limit law of an averaging estimator.

    Parameters
    ----------
    noise_loadings : ndarray, shape (C, d)
        Row ``c`` is ``a_c`` so that candidate ``c``'s noise is ``a_c' N``.
    bias_loadings : ndarray, shape (C, r+q)
        Row ``c`` is ``m_c`` so that candidate ``c``'s bias is ``m_c' xi``.
    omega : ndarray, shape (d, d)
        Covariance of ``N``.
    weight_rule : WeightRule
    psi : ndarray, shape (r+q, d), optional
        Maps ``N`` to the limit noise of the bias estimates; needed by the
        GFIC rule and by the two-step interval.
    draws : int
        Number of simulated draws ``J``.
    seed : int
    labels : sequence of str
    """

    noise_loadings: np.ndarray
    bias_loadings: np.ndarray
    omega: np.ndarray
    weight_rule: WeightRule
    psi: np.ndarray | None = None
    draws: int = 10_000
    seed: int = 0
    labels: Sequence[str] = ()

    def __post_init__(self):
        self.noise_loadings = np.atleast_2d(np.asarray(self.noise_loadings, dtype=float))
        self.bias_loadings = np.atleast_2d(np.asarray(self.bias_loadings, dtype=float))
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        C, d = self.noise_loadings.shape
        if self.bias_loadings.shape[0] != C or self.omega.shape != (d, d):
            raise ConfigError(
                f"inconsistent sampler shapes: a {self.noise_loadings.shape}, m {self.bias_loadings.shape}, "
                f"Omega {self.omega.shape}"
            )
        if self.psi is not None:
            self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
            if self.psi.shape != (self.bias_loadings.shape[1], d):
                raise ConfigError(f"Psi has shape {self.psi.shape}, expected {(self.bias_loadings.shape[1], d)}")
        if self.draws < 1:
            raise ConfigError("draw count must be positive")
        self.labels = tuple(self.labels) or tuple(f"c{j}" for j in range(C))
        self._omega_sqrt = _psd_sqrt(self.omega)

    @property
    def n_candidates(self) -> int:
        return self.noise_loadings.shape[0]

    @property
    def xi_dim(self) -> int:
        return self.bias_loadings.shape[1]

    @cached_property
    def drawset(self) -> DrawSet:
        d = self.omega.shape[0]
        N = standard_normal_draws(self.seed, self.draws, d) @ self._omega_sqrt.T
        PN = N @ self.psi.T if self.psi is not None else None
        return DrawSet(N=N, AN=N @ self.noise_loadings.T, PN=PN)

    def lambdas(self, xis) -> np.ndarray:
        """Simulated ``Lambda_j(xi)`` for each row of ``xis``; shape ``(G, J)``."""
        xis = np.atleast_2d(np.asarray(xis, dtype=float))
        if xis.shape[1] != self.xi_dim:
            raise ConfigError(f"bias parameter has length {xis.shape[1]}, expected {self.xi_dim}")
        ds = self.drawset
        J, C = ds.AN.shape
        step = max(1, GRID_CHUNK_ELEMENTS // (J * C))
        out = np.empty((xis.shape[0], J))
        for g0 in range(0, xis.shape[0], step):
            chunk = xis[g0 : g0 + step]
            bias = chunk @ self.bias_loadings.T  # (G, C)
            w = self.weight_rule.weights(ds, chunk, self)
            if w.ndim == 2:
                idx = w.astype(np.intp)
                pick_noise = np.take_along_axis(ds.AN[None, :, :], idx[..., None], axis=2)[..., 0]
                pick_bias = np.take_along_axis(bias[:, None, :], idx[..., None], axis=2)[..., 0]
                out[g0 : g0 + step] = -(pick_noise + pick_bias)
            else:
                w = np.asarray(w, dtype=float)
                sums = w.sum(axis=-1)
                if np.any(np.abs(sums - 1.0) > 1e-12):
                    raise ConfigError("a weight rule returned weights that do not sum to 1")
                out[g0 : g0 + step] = -np.einsum("gjc,gjc->gj", w, ds.AN[None] + bias[:, None, :])
        return out


def nearest_rank_bounds(J: int, alpha: float) -> tuple[int, int]:
    """0-based order-statistic indices of the equal-tail nearest-rank quantiles."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    lo = max(1, math.ceil(J * alpha / 2 - 1e-9))
    hi = max(1, math.ceil(J * (1 - alpha / 2) - 1e-9))
    return lo - 1, min(hi, J) - 1


def _quantile_pairs(L: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    i, j = nearest_rank_bounds(L.shape[-1], alpha)
    part = np.partition(L, (i, j), axis=-1)
    return part[..., i], part[..., j]


def simulate_lambda_quantiles(s: LambdaSampler, delta, tau, alpha: float) -> tuple[float, float]:
    """Equal-tail ``alpha/2`` and ``1 - alpha/2`` quantiles of ``Lambda(delta, tau)``."""
    xi = np.concatenate([np.atleast_1d(np.asarray(delta, dtype=float)), np.atleast_1d(np.asarray(tau, dtype=float))])
    a, b = _quantile_pairs(s.lambdas(xi[None, :])[0], alpha)
    return float(a), float(b)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    method: str
    alphas: tuple
    draws: int
    mu_hat: float = float("nan")
    region_points: int = 0

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"interval bounds out of order: [{self.lower}, {self.upper}]")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _xi_of(be) -> np.ndarray:
    return np.concatenate([np.atleast_1d(np.asarray(be.delta_hat, dtype=float)), np.atleast_1d(np.asarray(be.tau_hat, dtype=float))])


def one_step_ci(s: LambdaSampler, be, mu_hat: float, n: int, alpha: float = 0.05) -> ConfidenceInterval:
    """``[mu_hat - b_hat/sqrt(n), mu_hat - a_hat/sqrt(n)]`` at the estimated bias parameters."""
    xi = _xi_of(be)
    a, b = _quantile_pairs(s.lambdas(xi[None, :])[0], alpha)
    rt = math.sqrt(n)
    return ConfidenceInterval(
        lower=float(mu_hat - b / rt), upper=float(mu_hat - a / rt), method="one_step", alphas=(alpha,),
        draws=s.draws, mu_hat=float(mu_hat), region_points=1,
    )


def sphere_directions(dim: int, count: int) -> np.ndarray:
    """Deterministic unit directions: +-1 in one dimension, evenly spaced angles in
    two, normalized Halton-normal points otherwise."""
    if dim < 1:
        raise ConfigError("region dimension must be positive")
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    pts = qmc.Halton(d=dim, scramble=False).random(count + 1)[1:]
    z = stats.norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def region_grid(center, metric, alpha1: float, directions: int = 200, shells: int = 5) -> np.ndarray:
    """Points of the ``(1 - alpha1)`` ellipsoid ``{x: (x-c)' metric^{-1} (x-c) <= chi2_d}``.

    The grid is the center plus ``shells`` evenly spaced radial shells along
    each direction; the outermost shell lies on the boundary.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.size
    root = _psd_sqrt(metric, SingularRegionMetric, "region metric Psi Omega Psi'")
    radius = math.sqrt(stats.chi2.ppf(1 - alpha1, df=d))
    dirs = sphere_directions(d, directions)
    fracs = np.arange(1, shells + 1) / shells
    offsets = (fracs[:, None, None] * radius * (dirs @ root.T)[None, :, :]).reshape(-1, d)
    return np.vstack([center[None, :], center[None, :] + offsets])


def two_step_ci(
    s: LambdaSampler,
    be,
    mu_hat: float,
    n: int,
    alpha1: float = 0.05,
    alpha2: float = 0.05,
    directions: int = 200,
    shells: int = 5,
) -> ConfidenceInterval:
    """Conservative interval: widest simulated quantile interval over a confidence
    region for the bias parameters."""
    if s.psi is None:
        raise ConfigError("the two-step interval needs Psi on the sampler")
    xi = _xi_of(be)
    metric = s.psi @ s.omega @ s.psi.T
    pts = region_grid(xi, 0.5 * (metric + metric.T), alpha1, directions, shells)
    a, b = _quantile_pairs(s.lambdas(pts), alpha2)
    rt = math.sqrt(n)
    return ConfidenceInterval(
        lower=float(mu_hat - b.max() / rt), upper=float(mu_hat - a.min() / rt), method="two_step",
        alphas=(alpha1, alpha2), draws=s.draws, mu_hat=float(mu_hat), region_points=pts.shape[0],
    )


# ---------------------------------------------------------------------------
# constructors


def sampler_from_engine(
    lo: LimitObjects,
    specs: Sequence[SpecId],
    grad,
    rule: str | WeightRule = "gfic",
    draws: int = 10_000,
    seed: int = 0,
) -> LambdaSampler:
    """Sampler for candidates of the generic engine.

    ``rule`` is ``"gfic"``, ``"gfic_plus"`` or a :class:`WeightRule`.
    """
    grad = np.asarray(grad, dtype=float)
    a_rows, m_rows, avar = [], [], []
    for spec in specs:
        K = compute_K(lo, spec)
        a = grad @ spec.xi_b(lo.s).T @ K @ spec.xi_c()
        a_rows.append(a)
        m_rows.append(grad @ compute_M(lo, spec, K))
        avar.append(float(a @ lo.Omega @ a))
    if isinstance(rule, str):
        order = sorted(range(len(specs)), key=lambda j: (specs[j].n_params(lo.s), -specs[j].n_moments, specs[j].label))
        rule = GficRule(avar=np.array(avar), criterion=rule, order=order)
    return LambdaSampler(
        noise_loadings=np.array(a_rows),
        bias_loadings=np.array(m_rows),
        omega=lo.Omega,
        weight_rule=rule,
        psi=compute_Psi(lo),
        draws=draws,
        seed=seed,
        labels=[sp.label for sp in specs],
    )


def sampler_from_dpanel(gb, rule: str | WeightRule = "gfic", draws: int = 10_000, seed: int = 0) -> LambdaSampler:
    """Sampler for dynamic panel candidates from a single-panel GficBatch.

    The joint moment vector stacks, per individual, the permuted strict-set
    scores at the valid residuals followed by each candidate's own scores.
    Centering follows the per-block convention (strict sets centered).
    """
    if gb.aux_scores is None or np.ndim(gb.delta_hat) != 1:
        raise ConfigError("sampler_from_dpanel needs a single-panel GficBatch computed with keep_scores=True")
    blocks = [gb.aux_scores]
    mask = [np.ones(gb.aux_scores.shape[-1], dtype=bool)]
    offsets = []
    pos = gb.aux_scores.shape[-1]
    for lab in gb.labels:
        S = gb.scores[lab]
        blocks.append(S)
        mask.append(np.full(S.shape[-1], gb.specs[lab].strict))
        offsets.append((pos, pos + S.shape[-1]))
        pos += S.shape[-1]
    allS = np.concatenate(blocks, axis=-1)
    Omega = scores_vcov(allS, np.concatenate(mask))
    Omega = 0.5 * (Omega + Omega.T)
    d = Omega.shape[0]
    C = len(gb.labels)
    A = np.zeros((C, d))
    Mload = np.zeros((C, gb.m + 1))
    avar = np.zeros(C)
    for c, lab in enumerate(gb.labels):
        ell = gb.specs[lab].lag
        lo_, hi_ = offsets[c]
        A[c, lo_:hi_] = -(gb.grad[: ell + 1] @ gb.Q[lab])
        Mload[c] = -gb.loading[lab]
        avar[c] = gb.avar[lab]
    Psi = np.zeros((gb.m + 1, d))
    Psi[:, : gb.aux_scores.shape[-1]] = gb.Psi_hat
    if isinstance(rule, str):
        T = gb.T
        order = sorted(
            range(C),
            key=lambda j: (gb.specs[gb.labels[j]].lag, -gb.specs[gb.labels[j]].n_moments(T), gb.labels[j]),
        )
        rule = GficRule(avar=avar, criterion=rule, order=order)
    return LambdaSampler(
        noise_loadings=A, bias_loadings=Mload, omega=Omega, weight_rule=rule, psi=Psi, draws=draws, seed=seed,
        labels=list(gb.labels),
    )
