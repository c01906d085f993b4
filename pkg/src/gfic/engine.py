"""Generic GFIC machinery for GMM model and moment selection.

The parameter vector is ``beta = (theta, gamma)`` with ``theta`` of length
``s`` (always estimated) and ``gamma`` of length ``r`` (possibly restricted to
its null value ``gamma0``). The moment vector is ``f = (g, h)`` with ``g`` of
length ``p`` (assumed correct) and ``h`` of length ``q`` (suspect).

A candidate specification selects a subset ``b`` of the ``gamma`` elements to
estimate and a subset ``c`` of the moments to use. For each candidate the
asymptotic MSE of a scalar target ``mu = phi(theta, gamma)`` is estimated as
an asymptotic variance plus an asymptotically unbiased squared-bias estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Hashable, Mapping

import numpy as np

from .errors import DimensionMismatch, EmptyCandidateSet, NonPsdOmega, SingularDesign, SingularWeight

COND_LIMIT = 1e12


def checked_solve(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve ``A X = B``, rejecting empty or ill-conditioned ``A``.

    Raises
    ------
    SingularDesign
        If ``A`` is empty, non-finite, or has condition number above 1e12.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        raise SingularDesign(f"{what}: empty matrix (no identifying information)")
    if not np.all(np.isfinite(A)):
        raise SingularDesign(f"{what}: non-finite entries")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesign(f"{what}: condition number {cond:.3g} exceeds {COND_LIMIT:.0e}")
    return np.linalg.solve(A, B)


def _as_mask(v) -> tuple:
    return tuple(bool(int(e)) for e in np.asarray(v).ravel())


@dataclass(frozen=True)
class SpecId:
    """A (model, moment) selection pair.

    Attributes
    ----------
    b : tuple of bool
        Which elements of ``gamma`` are estimated (length ``r``).
    c : tuple of bool
        Which moment conditions are used (length ``p + q``).
    label : str
        Display name.
    """

    b: tuple
    c: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "b", _as_mask(self.b))
        object.__setattr__(self, "c", _as_mask(self.c))
        if not self.label:
            bits = "".join("1" if e else "0" for e in self.b)
            cbits = "".join("1" if e else "0" for e in self.c)
            object.__setattr__(self, "label", f"b{bits}_c{cbits}")

    @classmethod
    def valid(cls, r: int, p: int, q: int, label: str = "valid") -> "SpecId":
        return cls(b=(True,) * r, c=(True,) * p + (False,) * q, label=label)

    @property
    def n_gamma(self) -> int:
        return sum(self.b)

    @property
    def n_moments(self) -> int:
        return sum(self.c)

    def n_params(self, s: int) -> int:
        return s + self.n_gamma

    def xi_b(self, s: int) -> np.ndarray:
        """Selection matrix of shape ``(s + |b|, s + r)`` picking estimated parameters."""
        keep = np.array((True,) * s + self.b)
        return np.eye(keep.size)[keep]

    def xi_c(self) -> np.ndarray:
        """Selection matrix of shape ``(|c|, p + q)`` picking used moments."""
        keep = np.array(self.c)
        return np.eye(keep.size)[keep]


@dataclass(frozen=True)
class LimitObjects:
    """Estimated limit-theory objects shared by all candidates.

    Attributes
    ----------
    F : ndarray, shape (p + q, s + r)
        Moment Jacobian with blocks ``[G_theta, G_gamma; H_theta, H_gamma]``.
    Omega : ndarray, shape (p + q, p + q)
        Covariance of the limiting moment vector.
    W : ndarray, shape (p + q, p + q)
        Weighting matrix.
    s, p : int
        Lengths of ``theta`` and of the correct moment block ``g``.
    """

    F: np.ndarray
    Omega: np.ndarray
    W: np.ndarray
    s: int
    p: int

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        Om = np.atleast_2d(np.asarray(self.Omega, dtype=float))
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        m = F.shape[0]
        if Om.shape != (m, m) or W.shape != (m, m):
            raise DimensionMismatch(f"Omega {Om.shape} and W {W.shape} must be {m}x{m} to match F {F.shape}")
        if not (0 <= self.s <= F.shape[1] and 0 <= self.p <= m):
            raise DimensionMismatch("s and p must fit inside F")
        if not np.allclose(Om, Om.T, atol=1e-12, rtol=1e-10):
            raise NonPsdOmega("Omega is not symmetric")
        scale = max(1.0, np.abs(Om).max())
        if np.linalg.eigvalsh(Om).min() < -1e-10 * scale:
            raise NonPsdOmega("Omega has a negative eigenvalue")
        if not np.allclose(W, W.T, atol=1e-12, rtol=1e-10):
            raise SingularWeight("W is not symmetric")
        if np.linalg.eigvalsh(W).min() <= 0:
            raise SingularWeight("W is not positive definite")
        for name, v in (("F", F), ("Omega", Om), ("W", W)):
            object.__setattr__(self, name, v)

    @property
    def r(self) -> int:
        return self.F.shape[1] - self.s

    @property
    def q(self) -> int:
        return self.F.shape[0] - self.p

    @property
    def G(self) -> np.ndarray:
        return self.F[: self.p]

    @property
    def H(self) -> np.ndarray:
        return self.F[self.p :]

    @property
    def G_gamma(self) -> np.ndarray:
        return self.F[: self.p, self.s :]

    @property
    def H_gamma(self) -> np.ndarray:
        return self.F[self.p :, self.s :]

    def check_spec(self, spec: SpecId):
        if len(spec.b) != self.r or len(spec.c) != self.p + self.q:
            raise DimensionMismatch(
                f"spec {spec.label} has |b|-length {len(spec.b)}, |c|-length {len(spec.c)}; "
                f"expected r={self.r}, p+q={self.p + self.q}"
            )


@dataclass(frozen=True)
class BiasEstimate:
    """Asymptotically unbiased estimates of the bias parameters.

    ``Psi_hat`` and ``B_hat`` are filled by :func:`compute_Psi` and
    :func:`bias_correct_B`.
    """

    delta_hat: np.ndarray
    tau_hat: np.ndarray
    Psi_hat: np.ndarray | None = None
    B_hat: np.ndarray | None = None

    @property
    def xi_hat(self) -> np.ndarray:
        """Stacked ``[delta_hat; tau_hat]``."""
        return np.concatenate([np.atleast_1d(self.delta_hat), np.atleast_1d(self.tau_hat)])

    def raw_outer(self) -> np.ndarray:
        x = self.xi_hat
        return np.outer(x, x)


@dataclass(frozen=True)
class TargetFunction:
    """Scalar target ``mu = phi(theta, gamma)`` and its gradient in ``beta``."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    name: str = "target"

    def __call__(self, beta) -> float:
        return self.value(np.asarray(beta, dtype=float))


def finite_difference_gradient(f: Callable, beta, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient with step scaled to each coordinate."""
    beta = np.asarray(beta, dtype=float)
    out = np.empty_like(beta)
    for j in range(beta.size):
        step = h * max(1.0, abs(beta[j]))
        up, dn = beta.copy(), beta.copy()
        up[j] += step
        dn[j] -= step
        out[j] = (f(up) - f(dn)) / (2 * step)
    return out


@dataclass(frozen=True)
class GficScore:
    """AMSE estimate for one candidate.

    ``gfic = avar + sq_bias`` keeps a negative squared-bias estimate while
    ``gfic_plus`` truncates it at zero.
    """

    avar: float
    sq_bias: float
    label: str = ""
    n_params: int = 0
    n_moments: int = 0
    estimate: float = float("nan")

    @property
    def gfic(self) -> float:
        return self.avar + self.sq_bias

    @property
    def gfic_plus(self) -> float:
        return self.avar + max(self.sq_bias, 0.0)

    def criterion(self, name: str) -> float:
        if name not in ("gfic", "gfic_plus"):
            raise ValueError(f"unknown criterion {name!r}")
        return getattr(self, name)


def compute_K(lo: LimitObjects, spec: SpecId) -> np.ndarray:
    """``K(b,c) = [F(b,c)' W_c F(b,c)]^{-1} F(b,c)' W_c``.

    Returns a matrix of shape ``(s + |b|, |c|)``.
    """
    lo.check_spec(spec)
    if spec.n_moments == 0:
        raise SingularDesign(f"spec {spec.label} uses no moment conditions")
    Xb, Xc = spec.xi_b(lo.s), spec.xi_c()
    Fbc = Xc @ lo.F @ Xb.T
    Wc = Xc @ lo.W @ Xc.T
    FtW = Fbc.T @ Wc
    return checked_solve(FtW @ Fbc, FtW, f"F'WF for spec {spec.label}")


def compute_M(lo: LimitObjects, spec: SpecId, K: np.ndarray) -> np.ndarray:
    """Bias-loading matrix of shape ``(s + r, r + q)``.

    ``M(b,c) = Xi_b' K Xi_c [-G_gamma, 0; -H_gamma, I] + [0; I_r, 0]`` so that
    the asymptotic bias of the target is ``-grad' M [delta; tau]``.
    """
    lo.check_spec(spec)
    s, r, p, q = lo.s, lo.r, lo.p, lo.q
    K = np.atleast_2d(K)
    if K.shape != (s + spec.n_gamma, spec.n_moments):
        raise DimensionMismatch(f"K has shape {K.shape}, expected {(s + spec.n_gamma, spec.n_moments)}")
    middle = np.zeros((p + q, r + q))
    middle[:, :r] = -lo.F[:, s:]
    middle[p:, r:] = np.eye(q)
    shift = np.zeros((s + r, r + q))
    shift[s:, :r] = np.eye(r)
    return spec.xi_b(s).T @ K @ spec.xi_c() @ middle + shift


def estimate_bias_params(gamma_valid, h_bar, n: int, gamma0=None, lo: LimitObjects | None = None) -> BiasEstimate:
    """``delta_hat = sqrt(n)(gamma_v - gamma0)`` and ``tau_hat = sqrt(n) h_n(beta_v)``.

    Parameters
    ----------
    gamma_valid : array_like, shape (r,)
        ``gamma`` estimates from the valid specification.
    h_bar : array_like, shape (q,)
        Sample mean of the suspect moments at the valid estimate.
    n : int
        Sample size.
    gamma0 : array_like, optional
        Null value of ``gamma`` (zero by default).
    """
    gv = np.atleast_1d(np.asarray(gamma_valid, dtype=float))
    hb = np.atleast_1d(np.asarray(h_bar, dtype=float))
    g0 = np.zeros_like(gv) if gamma0 is None else np.atleast_1d(np.asarray(gamma0, dtype=float))
    if g0.shape != gv.shape:
        raise DimensionMismatch("gamma0 and gamma_valid differ in length")
    if lo is not None and (gv.size != lo.r or hb.size != lo.q):
        raise DimensionMismatch(f"expected r={lo.r}, q={lo.q}; got {gv.size}, {hb.size}")
    rt = np.sqrt(n)
    return BiasEstimate(delta_hat=rt * (gv - g0), tau_hat=rt * hb)


def valid_K(lo: LimitObjects) -> np.ndarray:
    """``K_v = [G' W_gg G]^{-1} G' W_gg`` for the valid specification."""
    G = lo.G
    Wgg = lo.W[: lo.p, : lo.p]
    GtW = G.T @ Wgg
    return checked_solve(GtW @ G, GtW, "G'W_gg G")


def compute_Psi(lo: LimitObjects) -> np.ndarray:
    """``Psi = [-K_v^gamma, 0; -H K_v, I]`` of shape ``(r + q, p + q)``."""
    Kv = valid_K(lo)
    s, r, p, q = lo.s, lo.r, lo.p, lo.q
    Psi = np.zeros((r + q, p + q))
    Psi[:r, :p] = -Kv[s:]
    Psi[r:, :p] = -lo.H @ Kv
    Psi[r:, p:] = np.eye(q)
    return Psi


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def bias_correct_B(be: BiasEstimate, lo: LimitObjects) -> BiasEstimate:
    """Subtract ``Psi Omega Psi'`` from the raw outer product of ``[delta; tau]``."""
    Psi = be.Psi_hat if be.Psi_hat is not None else compute_Psi(lo)
    k = be.xi_hat.size
    if Psi.shape != (k, lo.F.shape[0]):
        raise DimensionMismatch(f"Psi has shape {Psi.shape}, expected {(k, lo.F.shape[0])}")
    B = be.raw_outer() - _sym(Psi @ lo.Omega @ Psi.T)
    return replace(be, Psi_hat=Psi, B_hat=B)


def gfic_score(
    lo: LimitObjects, spec: SpecId, K: np.ndarray, M: np.ndarray, be: BiasEstimate, grad
) -> GficScore:
    """Variance and squared-bias terms of the AMSE estimate for one candidate."""
    grad = np.asarray(grad, dtype=float).ravel()
    s, r, q = lo.s, lo.r, lo.q
    if grad.size != s + r:
        raise DimensionMismatch(f"gradient has length {grad.size}, expected {s + r}")
    if M.shape != (s + r, r + q):
        raise DimensionMismatch(f"M has shape {M.shape}, expected {(s + r, r + q)}")
    if be.B_hat is None or be.B_hat.shape != (r + q, r + q):
        raise DimensionMismatch("bias estimate lacks a corrected B_hat of matching size")
    Xc = spec.xi_c()
    a = grad @ spec.xi_b(s).T @ K
    avar = float(a @ (Xc @ lo.Omega @ Xc.T) @ a)
    m = grad @ M
    sq_bias = float(m @ be.B_hat @ m)
    return GficScore(
        avar=max(avar, 0.0), sq_bias=sq_bias, label=spec.label, n_params=spec.n_params(s), n_moments=spec.n_moments
    )


def score_candidates(lo: LimitObjects, specs, be: BiasEstimate, grad) -> dict:
    """Score every candidate in ``specs``; returns ``{SpecId: GficScore}``."""
    if be.B_hat is None:
        be = bias_correct_B(be, lo)
    out = {}
    for spec in specs:
        K = compute_K(lo, spec)
        out[spec] = gfic_score(lo, spec, K, compute_M(lo, spec, K), be, grad)
    return out


def _tie_key(key, score: GficScore):
    label = score.label or (key.label if isinstance(key, SpecId) else str(key))
    return (score.n_params, -score.n_moments, label)


def select(scores: Mapping[Hashable, GficScore], criterion: str = "gfic_plus"):
    """Key of the candidate minimizing ``criterion``.

    Exact ties go to the candidate with fewer estimated parameters, then more
    moment conditions, then the smaller label.
    """
    if not scores:
        raise EmptyCandidateSet("no candidates to select from")
    items = list(scores.items())
    best = min(s.criterion(criterion) for _, s in items)
    tied = [(k, s) for k, s in items if s.criterion(criterion) == best]
    return min(tied, key=lambda ks: _tie_key(*ks))[0]
