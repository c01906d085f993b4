"""Monte Carlo designs, loss metrics and deterministic grid execution.

Replication ``r`` of a grid cell draws from the counter-based substream keyed by
``(seed, cell_key, r)`` where ``cell_key`` is a stable hash of the cell's
parameter values, so adding or reordering cells never changes existing cells.
Replications are simulated in memory-bounded chunks and evaluated by batched
procedures that operate on arrays of shape ``(R, n, T)``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import altcrit, classic
from .dpanel import DpanelSpec, gfic_batch, select_batch
from .errors import AllTrimmed, ConfigError, NonPsdCovariance
from .panel import PanelDataset

log = logging.getLogger(__name__)

CHUNK_ELEMENTS = 200_000  # replications x individuals per simulated chunk
METRICS = ("RMSE", "MAD", "TrimmedMSE")


# ---------------------------------------------------------------------------
# data generating processes


@dataclass(frozen=True)
class DpanelDgp:
    """Dynamic panel DGP with jointly normal ``(x_i, eta_i, v_i)``.

    ``Cov(x_t, eta) = sigma_x_eta`` for every ``t`` and
    ``Cov(x_t, v_{t-1}) = sigma_xv``; all other cross covariances are zero and
    every variance is one. Pre-sample values of ``y`` are zero.
    """

    n: int
    T: int
    theta: float = 0.5
    gamma: tuple = (0.4,)
    sigma_x_eta: float = 0.2
    sigma_xv: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in np.atleast_1d(self.gamma)))
        if self.n < 1 or self.T < 1:
            raise ConfigError(f"invalid panel size n={self.n}, T={self.T}")
        if not abs(sum(self.gamma)) < 1:
            raise ConfigError(f"lag coefficients {self.gamma} violate stationarity (|sum| must be < 1)")
        vals = np.linalg.eigvalsh(self.covariance())
        if vals.min() < -1e-12:
            raise NonPsdCovariance(
                f"covariance of (x, eta, v) is not PSD (min eigenvalue {vals.min():.3g}) for "
                f"sigma_x_eta={self.sigma_x_eta}, sigma_xv={self.sigma_xv}, T={self.T}"
            )

    @classmethod
    def local(cls, n: int, T: int, delta: float = 0.0, tau: float = 0.0, **kw) -> "DpanelDgp":
        """One-lag design with ``gamma = delta/sqrt(n)`` and ``E[x_t dv_t] = tau/sqrt(n)``."""
        rt = math.sqrt(n)
        return cls(n=n, T=T, gamma=(delta / rt,), sigma_xv=-tau / rt, **kw)

    @property
    def k(self) -> int:
        return len(self.gamma)

    def covariance(self) -> np.ndarray:
        T = self.T
        d = 2 * T + 1
        S = np.eye(d)
        S[:T, T] = S[T, :T] = self.sigma_x_eta
        shift = np.eye(T, k=-1)  # row t, column t-1
        S[:T, T + 1 :] = self.sigma_xv * shift
        S[T + 1 :, :T] = self.sigma_xv * shift.T
        return S

    def truth(self, target: str = "SR") -> float:
        if target.upper() in ("SR", "SHORT-RUN"):
            return self.theta
        return self.theta / (1.0 - sum(self.gamma))

    def dim(self) -> int:
        return 2 * self.T + 1

    def transform(self, e: np.ndarray):
        """Map standard normals ``(..., n, 2T+1)`` to ``(Y, X)`` levels."""
        T, k = self.T, self.k
        e = e @ _sqrt_psd(self.covariance()).T
        x, eta, v = e[..., :T], e[..., T], e[..., T + 1 :]
        y = np.zeros(e.shape[:-1] + (T + k,))
        for t in range(T):
            acc = self.theta * x[..., t] + eta + v[..., t]
            for j, g in enumerate(self.gamma):
                acc = acc + g * y[..., t + k - j - 1]
            y[..., t + k] = acc
        return y[..., k:], x


@dataclass(frozen=True)
class ReFeDgp:
    """``y = beta x + alpha + eps`` with equicorrelated ``x`` (``rho``) and
    ``Corr(x_t, alpha) = gamma``; unit variances for ``x`` and ``alpha``."""

    n: int
    T: int
    rho: float = 0.3
    gamma: float = 0.0
    sigma2_eps: float = 2.5
    beta: float = 0.5

    def __post_init__(self):
        vals = np.linalg.eigvalsh(self.covariance())
        if vals.min() < -1e-12:
            raise NonPsdCovariance(f"covariance of (x, alpha) not PSD for rho={self.rho}, gamma={self.gamma}")
        if self.sigma2_eps <= 0:
            raise ConfigError("sigma2_eps must be positive")

    def covariance(self) -> np.ndarray:
        T = self.T
        S = np.full((T + 1, T + 1), float(self.rho))
        S[:T, T] = S[T, :T] = self.gamma
        np.fill_diagonal(S, 1.0)
        return S

    def truth(self, target: str = "beta") -> float:
        return self.beta

    def dim(self) -> int:
        return 2 * self.T + 1

    def transform(self, e: np.ndarray):
        T = self.T
        xa = e[..., : T + 1] @ _sqrt_psd(self.covariance()).T
        x, a = xa[..., :T], xa[..., T]
        y = self.beta * x + a[..., None] + math.sqrt(self.sigma2_eps) * e[..., T + 1 :]
        return y, x


@dataclass(frozen=True)
class SlopeHetDgp:
    """``y_it = (beta + eta_i) x_it + eps_it`` with iid standard normal ``x``."""

    n: int
    T: int
    sigma2_eta: float = 0.0
    sigma2_eps: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.sigma2_eta < 0 or self.sigma2_eps <= 0:
            raise ConfigError("variances must be non-negative (sigma2_eps positive)")

    def truth(self, target: str = "beta") -> float:
        return self.beta

    def dim(self) -> int:
        return 2 * self.T + 1

    def transform(self, e: np.ndarray):
        T = self.T
        x = e[..., :T]
        eta = math.sqrt(self.sigma2_eta) * e[..., T]
        y = (self.beta + eta)[..., None] * x + math.sqrt(self.sigma2_eps) * e[..., T + 1 :]
        return y, x


DGP_KINDS = {"dpanel": DpanelDgp, "refe": ReFeDgp, "slopehet": SlopeHetDgp}


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


# ---------------------------------------------------------------------------
# seeding and drawing


def cell_key(params: Mapping) -> int:
    """Stable 32-bit key of a parameter mapping."""
    canon = json.dumps({k: params[k] for k in sorted(params)}, sort_keys=True, default=_jsonable)
    return zlib.crc32(canon.encode())


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (tuple, np.ndarray)):
        return list(np.asarray(v).tolist())
    raise TypeError(type(v))


def replication_rng(seed: int, key: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key, rep))))


def draw_normals(seed: int, key: int, reps: Iterable[int], n: int, d: int) -> np.ndarray:
    reps = list(reps)
    out = np.empty((len(reps), n, d))
    for i, r in enumerate(reps):
        out[i] = replication_rng(seed, key, r).standard_normal((n, d))
    return out


def draw_dpanel(dgp: DpanelDgp, rng: np.random.Generator | int) -> PanelDataset:
    """One simulated panel as a :class:`PanelDataset`."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    Y, X = dgp.transform(rng.standard_normal((dgp.n, dgp.dim())))
    return PanelDataset.from_arrays(Y, X)


def draw_batch(dgp, seed: int, key: int, reps: Sequence[int]):
    """``(Y, X)`` of shape ``(len(reps), n, T)`` for the given replication indices."""
    return dgp.transform(draw_normals(seed, key, reps, dgp.n, dgp.dim()))


# ---------------------------------------------------------------------------
# loss metrics


@dataclass(frozen=True)
class Loss:
    value: float
    mc_se: float
    used: int
    discarded: int = 0


def rmse(err: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(err))))


def mad(err: np.ndarray) -> float:
    return float(np.median(np.abs(err)))


def jackknife_se(values: np.ndarray, stat: Callable[[np.ndarray], float], blocks: int = 20) -> float:
    """Delete-block jackknife standard error over contiguous replication blocks."""
    values = np.asarray(values)
    R = values.shape[0]
    G = min(blocks, R)
    if G < 2:
        return float("nan")
    edges = np.linspace(0, R, G + 1).astype(int)
    ests = np.array([stat(np.concatenate([values[: edges[g]], values[edges[g + 1] :]])) for g in range(G)])
    return float(math.sqrt((G - 1) / G * np.sum((ests - ests.mean()) ** 2)))


def loss_metrics(errors, which: Sequence[str] = ("RMSE", "MAD"), M: float | None = None, estimates=None, blocks: int = 20) -> dict:
    """Loss summaries of per-replication deviations ``estimate - truth``.

    ``TrimmedMSE`` discards replications whose ``|estimate|`` exceeds ``M``
    (``estimates`` default to the errors themselves) and reports the count.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ConfigError("loss metrics need at least one replication")
    out = {}
    for w in which:
        if w == "RMSE":
            out[w] = Loss(rmse(e), jackknife_se(e, rmse, blocks), e.size)
        elif w == "MAD":
            out[w] = Loss(mad(e), jackknife_se(e, mad, blocks), e.size)
        elif w == "TrimmedMSE":
            if M is None or not M > 0:
                raise ConfigError("TrimmedMSE needs a positive trimming constant M")
            est = e if estimates is None else np.asarray(estimates, dtype=float).ravel()
            keep = np.abs(est) <= M
            if not keep.any():
                raise AllTrimmed(f"every replication lies outside [-{M}, {M}]")
            kept = e[keep]
            msq = lambda a: float(np.mean(np.square(a)))
            out[w] = Loss(msq(kept), jackknife_se(kept, msq, blocks), int(keep.sum()), int((~keep).sum()))
        else:
            raise ConfigError(f"unknown metric {w!r}; expected one of {METRICS}")
    return out


# ---------------------------------------------------------------------------
# procedures


@dataclass
class ProcOutput:
    """Per-replication estimates keyed by estimator name and selector choices."""

    estimates: dict
    truths: dict
    choices: dict = field(default_factory=dict)  # selector -> array of labels


def dpanel_table1_procedure(criterion: str = "gfic") -> Callable:
    """Lag-length choice between one and two lags with predetermined instruments,
    for the short-run and long-run targets."""

    def proc(Y, X, dgp: DpanelDgp) -> ProcOutput:
        est, tru, ch = {}, {}, {}
        for target in ("SR", "LR"):
            gb = gfic_batch(Y, X, ["L1", "L2"], target, k=2)
            j = select_batch(gb, criterion)
            e1, e2 = gb.estimate["L1"], gb.estimate["L2"]
            est[f"{target}:L2"] = e2
            est[f"{target}:L1"] = e1
            est[f"{target}:GFIC"] = np.where(j == 0, e1, np.where(j == 1, e2, np.nan))
            for name in ("L2", "L1", "GFIC"):
                tru[f"{target}:{name}"] = dgp.truth(target)
            ch[f"{target}:GFIC"] = np.array(gb.labels + ["failed"], dtype=object)[j]
        return ProcOutput(est, tru, ch)

    return proc


SEC62_CANDIDATES = ("LP", "LS", "P", "S")


def dpanel_selection_procedure(alphas=(0.05, 0.10), criteria=("gfic", "gfic_plus")) -> Callable:
    """Four specifications plus GFIC, GMM-BIC/AIC/HQ and downward J-test selection."""

    def proc(Y, X, dgp: DpanelDgp) -> ProcOutput:
        n = Y.shape[-2]
        gb = gfic_batch(Y, X, list(SEC62_CANDIDATES), "SR", k=1)
        E = np.stack([gb.estimate[c] for c in SEC62_CANDIDATES], axis=-1)
        est = {c: gb.estimate[c] for c in SEC62_CANDIDATES}
        ch = {}
        labels = np.array(list(SEC62_CANDIDATES) + ["failed"], dtype=object)

        def pick(idx):
            safe = np.where(idx < 0, 0, idx)
            out = np.take_along_axis(E, safe[..., None], axis=-1)[..., 0]
            return np.where(idx < 0, np.nan, out)

        for crit in criteria:
            j = select_batch(gb, crit)
            name = "GFIC" if crit == "gfic" else "GFIC+"
            est[name] = pick(j)
            ch[name] = labels[j]
        jb = {c: altcrit.j_statistic_arrays(Y, X, DpanelSpec.parse(c, 1)) for c in SEC62_CANDIDATES}
        ok = np.all([jb[c].ok for c in SEC62_CANDIDATES], axis=0)
        for flavor in altcrit.PENALTIES:
            kap = altcrit.penalty(n, flavor)
            scores = np.stack([jb[c].j_stat - jb[c].df * kap for c in SEC62_CANDIDATES], axis=-1)
            j = _argmin_ordered(scores, [DpanelSpec.parse(c, 1) for c in SEC62_CANDIDATES])
            j = np.where(ok, j, -1)
            est[f"GMM-{flavor}"] = pick(j)
            ch[f"GMM-{flavor}"] = labels[j]
        order = list(altcrit.DOWNWARD_ORDER)
        pos = [SEC62_CANDIDATES.index(c) for c in order]
        P = np.stack([jb[c].p_value for c in order], axis=-1)
        for a in alphas:
            j = np.asarray(pos)[altcrit.downward_from_pvalues(P, a)]
            j = np.where(ok, j, -1)
            name = f"DJ-{int(round(a * 100)):02d}"
            est[name] = pick(j)
            ch[name] = labels[j]
        return ProcOutput(est, {k: dgp.theta for k in est}, ch)

    return proc


def _argmin_ordered(scores: np.ndarray, specs) -> np.ndarray:
    order = sorted(range(len(specs)), key=lambda j: (specs[j].lag, specs[j].label))
    return np.asarray(order)[np.argmin(scores[..., order], axis=-1)]


def refe_procedure() -> Callable:
    """RE, FE, post-selection and averaging estimators."""

    def proc(Y, X, dgp: ReFeDgp) -> ProcOutput:
        r = classic.refe_arrays(Y, X)
        sel = classic.refe_select_arrays(r["tau_hat"], r["sigma2_tau"])
        w = classic.fe_weight(r["tau_hat"], r["sigma2_tau"])
        est = {
            "RE": r["beta_re"],
            "FE": r["beta_fe"],
            "GFIC": np.where(sel, r["beta_re"], r["beta_fe"]),
            "AVG": w * r["beta_fe"] + (1 - w) * r["beta_re"],
        }
        ch = {"GFIC": np.where(sel, "RE", "FE").astype(object)}
        return ProcOutput(est, {k: dgp.beta for k in est}, ch)

    return proc


def slopehet_procedure(sigma_eps: str = "individual") -> Callable:
    def proc(Y, X, dgp: SlopeHetDgp) -> ProcOutput:
        r = classic.slopehet_arrays(Y, X, sigma_eps)
        sel = classic.slopehet_select_arrays(r)
        est = {"OLS": r["beta_ols"], "MG": r["beta_mg"], "GFIC": np.where(sel, r["beta_ols"], r["beta_mg"])}
        ch = {"GFIC": np.where(sel, "OLS", "MG").astype(object)}
        return ProcOutput(est, {k: dgp.beta for k in est}, ch)

    return proc


def per_panel(fn: Callable[[PanelDataset], float], name: str, target: str = "SR") -> Callable:
    """Wrap a single-panel estimator ``fn(panel) -> float`` as a batched procedure.

    Exceptions from ``fn`` count as failures for that replication.
    """

    def proc(Y, X, dgp) -> ProcOutput:
        out = np.empty(Y.shape[0])
        for i in range(Y.shape[0]):
            try:
                out[i] = fn(PanelDataset.from_arrays(Y[i], X[i]))
            except Exception as exc:  # noqa: BLE001 - failures are counted per replication
                log.debug("replication %d failed: %s", i, exc)
                out[i] = np.nan
        return ProcOutput({name: out}, {name: dgp.truth(target)})

    return proc


PROCEDURES = {
    "table1": dpanel_table1_procedure,
    "selection": dpanel_selection_procedure,
    "refe": refe_procedure,
    "slopehet": slopehet_procedure,
}


# ---------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class McDesign:
    """A parameter grid over a DGP family.

    ``base`` holds fixed DGP arguments, ``grid`` maps DGP argument names to the
    values crossed in the grid (``gamma2`` sets the second lag coefficient of a
    dynamic panel).
    """

    name: str
    kind: str
    base: Mapping
    grid: Mapping
    reps: int
    seed: int = 0
    metrics: tuple = ("RMSE", "MAD")
    trim: float | None = None
    procedure: str = "selection"
    procedure_args: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ConfigError(f"unknown DGP kind {self.kind!r}; expected one of {sorted(DGP_KINDS)}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        for name, vals in self.grid.items():
            arr = np.asarray(list(vals), dtype=float)
            if arr.size == 0 or not np.all(np.isfinite(arr)):
                raise ConfigError(f"grid values for {name!r} must be finite and nonempty")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r}")
        if "TrimmedMSE" in self.metrics and not (self.trim and self.trim > 0):
            raise ConfigError("TrimmedMSE requires a positive trimming constant")
        if self.procedure not in PROCEDURES:
            raise ConfigError(f"unknown procedure {self.procedure!r}")

    def cells(self) -> list[dict]:
        names = list(self.grid)
        out = []
        for combo in itertools.product(*(list(self.grid[n]) for n in names)):
            cell = dict(self.base)
            cell.update({n: _plain(v) for n, v in zip(names, combo)})
            out.append(cell)
        return out

    def dgp(self, cell: Mapping):
        args = dict(cell)
        if self.kind == "dpanel":
            g = list(np.atleast_1d(args.pop("gamma", (0.4,))))
            if "gamma2" in args:
                g = [g[0], args.pop("gamma2")]
            args["gamma"] = tuple(g)
        return DGP_KINDS[self.kind](**args)

    def with_(self, **changes) -> "McDesign":
        d = asdict(self)
        d.update(changes)
        return McDesign(**d)


def _plain(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _grid(lo, hi, step):
    k = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(k + 1)]


def named_design(name: str, reps: int | None = None, seed: int = 0) -> McDesign:
    """Predefined designs: ``table1``, ``sec62``, ``sec62-full``, ``refe``, ``slopehet``."""
    if name == "table1":
        d = McDesign(
            name="table1", kind="dpanel",
            base=dict(n=250, T=5, theta=0.5, gamma=(0.4,), sigma_x_eta=0.2, sigma_xv=0.1),
            grid={"gamma2": _grid(0.10, 0.20, 0.01)}, reps=1000, seed=seed, metrics=("MAD",),
            procedure="table1",
        )
    elif name == "sec62":
        d = McDesign(
            name="sec62", kind="dpanel",
            base=dict(n=500, T=5, theta=0.5, sigma_x_eta=0.2),
            grid={"gamma": _grid(0.0, 0.2, 0.05), "sigma_xv": _grid(0.0, 0.2, 0.05)},
            reps=2000, seed=seed, metrics=("RMSE",), procedure="selection",
        )
    elif name == "sec62-full":
        d = McDesign(
            name="sec62-full", kind="dpanel",
            base=dict(theta=0.5, sigma_x_eta=0.2),
            grid={"n": [250, 500], "T": [4, 5], "gamma": _grid(0.0, 0.2, 0.005), "sigma_xv": _grid(0.0, 0.2, 0.005)},
            reps=2000, seed=seed, metrics=("RMSE",), procedure="selection",
        )
    elif name == "refe":
        d = McDesign(
            name="refe", kind="refe",
            base=dict(T=2, sigma2_eps=2.5, beta=0.5),
            grid={"n": [250], "rho": [0.3, 0.5, 0.7], "gamma": _grid(0.0, 0.4, 0.05)},
            reps=10000, seed=seed, metrics=("RMSE",), procedure="refe",
        )
    elif name == "slopehet":
        d = McDesign(
            name="slopehet", kind="slopehet",
            base=dict(n=2000, T=5, sigma2_eps=1.0, beta=1.0),
            grid={"sigma2_eta": [1 / 6, 1 / 3, 2 / 3]},
            reps=1000, seed=seed, metrics=("RMSE",), procedure="slopehet",
        )
    else:
        raise ConfigError(f"unknown design {name!r}; expected table1, sec62, sec62-full, refe or slopehet")
    return d.with_(reps=reps) if reps is not None else d


def design_from_dict(spec: Mapping) -> McDesign:
    """Inline design from a JSON-style mapping (unknown keys rejected)."""
    allowed = {f for f in McDesign.__dataclass_fields__}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown design keys {sorted(unknown)}")
    spec = dict(spec)
    for key in ("metrics",):
        if key in spec:
            spec[key] = tuple(spec[key])
    try:
        return McDesign(**spec)
    except TypeError as exc:
        raise ConfigError(f"invalid design: {exc}") from None


# ---------------------------------------------------------------------------
# execution


@dataclass
class CellResult:
    params: dict
    losses: dict  # estimator -> metric -> Loss
    selections: dict  # selector -> label -> frequency
    failures: dict  # estimator -> count
    raw: dict | None = None


@dataclass
class McResult:
    design: McDesign
    cells: list

    def loss(self, cell_index: int, estimator: str, metric: str) -> Loss:
        return self.cells[cell_index].losses[estimator][metric]

    def find(self, **params) -> CellResult:
        for c in self.cells:
            if all(np.isclose(c.params[k], v) if isinstance(v, float) else c.params[k] == v for k, v in params.items()):
                return c
        raise KeyError(params)


def run_cell(design: McDesign, cell: dict, procedure: Callable | None = None, keep_raw: bool = False) -> CellResult:
    dgp = design.dgp(cell)
    proc = procedure or PROCEDURES[design.procedure](**design.procedure_args)
    key = cell_key(cell)
    chunk = max(1, CHUNK_ELEMENTS // dgp.n)
    outs = []
    for start in range(0, design.reps, chunk):
        reps = range(start, min(design.reps, start + chunk))
        Y, X = draw_batch(dgp, design.seed, key, reps)
        outs.append(proc(Y, X, dgp))
    est = {k: np.concatenate([o.estimates[k] for o in outs]) for k in outs[0].estimates}
    choices = {k: np.concatenate([o.choices[k] for o in outs]) for k in outs[0].choices}
    truths = outs[0].truths
    losses, failures = {}, {}
    for name, e in est.items():
        good = np.isfinite(e)
        failures[name] = int((~good).sum())
        if failures[name]:
            log.warning("cell %s: %s failed in %d of %d replications (excluded)", cell, name, failures[name], e.size)
        if not good.any():
            losses[name] = {}
            continue
        losses[name] = loss_metrics(e[good] - truths[name], design.metrics, design.trim, estimates=e[good])
    selections = {}
    for sel, labs in choices.items():
        labs = np.asarray(labs, dtype=object)
        uniq = sorted(set(labs.tolist()))
        selections[sel] = {u: float(np.mean(labs == u)) for u in uniq}
    raw = {k: v.copy() for k, v in est.items()} if keep_raw else None
    return CellResult(params=dict(cell), losses=losses, selections=selections, failures=failures, raw=raw)


def run_design(
    d: McDesign,
    procedure: Callable | None = None,
    threads: int = 1,
    on_cell: Callable[[int, CellResult], None] | None = None,
    keep_raw: bool = False,
) -> McResult:
    """Run every grid cell; results are ordered by cell index regardless of scheduling.

    ``on_cell`` is called as each cell finishes (in index order) so callers can
    flush partial results.
    """
    cells = d.cells()
    results: list = [None] * len(cells)
    if threads <= 1 or len(cells) == 1:
        for i, c in enumerate(cells):
            results[i] = run_cell(d, c, procedure, keep_raw)
            if on_cell:
                on_cell(i, results[i])
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futures = [ex.submit(run_cell, d, c, procedure, keep_raw) for c in cells]
            for i, f in enumerate(futures):
                results[i] = f.result()
                if on_cell:
                    on_cell(i, results[i])
    return McResult(design=d, cells=results)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def result_rows(res: McResult) -> list[dict]:
    """One row per cell x estimator x metric."""
    names = list(res.design.grid)
    rows = []
    for idx, c in enumerate(res.cells):
        for est, ms in c.losses.items():
            for metric, loss in ms.items():
                row = {"design": res.design.name, "cell": idx}
                row.update({n: c.params[n] for n in names})
                row.update(
                    estimator=est, metric=metric, value=loss.value, mc_se=loss.mc_se, used=loss.used,
                    discarded=loss.discarded, failures=c.failures.get(est, 0),
                )
                rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def result_to_csv(res: McResult) -> str:
    return rows_to_csv(result_rows(res))


def result_to_json(res: McResult) -> str:
    d = res.design
    payload = {
        "design": {
            "name": d.name, "kind": d.kind, "base": dict(d.base), "grid": {k: list(v) for k, v in d.grid.items()},
            "reps": d.reps, "seed": d.seed, "metrics": list(d.metrics), "trim": d.trim, "procedure": d.procedure,
        },
        "cells": [
            {
                "params": c.params,
                "losses": {e: {m: asdict(l) for m, l in ms.items()} for e, ms in c.losses.items()},
                "selections": c.selections,
                "failures": c.failures,
            }
            for c in res.cells
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1, default=_jsonable)


def table1_rows(res: McResult) -> list[dict]:
    """Rows ``gamma2 | SR L2, L1, GFIC | LR L2, L1, GFIC`` with MC-SE columns."""
    rows = []
    for c in res.cells:
        row = {"gamma2": c.params["gamma2"]}
        for target in ("SR", "LR"):
            for est in ("L2", "L1", "GFIC"):
                loss = c.losses[f"{target}:{est}"].get("MAD")
                row[f"{target}_{est}"] = loss.value if loss else float("nan")
                row[f"{target}_{est}_se"] = loss.mc_se if loss else float("nan")
        rows.append(row)
    return rows


def worst_case(res: McResult, estimator: str, metric: str = "RMSE") -> float:
    """Largest loss of ``estimator`` across the grid."""
    return max(c.losses[estimator][metric].value for c in res.cells if c.losses.get(estimator))
