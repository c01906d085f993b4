"""Balanced panel data model, CSV ingestion and the basic panel transforms.

A :class:`PanelDataset` stores an outcome ``y``, a scalar regressor ``x`` and
optional exogenous controls as dense ``(n, T)`` arrays. Periods are positional:
column ``j`` of every array is period ``t = j + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateCell,
    MissingColumn,
    NonNumericValue,
    RankDeficientControls,
    TooFewPeriods,
    UnbalancedPanel,
)

DEFAULT_SCHEMA = {"id": "id", "time": "time", "y": "y", "x": "x"}


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of ``n`` individuals observed over ``T`` periods.

    Attributes
    ----------
    ids : tuple of str
        Individual labels, in row order of the value arrays.
    times : tuple of int
        Period labels, strictly increasing with a constant step.
    y, x : ndarray, shape (n, T)
        Outcome and scalar regressor.
    controls : ndarray, shape (n, T, c)
        Exogenous control columns (``c`` may be zero).
    control_names : tuple of str
        Names of the control columns.
    """

    ids: tuple
    times: tuple
    y: np.ndarray
    x: np.ndarray
    controls: np.ndarray = None
    control_names: tuple = ()

    def __post_init__(self):
        y = _frozen(self.y)
        x = _frozen(self.x)
        if y.ndim != 2 or y.shape != x.shape:
            raise UnbalancedPanel(f"y and x must share a 2-d (n, T) shape, got {y.shape} and {x.shape}")
        n, T = y.shape
        ctrl = np.zeros((n, T, 0)) if self.controls is None else np.asarray(self.controls, dtype=float)
        if ctrl.ndim == 2:
            ctrl = ctrl[:, :, None]
        if ctrl.shape[:2] != (n, T):
            raise UnbalancedPanel(f"controls shape {ctrl.shape} does not match panel ({n}, {T})")
        names = tuple(self.control_names) or tuple(f"c{j + 1}" for j in range(ctrl.shape[2]))
        if len(names) != ctrl.shape[2]:
            raise MissingColumn("control_names length differs from the number of control columns")
        ids = tuple(str(i) for i in self.ids) if self.ids is not None else tuple(str(i + 1) for i in range(n))
        times = tuple(int(t) for t in self.times) if self.times is not None else tuple(range(1, T + 1))
        if len(ids) != n or len(times) != T:
            raise UnbalancedPanel("ids/times labels do not match the value arrays")
        if len(set(ids)) != n:
            raise DuplicateCell("duplicate individual labels")
        _check_times(times)
        for name, arr in (("y", y), ("x", x), ("controls", ctrl)):
            if not np.all(np.isfinite(arr)):
                raise NonNumericValue(f"non-finite value in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "controls", _frozen(ctrl))
        object.__setattr__(self, "control_names", names)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def n_controls(self) -> int:
        return self.controls.shape[2]

    @classmethod
    def from_arrays(cls, y, x, controls=None, ids=None, times=None, control_names=()):
        """Build a panel from ``(n, T)`` arrays with default labels."""
        return cls(ids=ids, times=times, y=y, x=x, controls=controls, control_names=control_names)

    def window(self, start, stop) -> "PanelDataset":
        """Sub-panel over period labels ``start..stop`` inclusive."""
        times = np.asarray(self.times)
        keep = (times >= start) & (times <= stop)
        if not keep.any():
            raise TooFewPeriods(f"no periods in window {start}:{stop}")
        return PanelDataset(
            ids=self.ids,
            times=tuple(times[keep]),
            y=self.y[:, keep],
            x=self.x[:, keep],
            controls=self.controls[:, keep, :],
            control_names=self.control_names,
        )

    def without_controls(self) -> "PanelDataset":
        return PanelDataset(ids=self.ids, times=self.times, y=self.y, x=self.x)

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.ids == other.ids
            and self.times == other.times
            and self.control_names == other.control_names
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.controls, other.controls)
        )


def _check_times(times: Sequence[int]):
    if len(times) >= 2:
        steps = np.diff(np.asarray(times))
        if np.any(steps <= 0):
            raise UnbalancedPanel("period labels must be strictly increasing")
        if np.any(steps != steps[0]):
            raise UnbalancedPanel("period labels have gaps; periods must be evenly spaced")


@dataclass(frozen=True)
class DiffPanel:
    """First differences of a panel.

    ``dy[:, j]`` and ``dx[:, j]`` hold the differences for period
    ``t = j + 2``. The originating levels are kept in ``levels``.
    """

    levels: PanelDataset
    dy: np.ndarray = field(repr=False)
    dx: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.levels.T

    def lag_dy(self, j: int):
        """Lag view ``L^j dy`` aligned with periods ``2..T``.

        Returns
        -------
        values : ndarray, shape (n, T - 1)
            NaN where the lag is not observable.
        first_period : int
            First period ``t`` (1-based) at which the lag is defined, ``j + 2``.
        """
        if j < 0:
            raise ValueError("lag order must be non-negative")
        out = np.full_like(self.dy, np.nan)
        if j < self.dy.shape[1]:
            out[:, j:] = self.dy[:, : self.dy.shape[1] - j]
        return out, j + 2


def first_difference(p: PanelDataset) -> DiffPanel:
    """Take first differences over time of ``y`` and ``x``."""
    if p.T < 2:
        raise TooFewPeriods(f"first differences need T >= 2, got T={p.T}")
    return DiffPanel(levels=p, dy=_frozen(np.diff(p.y, axis=1)), dx=_frozen(np.diff(p.x, axis=1)))


def _period_dummies(n: int, T: int) -> np.ndarray:
    return np.broadcast_to(np.eye(T), (n, T, T)).astype(float)


def _drop_zero_columns(C: np.ndarray) -> np.ndarray:
    return C[:, np.any(C != 0.0, axis=0)]


def _residualize(C: np.ndarray, targets: np.ndarray):
    """Least-squares residuals of the columns of ``targets`` on ``C``."""
    C = _drop_zero_columns(C)
    if C.shape[1] == 0:
        return targets.copy(), np.zeros((0, targets.shape[1]))
    coef, _, rank, sv = np.linalg.lstsq(C, targets, rcond=None)
    if rank < C.shape[1] or sv[-1] <= sv[0] * 1e-12:
        raise RankDeficientControls(
            f"control block has rank {rank} < {C.shape[1]} columns (collinear controls)"
        )
    return targets - C @ coef, coef


def project_out_controls(
    p: PanelDataset, period_dummies: bool = False, after_differencing: bool = False
) -> PanelDataset:
    """Remove the linear effect of the controls from ``y`` and ``x``.

    Parameters
    ----------
    p : PanelDataset
        Panel with at least one control column, or ``period_dummies=True``.
    period_dummies : bool
        Add one indicator per period to the control block.
    after_differencing : bool
        If False, ``y`` and ``x`` are replaced by residuals of a pooled
        least-squares regression on the controls in levels. If True, the
        differenced series are regressed on differenced controls (and period
        dummies for ``t = 2..T``) and levels are rebuilt so that the first
        differences of the returned panel equal those residuals exactly.

    Returns
    -------
    PanelDataset
        Panel with the controls dropped.
    """
    if p.n_controls == 0 and not period_dummies:
        raise MissingColumn("project_out_controls needs at least one control column")
    n, T = p.n, p.T
    if not after_differencing:
        blocks = [p.controls]
        if period_dummies:
            blocks.append(_period_dummies(n, T))
        C = np.concatenate(blocks, axis=2).reshape(n * T, -1)
        targets = np.column_stack([p.y.ravel(), p.x.ravel()])
        resid, _ = _residualize(C, targets)
        return PanelDataset(ids=p.ids, times=p.times, y=resid[:, 0].reshape(n, T), x=resid[:, 1].reshape(n, T))

    if T < 2:
        raise TooFewPeriods("after_differencing needs T >= 2")
    dC = np.diff(p.controls, axis=1)
    blocks = [dC]
    if period_dummies:
        blocks.append(_period_dummies(n, T - 1))
    D = np.concatenate(blocks, axis=2)
    k_ctrl = dC.shape[2]
    Dflat = D.reshape(n * (T - 1), -1)
    keep = np.any(Dflat != 0.0, axis=0)
    targets = np.column_stack([np.diff(p.y, axis=1).ravel(), np.diff(p.x, axis=1).ravel()])
    _, coef_kept = _residualize(Dflat, targets)
    coef = np.zeros((Dflat.shape[1], 2))
    coef[keep] = coef_kept
    ctrl_coef, dummy_coef = coef[:k_ctrl], coef[k_ctrl:]
    out = []
    for col, level in enumerate((p.y, p.x)):
        fitted = p.controls @ ctrl_coef[:, col]
        trend = np.zeros(T)
        if period_dummies:
            trend[1:] = np.cumsum(dummy_coef[:, col])
        out.append(level - fitted - trend[None, :])
    return PanelDataset(ids=p.ids, times=p.times, y=out[0], x=out[1])


def load_panel(path, schema: Mapping[str, object] | None = None) -> PanelDataset:
    """Read a long-format panel CSV.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    schema : mapping, optional
        Maps the roles ``id``, ``time``, ``y``, ``x`` to column names; the
        optional key ``controls`` lists control columns. By default every
        column other than the four roles is treated as a control.

    Returns
    -------
    PanelDataset
        Validated balanced panel sorted by (id, time).
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"panel file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]
    roles = [schema[k] for k in ("id", "time", "y", "x")]
    for col in roles:
        if col not in df.columns:
            raise MissingColumn(f"column '{col}' not found in {path.name}; have {list(df.columns)}")
    controls = schema.get("controls")
    if controls is None:
        controls = [c for c in df.columns if c not in roles]
    for col in controls:
        if col not in df.columns:
            raise MissingColumn(f"control column '{col}' not found in {path.name}")
    return panel_from_frame(df, schema["id"], schema["time"], schema["y"], schema["x"], list(controls))


def _to_float(series: pd.Series, name: str) -> np.ndarray:
    text = series.str.strip().to_numpy(dtype=str)
    try:
        values = text.astype(float)  # correctly rounded, unlike the pandas fast parser
    except ValueError:
        values = np.array([_parse_or_nan(v) for v in text])
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NonNumericValue(f"column '{name}' has a missing or non-numeric value at data row {row + 1}: {series.iloc[row]!r}")
    return values


def _parse_or_nan(v: str) -> float:
    try:
        return float(v)
    except ValueError:
        return float("nan")


def panel_from_frame(df: pd.DataFrame, id_col, time_col, y_col, x_col, control_cols=()) -> PanelDataset:
    """Validate a long-format frame and reshape it into a PanelDataset."""
    ids = df[id_col].astype(str).str.strip()
    time_f = _to_float(df[time_col].astype(str), time_col)
    if np.any(time_f != np.round(time_f)):
        raise NonNumericValue(f"column '{time_col}' must hold integer period labels")
    times = time_f.astype(np.int64)
    key = pd.DataFrame({"id": ids.to_numpy(), "time": times})
    dup = key.duplicated()
    if dup.any():
        row = key[dup].iloc[0]
        raise DuplicateCell(f"duplicate (id, time) cell ({row['id']}, {row['time']})")
    values = {c: _to_float(df[c].astype(str), c) for c in [y_col, x_col, *control_cols]}
    uid = sorted(set(key["id"]), key=_natural_key)
    utime = np.unique(times)
    n, T = len(uid), len(utime)
    if len(key) != n * T:
        counts = key.groupby("id")["time"].nunique()
        short = counts[counts < T].index[0]
        missing = sorted(set(utime) - set(key.loc[key["id"] == short, "time"]))
        raise UnbalancedPanel(f"id {short} is missing period(s) {missing[:5]}")
    id_pos = {v: i for i, v in enumerate(uid)}
    t_pos = {int(v): j for j, v in enumerate(utime)}
    ri = np.array([id_pos[v] for v in key["id"]])
    ci = np.array([t_pos[int(v)] for v in key["time"]])
    grids = {}
    for c, v in values.items():
        g = np.empty((n, T))
        g[ri, ci] = v
        grids[c] = g
    ctrl = np.stack([grids[c] for c in control_cols], axis=2) if control_cols else None
    return PanelDataset(
        ids=tuple(uid),
        times=tuple(int(t) for t in utime),
        y=grids[y_col],
        x=grids[x_col],
        controls=ctrl,
        control_names=tuple(control_cols),
    )


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def save_panel(p: PanelDataset, path) -> None:
    """Write ``p`` in the long CSV format read by :func:`load_panel`."""
    Path(path).write_text(panel_to_csv(p), encoding="utf-8")


def panel_to_csv(p: PanelDataset) -> str:
    header = ["id", "time", "y", "x", *p.control_names]
    lines = [",".join(header)]
    for i, ident in enumerate(p.ids):
        for j, t in enumerate(p.times):
            vals = [p.y[i, j], p.x[i, j], *p.controls[i, j, :]]
            lines.append(",".join([ident, str(t), *(repr(float(v)) for v in vals)]))
    return "\n".join(lines) + "\n"
