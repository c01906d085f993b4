"""Command-line interface: ``gfic select | simulate | ci | replicate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import altcrit, mclab
from .dpanel import DpanelSpec, gfic_batch, gfic_dpanel_details, select_batch
from .engine import LimitObjects, SpecId
from .errors import ConfigError, DataError, GficError, MissingDataset, SingularDesign
from .inference import FixedWeights, one_step_ci, sampler_from_dpanel, sampler_from_engine, two_step_ci
from .panel import PanelDataset, load_panel, panel_from_frame, project_out_controls

CONFIG_KEYS = {
    "select": {"data", "candidates", "target", "criterion", "k", "schema", "controls_mode", "out", "format", "seed", "threads"},
    "simulate": {"design", "reps", "seed", "threads", "out", "format", "procedure_args"},
    "ci": {
        "data", "candidates", "target", "k", "schema", "controls_mode", "method", "alpha", "alpha1", "alpha2",
        "draws", "rule", "directions", "shells", "seed", "out", "format", "limit_objects", "threads",
    },
    "replicate": {"which", "data", "window", "target", "reps", "seed", "threads", "out", "format"},
}
CONTROL_MODES = ("none", "levels", "differences")
CIGARETTE_RAW = {"state", "year", "price", "cpi", "ndi", "sales", "pimin"}


# ---------------------------------------------------------------------------
# config handling


def _split(v):
    if v is None or isinstance(v, list):
        return v
    return [s.strip() for s in str(v).split(",") if s.strip()]


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge a JSON config file with command-line flags (flags win) and validate keys."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - CONFIG_KEYS[args.command]
        if unknown:
            raise ConfigError(f"unknown config keys for '{args.command}': {sorted(unknown)}")
    for key, val in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if val is not None:
            cfg[key] = val
    threads = cfg.get("threads") or os.environ.get("GFIC_THREADS") or os.cpu_count() or 1
    try:
        cfg["threads"] = max(1, int(threads))
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {threads!r}") from None
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "-")
    cfg.setdefault("format", "csv")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError(f"unknown output format {cfg['format']!r}")
    return cfg


def _write(cfg: dict, text: str, stdout) -> None:
    if cfg["out"] == "-":
        stdout.write(text)
    else:
        Path(cfg["out"]).write_text(text, encoding="utf-8")


def _emit_rows(cfg: dict, rows: list[dict], extra: dict | None, stdout) -> None:
    if cfg["format"] == "json":
        payload = {"rows": rows, **(extra or {})}
        _write(cfg, json.dumps(payload, sort_keys=True, indent=1, default=_json_default) + "\n", stdout)
    else:
        _write(cfg, mclab.rows_to_csv(rows), stdout)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


# ---------------------------------------------------------------------------
# data


def _read_panel(cfg: dict) -> PanelDataset:
    if not cfg.get("data"):
        raise MissingDataset("a panel CSV is required (--data)")
    try:
        p = load_panel(cfg["data"], cfg.get("schema"))
    except FileNotFoundError as exc:
        raise MissingDataset(str(exc)) from None
    mode = cfg.get("controls_mode") or ("differences" if p.n_controls else "none")
    if mode not in CONTROL_MODES:
        raise ConfigError(f"controls_mode must be one of {CONTROL_MODES}")
    if mode == "none":
        return p.without_controls()
    return project_out_controls(p, period_dummies=True, after_differencing=(mode == "differences"))


def cigarette_panel(path, window: tuple[int, int] | None = None) -> PanelDataset:
    """Cigarette demand panel: log sales on log real price with log real income and
    log real minimum neighbouring price as controls.

    Accepts the raw layout (state, year, price, cpi, ndi, sales, pimin; two-digit
    or four-digit years) or a prepared panel CSV with columns id, time, y, x and
    controls.
    """
    path = Path(path)
    if not path.exists():
        raise MissingDataset(f"cigarette dataset not found: {path}")
    df = pd.read_csv(path)
    df.columns = [str(c).strip() for c in df.columns]
    if CIGARETTE_RAW <= set(df.columns):
        year = df["year"].astype(int)
        year = year.where(year >= 100, year + 1900)
        frame = pd.DataFrame(
            {
                "id": df["state"].astype(str),
                "time": year.astype(str),
                "y": np.log(df["sales"]).astype(str),
                "x": np.log(df["price"] / df["cpi"]).astype(str),
                "ln_income": np.log(df["ndi"] / df["cpi"]).astype(str),
                "ln_min_price": np.log(df["pimin"] / df["cpi"]).astype(str),
            }
        )
        if window:
            t = year.to_numpy()
            frame = frame[(t >= window[0]) & (t <= window[1])]
        p = panel_from_frame(frame, "id", "time", "y", "x", ["ln_income", "ln_min_price"])
    else:
        p = load_panel(path)
        if window:
            p = p.window(*window)
    if p.n_controls:
        return project_out_controls(p, period_dummies=True, after_differencing=True)
    return p


def _parse_window(w) -> tuple[int, int] | None:
    if w is None:
        return None
    if isinstance(w, (list, tuple)):
        a, b = w
    else:
        parts = str(w).split(":")
        if len(parts) != 2:
            raise ConfigError(f"window must look like 1975:1980, got {w!r}")
        a, b = parts
    try:
        a, b = int(a), int(b)
    except ValueError:
        raise ConfigError(f"window bounds must be integers, got {w!r}") from None
    if a > b:
        raise ConfigError(f"window start {a} is after its end {b}")
    return a, b


# ---------------------------------------------------------------------------
# commands


def score_table(p: PanelDataset, candidates, target: str, k: int, criterion: str) -> tuple[list[dict], str | None]:
    """Per-candidate GFIC, MMSC and J-test rows plus the selected label."""
    res = gfic_dpanel_details(p, candidates, target, k, on_error="skip")
    chosen = res.select(criterion).label if res.scores else None
    specs = [c if isinstance(c, DpanelSpec) else DpanelSpec.parse(str(c), k) for c in candidates]
    rows = []
    for spec in specs:
        row = {"candidate": spec.label}
        score = next((s for sp, s in res.scores.items() if sp.label == spec.label), None)
        if score is None:
            err = next((e for sp, e in res.errors.items() if sp.label == spec.label), "not scored")
            row.update(status=f"infeasible: {err}")
            rows.append(row)
            continue
        row.update(
            estimate=score.estimate, avar=score.avar, sq_bias=score.sq_bias, gfic=score.gfic,
            gfic_plus=score.gfic_plus,
        )
        try:
            j = altcrit.j_statistic(p, spec, k)
            row.update(j=j.j_stat, df=j.df, p_value=j.p_value)
            for flavor in altcrit.PENALTIES:
                try:
                    row[f"mmsc_{flavor.lower()}"] = altcrit.mmsc(j, p.n, flavor)
                except ConfigError:
                    row[f"mmsc_{flavor.lower()}"] = float("nan")
        except GficError as exc:
            row.update(j=float("nan"), df="", p_value=float("nan"), status=f"J failed: {exc}")
        row.setdefault("status", "ok")
        row["selected"] = spec.label == chosen
        rows.append(row)
    return rows, chosen


SELECT_COLUMNS = [
    "candidate", "estimate", "avar", "sq_bias", "gfic", "gfic_plus", "mmsc_bic", "mmsc_aic", "mmsc_hq", "j", "df",
    "p_value", "selected", "status",
]


def cmd_select(cfg: dict, stdout) -> int:
    p = _read_panel(cfg)
    candidates = _split(cfg.get("candidates")) or ["LP", "LS", "P", "S"]
    k = int(cfg.get("k", 1))
    crit = cfg.get("criterion", "gfic")
    if crit not in ("gfic", "gfic_plus"):
        raise ConfigError(f"criterion must be gfic or gfic_plus, got {crit!r}")
    rows, chosen = score_table(p, candidates, cfg.get("target", "SR"), k, crit)
    rows = [{c: r.get(c, "") for c in SELECT_COLUMNS} for r in rows]
    _emit_rows(cfg, rows, {"selected": chosen, "criterion": crit, "target": cfg.get("target", "SR")}, stdout)
    return 0


def _result_csv(res) -> str:
    # lag-length designs read best as one row per grid point
    if res.design.procedure == "table1":
        return mclab.rows_to_csv(mclab.table1_rows(res))
    return mclab.result_to_csv(res)


def cmd_simulate(cfg: dict, stdout) -> int:
    design = cfg.get("design")
    if design is None:
        raise ConfigError("simulate needs --design NAME or an inline design object in the config file")
    seed = int(cfg["seed"])
    if isinstance(design, dict):
        d = mclab.design_from_dict({**design, "seed": seed, **({"reps": int(cfg["reps"])} if cfg.get("reps") else {})})
    else:
        d = mclab.named_design(str(design), int(cfg["reps"]) if cfg.get("reps") else None, seed)
    if cfg.get("procedure_args"):
        d = d.with_(procedure_args=cfg["procedure_args"])
    out = cfg["out"]
    partial = Path(out + ".partial.csv") if out != "-" else None

    def flush(i, cell):
        if partial is not None:
            rows = mclab.result_rows(mclab.McResult(design=d, cells=[cell]))
            text = mclab.rows_to_csv(rows)
            if i > 0:
                text = text.split("\n", 1)[1]
            with partial.open("w" if i == 0 else "a", encoding="utf-8") as fh:
                fh.write(text)

    res = mclab.run_design(d, threads=cfg["threads"], on_cell=flush)
    if out == "-":
        stdout.write(mclab.result_to_json(res) + "\n" if cfg["format"] == "json" else _result_csv(res))
    else:
        path = Path(out)
        if cfg["format"] == "json":
            path.write_text(mclab.result_to_json(res) + "\n", encoding="utf-8")
        else:
            path.write_text(_result_csv(res), encoding="utf-8")
            path.with_suffix(".json").write_text(mclab.result_to_json(res) + "\n", encoding="utf-8")
        if partial is not None and partial.exists():
            partial.unlink()
    return 0


def _limit_objects_ci(cfg: dict):
    spec = json.loads(Path(cfg["limit_objects"]).read_text(encoding="utf-8"))
    lo = LimitObjects(
        F=np.asarray(spec["F"], dtype=float), Omega=np.asarray(spec["Omega"], dtype=float),
        W=np.asarray(spec.get("W", np.eye(np.asarray(spec["F"]).shape[0])), dtype=float),
        s=int(spec["s"]), p=int(spec["p"]),
    )
    specs = [SpecId(b=tuple(c["b"]), c=tuple(c["c"]), label=c.get("label", f"c{i}")) for i, c in enumerate(spec["specs"])]
    rule = cfg.get("rule", "gfic")
    if rule == "fixed":
        rule = FixedWeights(np.asarray(spec["weights"], dtype=float))
    sampler = sampler_from_engine(lo, specs, spec["grad"], rule, int(cfg.get("draws", 10000)), int(cfg["seed"]))
    be = {"delta_hat": np.atleast_1d(spec.get("delta_hat", [])), "tau_hat": np.atleast_1d(spec.get("tau_hat", []))}
    return sampler, _NS(**be), float(spec["mu_hat"]), int(spec["n"])


class _NS:
    def __init__(self, **kw):
        self.__dict__.update(kw)


def _dpanel_ci(cfg: dict):
    p = _read_panel(cfg)
    candidates = _split(cfg.get("candidates")) or ["LP", "LS", "P", "S"]
    k = int(cfg.get("k", 1))
    gb = gfic_batch(p.y, p.x, candidates, cfg.get("target", "SR"), k, keep_scores=True)
    bad = [lab for lab in gb.labels if not gb.ok[lab]]
    if bad:
        raise SingularDesign(f"candidates {bad} could not be fitted; drop them with --candidates")
    rule = cfg.get("rule", "gfic")
    labels = gb.labels
    if rule == "valid":
        valid = DpanelSpec(k, "P").label
        match = [i for i, lab in enumerate(labels) if gb.specs[lab].lag == k and not gb.specs[lab].strict]
        if not match:
            raise ConfigError(f"rule 'valid' needs the valid candidate ({valid}) among the candidates")
        w = np.zeros(len(labels))
        w[match[0]] = 1.0
        sampler = sampler_from_dpanel(gb, FixedWeights(w), int(cfg.get("draws", 10000)), int(cfg["seed"]))
        mu = float(gb.estimate[labels[match[0]]])
    elif rule in ("gfic", "gfic_plus"):
        sampler = sampler_from_dpanel(gb, rule, int(cfg.get("draws", 10000)), int(cfg["seed"]))
        mu = float(gb.estimate[labels[int(select_batch(gb, rule))]])
    else:
        raise ConfigError(f"rule must be gfic, gfic_plus or valid, got {rule!r}")
    be = _NS(delta_hat=gb.delta_hat, tau_hat=np.atleast_1d(gb.tau_hat))
    return sampler, be, mu, p.n


def cmd_ci(cfg: dict, stdout) -> int:
    method = cfg.get("method", "both")
    if method not in ("1step", "2step", "both"):
        raise ConfigError(f"method must be 1step, 2step or both, got {method!r}")
    sampler, be, mu, n = _limit_objects_ci(cfg) if cfg.get("limit_objects") else _dpanel_ci(cfg)
    rows = []
    if method in ("1step", "both"):
        alpha = float(cfg.get("alpha", 0.05 if method == "1step" else cfg.get("alpha2", 0.05)))
        ci = one_step_ci(sampler, be, mu, n, alpha)
        rows.append(dict(method="1step", mu_hat=mu, lower=ci.lower, upper=ci.upper, alpha=alpha, alpha1="", alpha2="",
                         draws=ci.draws, region_points=ci.region_points, seed=int(cfg["seed"])))
    if method in ("2step", "both"):
        a1, a2 = float(cfg.get("alpha1", 0.05)), float(cfg.get("alpha2", 0.05))
        ci = two_step_ci(sampler, be, mu, n, a1, a2, int(cfg.get("directions", 200)), int(cfg.get("shells", 5)))
        rows.append(dict(method="2step", mu_hat=mu, lower=ci.lower, upper=ci.upper, alpha="", alpha1=a1, alpha2=a2,
                         draws=ci.draws, region_points=ci.region_points, seed=int(cfg["seed"])))
    _emit_rows(cfg, rows, None, stdout)
    return 0


def cmd_replicate(cfg: dict, stdout) -> int:
    which = cfg.get("which")
    seed = int(cfg["seed"])
    reps = int(cfg["reps"]) if cfg.get("reps") else None
    if which == "table1":
        res = mclab.run_design(mclab.named_design("table1", reps, seed), threads=cfg["threads"])
        _emit_rows(cfg, mclab.table1_rows(res), {"design": "table1", "seed": seed, "reps": res.design.reps}, stdout)
    elif which == "refe":
        res = mclab.run_design(mclab.named_design("refe", reps, seed), threads=cfg["threads"])
        rows = []
        for c in res.cells:
            row = {k: c.params[k] for k in ("n", "rho", "gamma")}
            for est in ("RE", "FE", "GFIC", "AVG"):
                loss = c.losses[est]["RMSE"]
                row[est] = loss.value
                row[f"{est}_se"] = loss.mc_se
            row["RE_selected"] = c.selections["GFIC"].get("RE", 0.0)
            rows.append(row)
        _emit_rows(cfg, rows, {"design": "refe", "seed": seed, "reps": res.design.reps}, stdout)
    elif which == "cigarettes":
        if not cfg.get("data"):
            raise MissingDataset("replicate cigarettes needs the dataset path (--data); it is not bundled")
        window = _parse_window(cfg.get("window", "1975:1985"))
        p = cigarette_panel(cfg["data"], window)
        target = cfg.get("target", "SR")
        res = gfic_dpanel_details(p, ["LP", "LS", "P", "S"], target, 1, on_error="skip")
        labs = ["LP", "LS", "P", "S"]
        sc = {s.label: v for s, v in res.scores.items()}
        rows = []
        for name, attr in (("estimate", "estimate"), ("var", "avar"), ("bias2", "sq_bias"), ("gfic", "gfic"), ("gfic_plus", "gfic_plus")):
            row = {"row": name}
            for lab in labs:
                if lab not in sc:
                    row[lab] = ""
                elif name == "bias2" and lab == "LP":
                    row[lab] = ""  # the valid candidate has no squared-bias term
                else:
                    row[lab] = getattr(sc[lab], attr)
            rows.append(row)
        extra = {
            "window": list(window) if window else None, "T": p.T, "n": p.n, "target": target,
            "selected_gfic": res.select("gfic").label, "selected_gfic_plus": res.select("gfic_plus").label,
        }
        for crit in ("gfic", "gfic_plus"):
            rows.append({"row": f"selected_{crit}", **{lab: int(lab == extra[f"selected_{crit}"]) for lab in labs}})
        _emit_rows(cfg, rows, extra, stdout)
    else:
        raise ConfigError(f"unknown replication {which!r}; expected table1, cigarettes or refe")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", help="output path, '-' for standard output (default)")
    common.add_argument("--format", choices=["csv", "json"], help="output format (default csv)")
    common.add_argument("--threads", type=int, help="worker threads (default: GFIC_THREADS or logical cores)")
    common.add_argument("--seed", type=int, help="master seed (default 0)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="panel CSV with columns id,time,y,x[,controls...]")
    data.add_argument("--candidates", help="comma-separated candidate labels, e.g. LP,LS,P,S")
    data.add_argument("--target", choices=["SR", "LR"], help="short-run or long-run effect")
    data.add_argument("--k", type=int, help="lag order of the valid specification (default 1)")
    data.add_argument("--controls-mode", dest="controls_mode", choices=CONTROL_MODES,
                      help="how controls are removed (default: differences when controls exist)")

    parser = argparse.ArgumentParser(prog="gfic", description="Focused model and moment selection for GMM.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common, data], help="score candidate specifications on a panel")
    p.add_argument("--criterion", choices=["gfic", "gfic_plus"])

    p = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo design")
    p.add_argument("--design", help="table1, sec62, sec62-full, refe or slopehet")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("ci", parents=[common, data], help="post-selection confidence intervals")
    p.add_argument("--method", choices=["1step", "2step", "both"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--draws", type=int)
    p.add_argument("--rule", choices=["gfic", "gfic_plus", "valid", "fixed"])
    p.add_argument("--directions", type=int, help="region directions (default 200)")
    p.add_argument("--shells", type=int, help="radial shells (default 5)")
    p.add_argument("--limit-objects", dest="limit_objects", help="JSON file with generic limit objects")

    p = sub.add_parser("replicate", parents=[common], help="reproduce a published table")
    p.add_argument("which", choices=["table1", "cigarettes", "refe"])
    p.add_argument("--data", help="dataset path (cigarettes only)")
    p.add_argument("--window", help="first:last year, e.g. 1975:1980")
    p.add_argument("--target", choices=["SR", "LR"])
    p.add_argument("--reps", type=int)
    return parser


COMMANDS = {"select": cmd_select, "simulate": cmd_simulate, "ci": cmd_ci, "replicate": cmd_replicate}


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, stdout)
    except GficError as exc:
        stderr.write(f"gfic {args.command}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        stderr.write(f"gfic {args.command}: {exc}\n")
        return DataError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
