"""Experiment runner behind ``riskd run``.

An experiment config is a JSON object::

    {
      "scenario": "synthetic-mdp" | "fleet",
      "mdp": {...} | "mdp.json",            # synthetic-mdp
      "features": {...} | "features.json",  # synthetic-mdp
      "env": {...} | "env.json",            # fleet
      "learner": {... learner config, including "risk" ...},
      "grid": {"beta": [0, 1], "lambda": [0, 0.5, 0.9]},   # optional
      "replications": 20,
      "seed": 0,                            # master seed
      "oracle": true,                       # synthetic-mdp: compare with exact solutions
      "record_every": 1,
      "cdf_stage": 200                      # fleet: stage for the profit CDF comparison
    }

Paths are resolved relative to the config file.  Every (grid cell,
replication) pair is an independent job; replication ``k`` uses child ``k``
of the master seed in every cell, so cells are compared on common random
numbers.
"""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, SolverError
from .fleet import FleetConfig, load_env, run_optimistic
from .markov import MarkovChain, load_chain, split_seed, stationary_distribution
from .projected import load_features, solve_multistep, solve_single_step
from .risk import RiskMapping, contraction_flags, distortion_coefficient
from .td import LearnerConfig, run_learner, validate_schedule

SCENARIOS = ("synthetic-mdp", "fleet")
METRICS = {
    "synthetic-mdp": ("td", "W"),
    "fleet": ("profit", "avg_profit", "td"),
}


@dataclass
class ExperimentConfig:
    scenario: str
    learner: LearnerConfig
    replications: int = 1
    seed: int = 0
    mdp: MarkovChain | None = None
    features: dict | None = None
    env: FleetConfig | None = None
    grid: dict = field(default_factory=dict)
    oracle: bool = True
    record_every: int = 1
    cdf_stage: int = 200
    output: str | None = None

    @classmethod
    def from_dict(cls, d, base=Path(".")):
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {
            "scenario", "mdp", "features", "env", "learner", "grid", "replications",
            "seed", "oracle", "record_every", "cdf_stage", "output",
        }
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unexpected experiment fields {sorted(extra)}")
        scenario = d.get("scenario")
        if scenario not in SCENARIOS:
            raise ConfigError(f"field 'scenario' must be one of {SCENARIOS}, got {scenario!r}")
        learner = _section("learner", d, base, LearnerConfig.from_dict)
        kw = {"scenario": scenario, "learner": learner}
        for key, typ in (("replications", int), ("seed", int), ("record_every", int), ("cdf_stage", int)):
            if key in d:
                if not isinstance(d[key], typ) or isinstance(d[key], bool):
                    raise ConfigError(f"field {key!r} must be an integer, got {d[key]!r}")
                kw[key] = d[key]
        if kw.get("replications", 1) < 0:
            raise ConfigError("field 'replications' must be nonnegative")
        if kw.get("record_every", 1) < 1:
            raise ConfigError("field 'record_every' must be at least 1")
        if "oracle" in d:
            kw["oracle"] = bool(d["oracle"])
        if "output" in d:
            kw["output"] = str(base / d["output"])
        if scenario == "synthetic-mdp":
            kw["mdp"] = _section("mdp", d, base, load_chain)
            kw["features"] = _section("features", d, base, lambda x: x)
            if learner.alpha is not None and abs(learner.alpha - kw["mdp"].alpha) > 1e-15:
                raise ConfigError(f"learner.alpha {learner.alpha} differs from mdp.alpha {kw['mdp'].alpha}")
        else:
            kw["env"] = _section("env", d, base, load_env)
            if learner.alpha is not None and abs(learner.alpha - kw["env"].alpha) > 1e-15:
                raise ConfigError(f"learner.alpha {learner.alpha} differs from env.alpha {kw['env'].alpha}")
        grid = d.get("grid", {})
        if not isinstance(grid, dict) or set(grid) - {"beta", "lambda"}:
            raise ConfigError("field 'grid' may only contain 'beta' and 'lambda' lists")
        for key, vals in grid.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"grid.{key} must be a nonempty list")
            for v in vals:
                if not isinstance(v, (int, float)) or not 0 <= v <= 1:
                    raise ConfigError(f"grid.{key} entries must lie in [0, 1], got {v!r}")
        kw["grid"] = grid
        return cls(**kw)

    def cells(self):
        """``[(tag, learner config)]`` for each grid cell, in a fixed order."""
        betas = self.grid.get("beta")
        lams = self.grid.get("lambda")
        if not betas and not lams:
            return [("", self.learner)]
        out = []
        for beta, lam in itertools.product(betas or [None], lams or [None]):
            cfg = self.learner
            parts = []
            if beta is not None:
                cfg = replace(cfg, risk=RiskMapping.mean_semideviation(beta))
                parts.append(f"beta{beta:g}")
            if lam is not None:
                cfg = replace(cfg, lam=float(lam))
                parts.append(f"lambda{lam:g}")
            out.append(("_".join(parts), cfg))
        return out


def _section(key, d, base, parse):
    if key not in d:
        raise ConfigError(f"experiment config is missing {key!r}")
    val = d[key]
    try:
        if isinstance(val, str):
            path = base / val
            try:
                val = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
            except OSError as exc:
                raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        return parse(val)
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc!r}") from None


def load_experiment(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return ExperimentConfig.from_dict(doc, path.parent)


# ---------------------------------------------------------------------------
# Result tables


@dataclass
class ResultTable:
    """Long-format rows ``(replication, t, metric, value)`` sorted by ``(replication, t)``."""

    rows: list = field(default_factory=list)

    HEADER = ("replication", "t", "metric", "value")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for rep, t, metric, value in self.rows:
                w.writerow([rep, t, metric, repr(float(value))])

    def values(self, metric):
        return [(rep, t, v) for rep, t, m, v in self.rows if m == metric]


def empirical_cdf(values):
    """Right-continuous empirical CDF as ``[(value, fraction <= value)]``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empirical_cdf needs at least one value")
    u, counts = np.unique(values, return_counts=True)
    frac = np.cumsum(counts) / values.size
    frac[-1] = 1.0
    return [(float(a), float(b)) for a, b in zip(u, frac)]


def _cdf_at(cdf, x):
    vals = np.array([v for v, _ in cdf])
    fr = np.array([f for _, f in cdf])
    idx = np.searchsorted(vals, x, side="right") - 1
    return np.where(idx >= 0, fr[np.clip(idx, 0, None)], 0.0)


def dominance_check(cdf_a, cdf_b, tol=1e-12):
    """First-order dominance between two empirical CDFs of profits.

    ``a`` dominates ``b`` when ``F_a <= F_b`` everywhere (``a`` puts less mass
    on low profits).  Advisory: the report states what holds and by how much
    it fails, it never raises.
    """
    xs = np.union1d([v for v, _ in cdf_a], [v for v, _ in cdf_b])
    Fa = _cdf_at(cdf_a, xs)
    Fb = _cdf_at(cdf_b, xs)
    viol_ab = float(np.max(np.clip(Fa - Fb, 0, None)))
    viol_ba = float(np.max(np.clip(Fb - Fa, 0, None)))
    return {
        "a_dominates_b": viol_ab <= tol,
        "b_dominates_a": viol_ba <= tol,
        "max_violation": viol_ab,
        "max_violation_reverse": viol_ba,
        "mean_a": float(sum(v * (f - p) for (v, f), p in zip(cdf_a, [0.0] + [f for _, f in cdf_a[:-1]]))),
        "mean_b": float(sum(v * (f - p) for (v, f), p in zip(cdf_b, [0.0] + [f for _, f in cdf_b[:-1]]))),
    }


# ---------------------------------------------------------------------------
# Jobs


def _synthetic_job(args):
    chain, fm, learner, oracles, seed, record_every = args
    sol = oracles.get("target")
    ls = learner.initial_state(fm.m, chain.alpha)
    trace = run_learner(chain, fm, learner.risk, ls, learner.steps, seed, start=learner.start, oracle=sol)
    keep = slice(record_every - 1, None, record_every)
    rows = []
    for t, d, w in zip(trace.t[keep].tolist(), trace.td[keep].tolist(), trace.W[keep].tolist()):
        rows.append((t, "td", d))
        if sol is not None:
            rows.append((t, "W", w))
    info = trace.summary()
    r = trace.final.r
    for name, s in oracles.items():
        if s is not None and name != "target":
            den = fm.norm(s.v_star)
            info[f"relative_error_vs_{name}"] = fm.norm(fm.Phi @ r - s.v_star) / den if den > 0 else None
    return rows, info, None


def _fleet_job(args):
    env, learner, seed, record_every, cdf_stage = args
    run = run_optimistic(env, learner, learner.steps, seed)
    avg = run.running_average
    keep = slice(record_every - 1, None, record_every)
    rows = []
    t_idx = np.arange(len(run.profit))
    for t, p, a, d in zip(t_idx[keep].tolist(), run.profit[keep].tolist(), avg[keep].tolist(), run.trace.td[keep].tolist()):
        rows.append((t, "profit", p))
        rows.append((t, "avg_profit", a))
        rows.append((t, "td", d))
    info = run.trace.summary()
    info["final_avg_profit"] = float(avg[-1]) if len(avg) else None
    stage_avg = float(avg[cdf_stage - 1]) if len(avg) >= cdf_stage else None
    return rows, info, stage_avg


def _run_jobs(fn, jobs, parallel):
    if parallel and parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _oracles(chain, fm, risk, lam):
    out = {}
    report = distortion_coefficient(risk, chain.P, chain.alpha)
    out["single_step"] = solve_single_step(fm, chain, risk, override=True, report=report)
    if lam > 0:
        out["multistep"] = solve_multistep(fm, chain, risk, lam, override=True, report=report)
        out["target"] = out["multistep"]
    else:
        out["target"] = out["single_step"]
    return out, report


def run_experiment(cfg, out_dir, master_seed=None, parallel=1, svg=False):
    """Execute every grid cell and write CSV results plus ``summary.json``.

    Returns ``(summary, failed)``; ``failed`` is true when any job hit a
    numerical failure (its partial rows are still written).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if master_seed is None else master_seed
    rep_seeds = split_seed(seed, cfg.replications) if cfg.replications else []
    cells = cfg.cells()
    summary = {
        "scenario": cfg.scenario,
        "master_seed": seed,
        "replications": cfg.replications,
        "seed_rule": "numpy SeedSequence(master_seed).spawn(replications); child k drives replication k in every cell",
        "cells": {},
        "errors": [],
    }
    failed = False
    stage_avgs = {}
    if cfg.scenario == "synthetic-mdp":
        stat = stationary_distribution(cfg.mdp)
        fm = load_features(cfg.features, stat)
    for tag, learner in cells:
        cell = {"learner": learner.to_dict()}
        cell["schedule_validation"] = validate_schedule(learner.schedule, max(learner.steps, 1000)).to_dict()
        table = ResultTable()
        infos = []
        if cfg.scenario == "synthetic-mdp":
            chain = cfg.mdp
            oracles = {}
            report = distortion_coefficient(learner.risk, chain.P, chain.alpha)
            if cfg.oracle:
                try:
                    oracles, report = _oracles(chain, fm, learner.risk, learner.lam)
                    cell["oracle"] = {k: v.to_dict() for k, v in oracles.items() if k != "target"}
                except SolverError as exc:
                    failed = True
                    summary["errors"].append({"cell": tag, "stage": "oracle", "message": str(exc)})
                    oracles = {}
            cell["contraction"] = report.to_dict()
            jobs = [(chain, fm, learner, oracles, s, cfg.record_every) for s in rep_seeds]
            results = _run_jobs(_synthetic_job, jobs, parallel)
        else:
            beta = learner.risk.beta if learner.risk.kind == "mean_semideviation" else None
            kappa = 0.0 if learner.risk.is_neutral else beta
            if kappa is not None:
                td0, tdl = contraction_flags(kappa, cfg.env.alpha)
                cell["contraction"] = {
                    "kappa_hat": kappa,
                    "method": "upper bound beta (demand law not enumerated)",
                    "condition_td0": td0,
                    "condition_tdlambda": tdl,
                }
            else:
                cell["contraction"] = {"kappa_hat": None, "method": "not available for this risk kind"}
            jobs = [(cfg.env, learner, s, cfg.record_every, cfg.cdf_stage) for s in rep_seeds]
            results = _run_jobs(_fleet_job, jobs, parallel)
        stage = []
        for rep, (rows, info, stage_avg) in enumerate(results):
            table.rows.extend((rep, t, m, v) for t, m, v in rows)
            infos.append(info)
            if info.get("error"):
                failed = True
                summary["errors"].append({"cell": tag, "replication": rep, "message": info["error"]})
            if stage_avg is not None:
                stage.append(stage_avg)
        name = f"results_{tag}.csv" if tag else "results.csv"
        table.write_csv(out_dir / name)
        cell["results_file"] = name
        cell["replication_summaries"] = infos
        cell["final"] = _aggregate(infos)
        if stage:
            stage_avgs[tag] = stage
            cell["stage_average_profit"] = {"t": cfg.cdf_stage, "values": stage}
        if svg and results:
            _write_svg(out_dir / (name[:-4] + ".svg"), table, cfg.scenario)
        summary["cells"][tag or "default"] = cell
    if cfg.scenario == "fleet":
        summary["comparisons"] = _compare_betas(cfg, stage_avgs, summary["cells"])
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return summary, failed


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _aggregate(infos):
    out = {}
    keys = sorted({k for info in infos for k, v in info.items() if isinstance(v, float)})
    for k in keys:
        vals = [info[k] for info in infos if isinstance(info.get(k), float)]
        out[k] = {"mean": float(np.mean(vals)), "min": float(np.min(vals)), "max": float(np.max(vals))}
    return out


def _compare_betas(cfg, stage_avgs, cells):
    """Risk-averse (largest beta) versus risk-neutral (beta 0) per lambda."""
    betas = cfg.grid.get("beta") or []
    if 0 not in betas or len(betas) < 2:
        return []
    hi = max(betas)
    lams = cfg.grid.get("lambda") or [None]
    out = []
    for lam in lams:
        def tag(b):
            parts = [f"beta{b:g}"] + ([f"lambda{lam:g}"] if lam is not None else [])
            return "_".join(parts)
        a, b = tag(hi), tag(0)
        entry = {"risk_averse": a, "risk_neutral": b}
        fa = cells[a]["final"].get("final_avg_profit", {}).get("mean")
        fb = cells[b]["final"].get("final_avg_profit", {}).get("mean")
        if fa is not None and fb is not None:
            entry["mean_final_avg_profit_difference"] = fa - fb
        if stage_avgs.get(a) and stage_avgs.get(b):
            entry["t"] = cfg.cdf_stage
            entry["dominance"] = dominance_check(empirical_cdf(stage_avgs[a]), empirical_cdf(stage_avgs[b]))
        out.append(entry)
    return out


def _write_svg(path, table, scenario, width=640, height=320):
    metric = "avg_profit" if scenario == "fleet" else ("W" if table.values("W") else "td")
    series = {}
    for rep, t, v in table.values(metric):
        series.setdefault(rep, []).append((t, v))
    pts = [p for s in series.values() for p in s if np.isfinite(p[1])]
    if not pts:
        return
    t0, t1 = min(p[0] for p in pts), max(p[0] for p in pts)
    v0, v1 = min(p[1] for p in pts), max(p[1] for p in pts)
    sx = (width - 60) / max(t1 - t0, 1)
    sy = (height - 40) / (v1 - v0 if v1 > v0 else 1.0)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="10" y="15" font-size="12">{metric} ({scenario})  [{v0:.4g}, {v1:.4g}]</text>',
    ]
    for rep in sorted(series):
        coords = " ".join(
            f"{50 + (t - t0) * sx:.1f},{height - 20 - (v - v0) * sy:.1f}" for t, v in series[rep] if np.isfinite(v)
        )
        lines.append(f'<polyline fill="none" stroke="steelblue" stroke-opacity="0.5" points="{coords}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
