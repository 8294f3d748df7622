"""Fleet repositioning on a small network of locations.

Vehicles sit at ``M`` locations.  Each period a random integer demand
``D[i, j]`` for trips ``i -> j`` appears; the operator then moves every
vehicle either loaded (at most ``D[i, j]`` of them on ``i -> j``, cost
``c_loaded[i, j]``, usually negative = profit) or empty (cost
``c_empty[i, j]``; ``i -> i`` is "stay" with cost 0).  Unserved demand is
lost.  The value function is linear in the state, ``v(x) = r' x``, and the
policy is the one-step look-ahead

    u = argmin_u  c' u + alpha * pi' x',     x'_j = sum_i (u_e[i, j] + u_l[i, j]).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .markov import make_rng, split_seed
from .risk import RiskMapping
from .td import LearnerConfig, LearningTrace, tdlambda_step


@dataclass(frozen=True)
class DemandModel:
    """Per-pair demand law.

    ``kind`` is one of

    * ``"zero"``;
    * ``"deterministic"``: ``D = value`` (scalar or matrix);
    * ``"truncated_poisson"``: independent Poisson(``mean``) conditioned on ``<= cap``;
    * ``"discrete"``: one of the matrices in ``support`` with probabilities ``probs``.

    Diagonal demand is zero unless ``diagonal`` is set.
    """

    kind: str
    M: int
    mean: np.ndarray | None = None
    cap: int = 0
    value: np.ndarray | None = None
    support: np.ndarray | None = None
    probs: np.ndarray | None = None
    diagonal: bool = False

    @classmethod
    def from_dict(cls, d, M):
        kind = d.get("kind")
        diag = bool(d.get("diagonal", False))
        if kind == "zero":
            return cls("zero", M)
        if kind == "deterministic":
            value = np.broadcast_to(np.asarray(d["value"], dtype=np.int64), (M, M)).copy()
            if np.any(value < 0):
                raise ConfigError("deterministic demand must be nonnegative")
            return cls("deterministic", M, value=value, diagonal=diag)
        if kind == "truncated_poisson":
            mean = np.broadcast_to(np.asarray(d.get("mean", 1.0), dtype=float), (M, M)).copy()
            cap = d.get("cap", 3)
            if not isinstance(cap, int) or cap < 0:
                raise ConfigError(f"demand cap must be a nonnegative integer, got {cap!r}")
            if np.any(mean < 0):
                raise ConfigError("demand means must be nonnegative")
            return cls("truncated_poisson", M, mean=mean, cap=cap, diagonal=diag)
        if kind == "discrete":
            support = np.asarray(d["support"], dtype=np.int64)
            if support.ndim != 3 or support.shape[1:] != (M, M) or np.any(support < 0):
                raise ConfigError(f"discrete demand support must be a list of nonnegative {M}x{M} matrices")
            probs = np.asarray(d.get("probs", np.full(len(support), 1.0 / len(support))), dtype=float)
            if probs.shape != (len(support),) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
                raise ConfigError("discrete demand probs must be a probability vector matching support")
            return cls("discrete", M, support=support, probs=probs, diagonal=True)
        raise ConfigError(f"unknown demand kind {kind!r}")

    def to_dict(self):
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "deterministic":
            return {"kind": "deterministic", "value": self.value.tolist(), "diagonal": self.diagonal}
        if self.kind == "truncated_poisson":
            return {"kind": self.kind, "mean": self.mean.tolist(), "cap": self.cap, "diagonal": self.diagonal}
        return {"kind": "discrete", "support": self.support.tolist(), "probs": self.probs.tolist()}

    def pmf(self):
        """Per-pair pmf over ``0..cap`` (truncated Poisson only), shape ``(M, M, cap + 1)``."""
        k = np.arange(self.cap + 1)
        logf = np.array([math.lgamma(j + 1) for j in k])
        with np.errstate(divide="ignore"):
            logw = k * np.log(self.mean[..., None]) - logf
        logw[self.mean == 0] = np.where(k == 0, 0.0, -np.inf)
        w = np.exp(logw - logw.max(axis=-1, keepdims=True))
        return w / w.sum(axis=-1, keepdims=True)

    def truncated_mean(self):
        return (self.pmf() * np.arange(self.cap + 1)).sum(axis=-1)


@dataclass(frozen=True)
class FleetConfig:
    M: int
    fleet_size: int
    c_empty: np.ndarray
    c_loaded: np.ndarray
    demand: DemandModel
    alpha: float
    x0: np.ndarray | None = None
    _cdf: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        M = self.M
        ce = np.array(self.c_empty, dtype=float)
        cl = np.array(self.c_loaded, dtype=float)
        if ce.shape != (M, M) or cl.shape != (M, M):
            raise ConfigError(f"cost matrices must be {M}x{M}")
        if not (np.all(np.isfinite(ce)) and np.all(np.isfinite(cl))):
            raise ConfigError("cost matrices must be finite")
        if np.any(np.diag(ce) != 0):
            raise ConfigError("c_empty must have a zero diagonal (staying is free)")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.fleet_size < 0:
            raise ConfigError("fleet size must be nonnegative")
        object.__setattr__(self, "c_empty", ce)
        object.__setattr__(self, "c_loaded", cl)
        x0 = self.x0
        if x0 is None:
            x0 = np.full(M, self.fleet_size // M, dtype=np.int64)
            x0[: self.fleet_size % M] += 1
        x0 = np.array(x0, dtype=np.int64)
        if x0.shape != (M,) or np.any(x0 < 0) or x0.sum() != self.fleet_size:
            raise ConfigError(f"x0 must be {M} nonnegative counts summing to {self.fleet_size}")
        object.__setattr__(self, "x0", x0)
        if self.demand.kind == "truncated_poisson":
            object.__setattr__(self, "_cdf", np.cumsum(self.demand.pmf(), axis=-1))

    @classmethod
    def from_dict(cls, d):
        for key in ("M", "fleet", "c_empty", "c_loaded", "demand", "alpha"):
            if key not in d:
                raise ConfigError(f"environment config is missing {key!r}")
        M = d["M"]
        if not isinstance(M, int) or M < 1:
            raise ConfigError(f"M must be a positive integer, got {M!r}")
        return cls(
            M=M,
            fleet_size=int(d["fleet"]),
            c_empty=d["c_empty"],
            c_loaded=d["c_loaded"],
            demand=DemandModel.from_dict(d["demand"], M),
            alpha=float(d["alpha"]),
            x0=d.get("x0"),
        )

    def to_dict(self):
        return {
            "M": self.M,
            "fleet": self.fleet_size,
            "c_empty": self.c_empty.tolist(),
            "c_loaded": self.c_loaded.tolist(),
            "demand": self.demand.to_dict(),
            "alpha": self.alpha,
            "x0": self.x0.tolist(),
        }


def load_env(source):
    if isinstance(source, dict):
        return FleetConfig.from_dict(source)
    try:
        return FleetConfig.from_dict(json.loads(Path(source).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: {exc.msg}") from None


def desk_instance(M=4, fleet=8, alpha=0.95, seed=0, mean_scale=0.5, cap=3):
    """A small reproducible instance: random planar locations, distance-based costs.

    Empty moves cost the distance; loaded moves earn ``2 + 0.5 * distance``
    (``c_loaded = -(2 + 0.5 d)``).  Outbound demand rates differ by origin so
    that repositioning matters.
    """
    rng = make_rng(seed)
    xy = rng.uniform(0, 10, size=(M, 2))
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)) / 5.0
    c_empty = np.round(dist, 3)
    c_loaded = np.round(-(2.0 + 0.5 * dist), 3)
    weight = rng.uniform(0.3, 2.0, size=M)
    mean = np.round(mean_scale * weight[:, None] * np.ones(M)[None, :], 3)
    return {
        "M": M,
        "fleet": fleet,
        "c_empty": c_empty.tolist(),
        "c_loaded": c_loaded.tolist(),
        "demand": {"kind": "truncated_poisson", "mean": mean.tolist(), "cap": cap},
        "alpha": alpha,
    }


# ---------------------------------------------------------------------------
# Dynamics


@dataclass(frozen=True)
class Decision:
    u_empty: np.ndarray
    u_loaded: np.ndarray

    def cost(self, cfg):
        return float(np.sum(cfg.c_empty * self.u_empty) + np.sum(cfg.c_loaded * self.u_loaded))


def sample_demands(cfg, rng, k):
    """``k`` iid demand matrices, consuming ``rng`` exactly as ``k`` calls to :func:`sample_demand`."""
    dm = cfg.demand
    if dm.kind != "truncated_poisson":
        return np.array([sample_demand(cfg, rng) for _ in range(k)], dtype=np.int64).reshape(k, cfg.M, cfg.M)
    u = rng.random((k, cfg.M, cfg.M))
    D = np.minimum((u[..., None] >= cfg._cdf).sum(axis=-1), dm.cap).astype(np.int64)
    if not dm.diagonal:
        idx = np.arange(cfg.M)
        D[:, idx, idx] = 0
    return D


def sample_demand(cfg, rng):
    """One demand matrix; draws are iid across calls."""
    dm = cfg.demand
    M = cfg.M
    if dm.kind == "zero":
        return np.zeros((M, M), dtype=np.int64)
    if dm.kind == "deterministic":
        D = dm.value.copy()
    elif dm.kind == "discrete":
        return dm.support[rng.choice(len(dm.support), p=dm.probs)].copy()
    else:
        u = rng.random((M, M))
        D = (u[..., None] >= cfg._cdf).sum(axis=-1).astype(np.int64)
        D = np.minimum(D, dm.cap)
    if not dm.diagonal:
        np.fill_diagonal(D, 0)
    return D


def lookahead_objective(cfg, x, u, pi):
    """``c' u + alpha * pi' x'``."""
    return u.cost(cfg) + cfg.alpha * float(np.asarray(pi, dtype=float) @ transition(x, u))


def solve_lookahead(cfg, x, D, pi):
    """Exact minimizer of ``c' u + alpha * pi' x'`` over feasible decisions.

    As a min-cost flow, every origin ``i`` ships its ``x_i`` vehicles to
    destinations over parallel arcs: a loaded arc of capacity ``D[i, j]`` and
    an uncapacitated empty arc, each priced at its move cost plus
    ``alpha * pi_j``.  Destinations are uncapacitated, so the successive
    shortest augmenting path from origin ``i`` is always its cheapest arc with
    residual capacity, and no augmentation ever reroutes earlier flow.  The
    flow therefore decomposes into one greedy fill per origin, which is what
    is computed here; it is integral by construction.

    Ties are broken deterministically: staying put first, then loaded before
    empty, then by destination index.
    """
    M = cfg.M
    x = np.asarray(x)
    D = np.asarray(D)
    if x.shape != (M,) or np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError(f"x must be {M} nonnegative integers, got {x.tolist()}")
    if D.shape != (M, M) or np.any(D < 0) or np.any(D != np.round(D)):
        raise ValueError(f"D must be an {M}x{M} matrix of nonnegative integers")
    ue = np.zeros((M, M), dtype=np.int64)
    ul = np.zeros((M, M), dtype=np.int64)
    for i, j, loaded, k in _fill(_arc_order(cfg, pi), x.astype(np.int64).tolist(), D.astype(np.int64).tolist()):
        (ul if loaded else ue)[i, j] += k
    return Decision(ue, ul)


def _arc_order(cfg, pi):
    """Per origin, the arcs ``(loaded, j)`` by increasing price, cut after the first empty arc."""
    M = cfg.M
    nv = cfg.alpha * np.asarray(pi, dtype=float)
    ce_all = cfg.c_empty + nv
    cl_all = cfg.c_loaded + nv
    orders = []
    for i in range(M):
        ce = ce_all[i].tolist()
        cl = cl_all[i].tolist()
        # (price, tie rank, destination, loaded)
        arcs = [(ce[i], 0, i, False)]
        arcs += [(cl[j], 1 if j == i else 2, j, True) for j in range(M)]
        arcs += [(ce[j], 3, j, False) for j in range(M) if j != i]
        arcs.sort(key=lambda arc: arc[:3])
        order = []
        for _, _, j, loaded in arcs:
            order.append((loaded, j))
            if not loaded:
                break  # empty arcs are uncapacitated, nothing after this one is used
        orders.append(order)
    return orders


def _fill(orders, x, D):
    """Greedy fill of each origin along its arc order; yields ``(i, j, loaded, count)``."""
    for i, left in enumerate(x):
        if left == 0:
            continue
        Di = D[i]
        for loaded, j in orders[i]:
            k = min(left, Di[j]) if loaded else left
            if k:
                yield i, j, loaded, k
                left -= k
                if left == 0:
                    break


def transition(x, u):
    """Next state ``x'_j = sum_i (u_e[i, j] + u_l[i, j])`` (equivalently ``x - A u``)."""
    x = np.asarray(x, dtype=np.int64)
    out = u.u_empty.sum(axis=1) + u.u_loaded.sum(axis=1)
    if np.any(u.u_empty < 0) or np.any(u.u_loaded < 0) or not np.array_equal(out, x):
        raise ValueError("decision is infeasible: outflows must be nonnegative and match the vehicle counts")
    return u.u_empty.sum(axis=0) + u.u_loaded.sum(axis=0)


def incidence_matrix(M):
    """``A`` with ``x' = x - A [vec(u_e); vec(u_l)]`` (row-major vectorization)."""
    A = np.zeros((M, 2 * M * M), dtype=np.int64)
    for block in range(2):
        for i in range(M):
            for j in range(M):
                col = block * M * M + i * M + j
                A[i, col] += 1
                A[j, col] -= 1
    return A


def scenario_value(cfg, x, D, r):
    """``c' u + alpha * r' x'`` for the look-ahead decision under ``pi = r``."""
    u = solve_lookahead(cfg, x, D, r)
    return u.cost(cfg) + cfg.alpha * float(np.asarray(r) @ transition(x, u))


def observed_td_transport(cfg, x, r, N, rng, risk=None, demands=None, outer_discount=False):
    """Observed TD ``r' x - sigma(P^N, w)`` for the current state.

    ``w^k = c' u^k + alpha * r' x'^k`` is the look-ahead outcome under the
    ``k``-th of ``N`` iid demand draws (or the given ``demands``), and
    ``sigma`` is the plug-in risk on those ``N`` outcomes (default:
    mean-semideviation with ``beta = 1``).  The discount multiplies only the
    next-state value inside ``w``, which makes ``E d = 0`` exactly at a
    solution of ``r' x = sigma(c' u + alpha r' x')``; ``outer_discount=True``
    additionally scales ``sigma`` by ``alpha``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    risk = RiskMapping.mean_semideviation(1.0) if risk is None else risk
    if demands is None:
        demands = [sample_demand(cfg, rng) for _ in range(N)]
    w = _scenario_values(cfg, x, demands, r)
    scale = cfg.alpha if outer_discount else 1.0
    return float(np.asarray(r) @ x) - scale * risk.sample_value(w)


def _scenario_values(cfg, x, demands, r, orders=None):
    # one arc order serves every draw, since prices depend on r only
    if orders is None:
        orders = _arc_order(cfg, r)
    ce, cl = cfg.c_empty.tolist(), cfg.c_loaded.tolist()
    r = np.asarray(r, dtype=float).tolist()
    x = np.asarray(x, dtype=np.int64).tolist()
    a = cfg.alpha
    out = []
    for D in demands:
        cost = 0.0
        nxt = 0.0
        for i, j, loaded, k in _fill(orders, x, np.asarray(D).tolist()):
            cost += k * (cl[i][j] if loaded else ce[i][j])
            nxt += k * r[j]
        out.append(cost + a * nxt)
    return out


def state_codes(xs, fleet_size):
    """Integer id of each state row: ``sum_i x_i (fleet_size + 1)^i``."""
    xs = np.asarray(xs, dtype=np.int64)
    return xs @ (fleet_size + 1) ** np.arange(xs.shape[-1], dtype=np.int64)


@dataclass
class FleetRun:
    trace: LearningTrace
    profit: np.ndarray
    states: np.ndarray

    @property
    def running_average(self):
        return np.cumsum(self.profit) / np.arange(1, len(self.profit) + 1)


def run_optimistic(cfg, learner, steps, seed, r0=None):
    """Learn ``r`` while acting greedily with respect to the current ``r``.

    Per stage: draw ``D_t``; act with ``solve_lookahead(pi = r_t)``; record
    profit ``-c' u_t``; form the observed TD from ``N`` further demand draws;
    update ``r`` with feature vector ``x_t``.  Trajectory demands and TD
    samples use separate child streams of ``seed``, so two learners that
    differ only in their risk mapping see the same demand sequence.
    """
    if not isinstance(learner, LearnerConfig):
        learner = LearnerConfig.from_dict(learner)
    demand_seed, sample_seed = split_seed(seed, 2)
    demand_rng = make_rng(demand_seed)
    sample_rng = make_rng(sample_seed)
    ls = learner.initial_state(cfg.M, cfg.alpha, r0=r0)
    risk = learner.risk
    x = cfg.x0.copy()

    profit = np.empty(steps)
    td = np.empty(steps)
    gam = learner.schedule.values(0, steps)
    states = np.empty((steps + 1, cfg.M), dtype=np.int64)
    states[0] = x
    error = None
    done = steps
    M = cfg.M
    N = learner.N
    for t in range(steps):
        D = sample_demand(cfg, demand_rng)
        r = ls.r
        orders = _arc_order(cfg, r)
        ue = np.zeros((M, M), dtype=np.int64)
        ul = np.zeros((M, M), dtype=np.int64)
        for i, j, loaded, k in _fill(orders, x.tolist(), D.tolist()):
            (ul if loaded else ue)[i, j] += k
        u = Decision(ue, ul)
        profit[t] = -u.cost(cfg)
        w = _scenario_values(cfg, x, sample_demands(cfg, sample_rng, N), r, orders)
        d = float(r @ x) - risk.sample_value(w)
        td[t] = d
        ls = tdlambda_step(ls, x.astype(float), d)
        x = ue.sum(axis=0) + ul.sum(axis=0)
        states[t + 1] = x
        if not (math.isfinite(d) and np.all(np.isfinite(ls.r))):
            error = f"iterates diverged at step {t}"
            done = t + 1
            break
    trace = LearningTrace(
        np.arange(done), state_codes(states[:done], cfg.fleet_size), td[:done], gam[:done],
        np.full(done, np.nan), ls, error,
    )
    return FleetRun(trace, profit[:done], states[: done + 1])


