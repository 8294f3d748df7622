"""Finite Markov chains under a fixed policy.

A :class:`MarkovChain` bundles the transition matrix ``P``, per-state costs
``c`` and the discount ``alpha``.  The functions here provide the exact
quantities the rest of the package is checked against: the stationary
distribution, the Poisson-equation solution, the multistep (TD(lambda))
transition matrix and the risk-neutral policy value.  Trajectories are drawn
from explicit, seeded generators so repeated runs are reproducible.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np

from .errors import ConfigError, ErgodicityError, SolverError

ROW_SUM_TOL = 1e-12
DIRECT_SOLVE_LIMIT = 2000


def make_rng(seed):
    """Return a ``numpy.random.Generator`` for an int, SeedSequence or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(_fresh(seed)))


def split_seed(seed, k):
    """Derive ``k`` independent child SeedSequences from ``seed``.

    This is the only seed-splitting rule used by the package:
    ``SeedSequence(seed).spawn(k)``.  Child ``i`` depends on ``seed`` and ``i``
    alone, so adding replications never changes earlier ones.
    """
    return _fresh(seed).spawn(k)


def _fresh(seed):
    # spawn() advances a SeedSequence's child counter; splitting a copy keeps
    # results independent of how often the same seed object was used before
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MarkovChain:
    """Markov system under a fixed policy: ``v = c + alpha * P v`` in the neutral case."""

    P: np.ndarray
    c: np.ndarray
    alpha: float

    def __post_init__(self):
        P = _readonly(self.P)
        c = _readonly(self.c)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "alpha", float(self.alpha))
        _validate_chain(P, c, self.alpha)

    @property
    def n(self):
        return self.P.shape[0]

    @classmethod
    def from_dict(cls, d):
        for key in ("P", "c", "alpha"):
            if key not in d:
                raise ConfigError(f"MDP document is missing field {key!r}")
        try:
            P = np.array(d["P"], dtype=float)
            c = np.array(d["c"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"MDP document has non-numeric entries: {exc}") from None
        if "n" in d and (P.ndim != 2 or int(d["n"]) != P.shape[0]):
            raise ConfigError(f"field 'n'={d['n']} does not match P with shape {P.shape}")
        return cls(P, c, d["alpha"])

    def to_dict(self):
        return {"n": self.n, "alpha": self.alpha, "P": self.P.tolist(), "c": self.c.tolist()}


def _validate_chain(P, c, alpha):
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ConfigError(f"P must be square, got shape {P.shape}")
    n = P.shape[0]
    if n == 0:
        raise ConfigError("P must have at least one state")
    if c.shape != (n,):
        raise ConfigError(f"c must have length {n}, got shape {c.shape}")
    if not np.all(np.isfinite(P)) or not np.all(np.isfinite(c)):
        bad = np.argwhere(~np.isfinite(P))
        where = f" at P[{bad[0][0]}][{bad[0][1]}]" if len(bad) else " in c"
        raise ConfigError("non-finite entry" + where)
    neg = np.argwhere(P < 0)
    if len(neg):
        i, j = neg[0]
        raise ConfigError(f"negative transition probability P[{i}][{j}] = {P[i, j]}")
    dev = np.abs(P.sum(axis=1) - 1.0)
    if np.any(dev > ROW_SUM_TOL):
        i = int(np.argmax(dev > ROW_SUM_TOL))
        raise ConfigError(f"row {i} of P sums to {P[i].sum()!r}, not 1")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly inside (0, 1), got {alpha}")


def load_chain(source):
    """Load a chain from a JSON path or an already parsed dict."""
    if isinstance(source, dict):
        return MarkovChain.from_dict(source)
    try:
        doc = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: expected a JSON object")
    return MarkovChain.from_dict(doc)


# ---------------------------------------------------------------------------
# Structure: connectivity and period


def _reachable(adj, start):
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = np.flatnonzero(adj[frontier].any(axis=0) & ~seen)
        seen[nxt] = True
        frontier = nxt.tolist()
    return seen


def chain_period(P):
    """Period of an irreducible chain: gcd of ``level(u) + 1 - level(v)`` over edges."""
    adj = np.asarray(P) > 0
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    u, v = np.nonzero(adj)
    diffs = np.abs(level[u] + 1 - level[v])
    return int(reduce(math.gcd, diffs.tolist(), 0))


def check_ergodic(P):
    """Raise :class:`ErgodicityError` unless ``P`` is irreducible and aperiodic."""
    adj = np.asarray(P) > 0
    fwd = _reachable(adj, 0)
    bwd = _reachable(adj.T, 0)
    if not fwd.all():
        missing = np.flatnonzero(~fwd).tolist()
        raise ErgodicityError(f"chain is reducible: states {missing} are not reachable from state 0")
    if not bwd.all():
        missing = np.flatnonzero(~bwd).tolist()
        raise ErgodicityError(f"chain is reducible: state 0 is not reachable from states {missing}")
    d = chain_period(P)
    if d != 1:
        raise ErgodicityError(f"chain is periodic with period {d}")


# ---------------------------------------------------------------------------
# Stationary analysis


@dataclass(frozen=True)
class StationaryDistribution:
    q: np.ndarray
    residual: float

    def __post_init__(self):
        object.__setattr__(self, "q", _readonly(self.q))


def stationary_distribution(chain, tol=1e-12, max_iter=1_000_000):
    """Stationary probabilities ``q`` with ``||q'P - q'||_inf <= tol``.

    Chains with at most ``DIRECT_SOLVE_LIMIT`` states are solved directly from
    ``(P' - I) q = 0`` with one equation replaced by ``sum(q) = 1``; larger
    chains use power iteration.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P = chain.P
    check_ergodic(P)
    n = chain.n
    if n <= DIRECT_SOLVE_LIMIT:
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        q = np.linalg.solve(A, b)
        q = np.clip(q, 0.0, None)
        q /= q.sum()
    else:
        q = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            q_next = q @ P
            if np.max(np.abs(q_next - q)) <= tol / 2:
                q = q_next
                break
            q = q_next
        q /= q.sum()
    residual = float(np.max(np.abs(q @ P - q)))
    if residual > tol:
        raise SolverError(f"stationary residual {residual:.3e} exceeds tol {tol:.1e}", residual=residual)
    return StationaryDistribution(q, residual)


def poisson_solution(chain, stat=None, tol=1e-9):
    """Rows ``nu(i) = sum_t (e_i' P^t - q')`` solving the Poisson equation.

    Computed from the fundamental matrix ``Z = (I - P + 1 q')^{-1}`` as
    ``nu = Z - 1 q'``.
    """
    if stat is None:
        stat = stationary_distribution(chain)
    n = chain.n
    q = stat.q
    ones_q = np.outer(np.ones(n), q)
    try:
        Z = np.linalg.solve(np.eye(n) - chain.P + ones_q, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"fundamental matrix is singular: {exc}") from None
    nu = Z - ones_q
    res = poisson_residual(chain, q, nu)
    if res > tol:
        raise SolverError(f"Poisson residual {res:.3e} exceeds {tol:.1e}", residual=res)
    return nu


def poisson_residual(chain, q, nu):
    """``max_i ||nu(i) - e_i + q - sum_j P_ij nu(j)||_inf``."""
    n = chain.n
    return float(np.max(np.abs(nu - np.eye(n) + q[None, :] - chain.P @ nu)))


@dataclass(frozen=True)
class MultistepMatrix:
    Pbar: np.ndarray
    lam: float
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "Pbar", _readonly(self.Pbar))


def multistep_matrix(chain, lam):
    """``Pbar = (1 - lam*alpha) * sum_l (lam*alpha)^l P^l`` by one linear solve."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    la = lam * chain.alpha
    if la >= 1.0:
        raise ValueError(f"lambda*alpha = {la} must be below 1")
    n = chain.n
    if la == 0.0:
        return MultistepMatrix(np.eye(n), lam, chain.alpha)
    Pbar = (1.0 - la) * np.linalg.solve(np.eye(n) - la * chain.P, np.eye(n))
    return MultistepMatrix(Pbar, lam, chain.alpha)


def neutral_policy_value(chain):
    """Risk-neutral value ``v = (I - alpha P)^{-1} c``."""
    return np.linalg.solve(np.eye(chain.n) - chain.alpha * chain.P, chain.c)


def q_norm(h, q):
    h = np.asarray(h)
    return float(np.sqrt(np.sum(q * h * h, axis=-1)))


# ---------------------------------------------------------------------------
# Sampling


class TransitionSampler:
    """Inverse-CDF sampler for the rows of a stochastic matrix.

    A uniform ``u`` maps to the first ``j`` with ``cumsum(P[i])[j] > u``, so
    zero-probability successors are never produced.  Both the sequential walk
    and the batched successor draw use this same rule.
    """

    def __init__(self, P):
        P = np.asarray(P, dtype=float)
        cum = np.cumsum(P, axis=1)
        for i in range(P.shape[0]):
            last = np.flatnonzero(P[i] > 0)[-1]
            cum[i, last:] = 1.0
        self.cum = cum
        self._rows = [row.tolist() for row in cum]

    def walk(self, start, uniforms):
        states = [int(start)]
        rows = self._rows
        i = int(start)
        for u in uniforms.tolist():
            i = bisect.bisect_right(rows[i], u)
            states.append(i)
        return np.array(states, dtype=np.int64)

    def successors(self, states, uniforms):
        """One successor per entry of ``uniforms`` (shape ``(T, N)``) for each state."""
        cum = self.cum[states]
        return (uniforms[:, :, None] >= cum[:, None, :]).sum(axis=-1)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    seed: object
    length: int


def simulate(chain, start, steps, seed):
    """Simulate ``steps`` transitions from ``start``; reproducible given ``seed``."""
    if not 0 <= start < chain.n:
        raise ValueError(f"start state {start} out of range")
    rng = make_rng(seed)
    uniforms = rng.random(steps)
    states = TransitionSampler(chain.P).walk(start, uniforms)
    return Trajectory(states, seed, steps)


def sample_path(chain, start, steps, N, seed):
    """Trajectory plus ``N`` fresh successors of every visited state.

    Returns ``(states, successors)`` where ``states`` has ``steps + 1`` entries
    and ``successors[t]`` holds ``N`` draws from ``P[states[t]]`` that are
    independent of ``states[t + 1]``.  The trajectory and the successor draws
    come from separate child streams of ``seed``.
    """
    traj_seed, succ_seed = split_seed(seed, 2)
    sampler = TransitionSampler(chain.P)
    states = sampler.walk(start, make_rng(traj_seed).random(steps))
    u = make_rng(succ_seed).random((steps, N))
    succ = sampler.successors(states[:steps], u)
    return states, succ


def random_ergodic_chain(n, alpha, rng, density=1.0, cost_range=(0.0, 1.0)):
    """Random ergodic chain; sparse rows keep a cycle and one self-loop."""
    rng = make_rng(rng)
    P = rng.dirichlet(np.ones(n), size=n)
    if density < 1.0:
        mask = rng.random((n, n)) < density
        mask[np.arange(n), (np.arange(n) + 1) % n] = True
        mask[0, 0] = True
        P = P * mask
        P /= P.sum(axis=1, keepdims=True)
    c = rng.uniform(*cost_range, size=n)
    return MarkovChain(P, c, alpha)
