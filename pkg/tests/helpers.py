"""Shared small instances for the test modules."""

import itertools

import numpy as np

from riskd.fleet import Decision, FleetConfig, lookahead_objective
from riskd.markov import MarkovChain, random_ergodic_chain, sample_path, stationary_distribution
from riskd.projected import FeatureModel

P2 = [[0.9, 0.1], [0.2, 0.8]]
C2 = [1.0, 3.0]


def two_state(alpha=0.9):
    return MarkovChain(P2, C2, alpha)


def random_instance(n, m, alpha, seed, cost_range=(1.0, 3.0)):
    """Random ergodic chain with uniform random features and exact weights."""
    rng = np.random.default_rng(seed)
    chain = random_ergodic_chain(n, alpha, rng, cost_range=cost_range)
    Phi = rng.uniform(size=(n, m))
    fm = FeatureModel(Phi, stationary_distribution(chain))
    return chain, fm


def td_instance():
    """The n=5, m=2 rank-full instance used by the stochastic convergence checks."""
    chain = random_ergodic_chain(5, 0.9, np.random.default_rng(1), cost_range=(1.0, 3.0))
    Phi = np.random.default_rng(2).uniform(size=(5, 2))
    return chain, FeatureModel(Phi, stationary_distribution(chain))


def classical_td(chain, fm, lam, schedule, steps, seed):
    """Straight-line TD(lambda) with one sampled successor per step."""
    states, succ = sample_path(chain, 0, steps, 1, seed)
    gam = schedule.values(0, steps)
    Phi, c, a = fm.Phi, chain.c, chain.alpha
    r = np.zeros(fm.m)
    z = np.zeros(fm.m)
    rs = []
    for t in range(steps):
        i, j = states[t], succ[t, 0]
        d = float(Phi[i] @ r) - c[i] - a * float(Phi[j] @ r)
        z = lam * a * z + Phi[i]
        r = r - gam[t] * z * d
        rs.append(r)
    return np.array(rs)


def config(M, c_empty=None, c_loaded=None, demand=None, alpha=0.9, fleet=1, x0=None):
    d = {
        "M": M,
        "fleet": fleet,
        "c_empty": c_empty if c_empty is not None else np.zeros((M, M)).tolist(),
        "c_loaded": c_loaded if c_loaded is not None else np.zeros((M, M)).tolist(),
        "demand": demand or {"kind": "zero"},
        "alpha": alpha,
    }
    if x0 is not None:
        d["x0"] = x0
    return FleetConfig.from_dict(d)


def origin_splits(n, caps):
    """All ways to place n vehicles on arcs with the given capacities (None = unlimited)."""
    if not caps:
        if n == 0:
            yield ()
        return
    top = n if caps[0] is None else min(n, caps[0])
    for k in range(top + 1):
        for rest in origin_splits(n - k, caps[1:]):
            yield (k,) + rest


def all_decisions(x, D):
    M = len(x)
    per_origin = []
    for i in range(M):
        caps = [int(D[i, j]) for j in range(M)] + [None] * M
        per_origin.append(list(origin_splits(int(x[i]), caps)))
    for combo in itertools.product(*per_origin):
        ul = np.array([row[:M] for row in combo], dtype=np.int64)
        ue = np.array([row[M:] for row in combo], dtype=np.int64)
        yield Decision(ue, ul)


def brute_force(cfg, x, D, pi):
    return min(lookahead_objective(cfg, x, u, pi) for u in all_decisions(x, D))
