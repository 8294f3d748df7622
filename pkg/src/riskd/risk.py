"""Coherent transition risk mappings.

Three kinds are supported, all evaluated in closed form for a probability
vector ``p`` over successor states and a value vector ``v``:

* ``expectation``: ``<p, v>``;
* ``mean_semideviation``: ``m + beta * sum_j p_j (v_j - m)_+`` with ``m = <p, v>``;
* ``cvar``: ``min_t t + sum_j p_j (v_j - t)_+ / kappa`` (upper tail of costs).

Each has a dual representation ``sigma(p, v) = max_{mu in A(p)} <mu, v>``;
:func:`envelope_vertices` enumerates the extreme points of ``A(p)`` and
:func:`distortion_coefficient` measures how far they stray from ``p``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EnumerationLimitError

SUPPORT_LIMIT = 12
TUPLE_LIMIT = 10**6
PROB_TOL = 1e-12

KINDS = ("expectation", "mean_semideviation", "cvar")


@dataclass(frozen=True)
class RiskMapping:
    kind: str
    beta: float = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown risk kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.kind == "expectation" and (self.beta != 0.0 or self.kappa != 1.0):
            raise ConfigError("expectation takes no parameters")
        if self.kind == "mean_semideviation" and self.kappa != 1.0:
            raise ConfigError("mean_semideviation takes beta only")
        if self.kind == "cvar" and self.beta != 0.0:
            raise ConfigError("cvar takes kappa only")

    @classmethod
    def expectation(cls):
        return cls("expectation")

    @classmethod
    def mean_semideviation(cls, beta):
        return cls("mean_semideviation", beta=float(beta))

    @classmethod
    def cvar(cls, kappa):
        return cls("cvar", kappa=float(kappa))

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"risk config must be an object with a 'kind' field, got {d!r}")
        kind = d["kind"]
        extra = set(d) - {"kind", "beta", "kappa"}
        if extra:
            raise ConfigError(f"unexpected risk fields {sorted(extra)}")
        allowed = {"expectation": set(), "mean_semideviation": {"beta"}, "cvar": {"kappa"}}.get(kind)
        if allowed is not None and set(d) - {"kind"} - allowed:
            raise ConfigError(f"{kind} does not take {sorted(set(d) - {'kind'} - allowed)}")
        if kind == "expectation":
            return cls.expectation()
        if kind == "mean_semideviation":
            if "beta" not in d:
                raise ConfigError("mean_semideviation requires 'beta'")
            return cls.mean_semideviation(d["beta"])
        if kind == "cvar":
            if "kappa" not in d:
                raise ConfigError("cvar requires 'kappa'")
            return cls.cvar(d["kappa"])
        raise ConfigError(f"unknown risk kind {kind!r}")

    def to_dict(self):
        if self.kind == "expectation":
            return {"kind": "expectation"}
        if self.kind == "mean_semideviation":
            return {"kind": self.kind, "beta": self.beta}
        return {"kind": self.kind, "kappa": self.kappa}

    @property
    def is_neutral(self):
        return (
            self.kind == "expectation"
            or (self.kind == "mean_semideviation" and self.beta == 0.0)
            or (self.kind == "cvar" and self.kappa == 1.0)
        )

    def _sigma(self, p, v):
        # batched over leading axes; the last axis indexes states
        mean = np.sum(p * v, axis=-1)
        if self.kind == "expectation":
            return mean
        if self.kind == "mean_semideviation":
            dev = np.sum(p * np.maximum(v - mean[..., None], 0.0), axis=-1)
            return mean + self.beta * dev
        # cvar: the minimizing threshold sits at one of the v_j
        excess = np.sum(p[..., None, :] * np.maximum(v[..., None, :] - v[..., :, None], 0.0), axis=-1)
        return np.min(v + excess / self.kappa, axis=-1)

    def sample_value(self, values):
        """Plug-in value on the equally weighted sample ``values`` (a list of floats)."""
        N = len(values)
        mean = sum(values) / N
        if self.kind == "expectation":
            return mean
        if self.kind == "mean_semideviation":
            return mean + self.beta * (sum(w - mean for w in values if w > mean) / N)
        scale = 1.0 / (self.kappa * N)
        return min(t + scale * sum(w - t for w in values if w > t) for t in values)

    def sample_values(self, values):
        """Vectorized :meth:`sample_value` over the leading axes of ``values``."""
        values = np.asarray(values, dtype=float)
        N = values.shape[-1]
        return self._sigma(np.full(N, 1.0 / N), values)


def check_probability(p, name="p"):
    p = np.asarray(p, dtype=float)
    if p.ndim < 1:
        raise ValueError(f"{name} must be a vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-10):
        raise ValueError(f"{name} does not sum to 1")
    return p


def evaluate(m, p, v):
    """``sigma(p, v)``; broadcasts over leading axes of ``p`` and ``v``."""
    p = check_probability(p)
    v = np.asarray(v, dtype=float)
    if p.shape[-1] != v.shape[-1]:
        raise ValueError(f"p has {p.shape[-1]} states but v has {v.shape[-1]}")
    out = m._sigma(p, v)
    return float(out) if np.ndim(out) == 0 else out


def apply_operator(m, P, v):
    """Vector ``sigma(P, v)`` with component ``i`` equal to ``evaluate(m, P[i], v)``.

    ``v`` may carry leading batch axes, giving an output of shape ``v.shape``.
    """
    P = np.asarray(P, dtype=float)
    v = np.asarray(v, dtype=float)
    return m._sigma(P, v[..., None, :])


# ---------------------------------------------------------------------------
# Dual representation


@dataclass(frozen=True)
class EnvelopeVertexSet:
    vertices: np.ndarray
    base: np.ndarray

    def support(self, v):
        """``max_mu <mu, v>`` over the vertices."""
        return np.max(np.asarray(v) @ self.vertices.T, axis=-1)


def _unique_rows(V, decimals=13):
    _, idx = np.unique(np.round(V, decimals), axis=0, return_index=True)
    return V[np.sort(idx)]


def _bit_matrix(k):
    return ((np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1).astype(float)


def _semidev_vertices(p_s, beta):
    delta = _bit_matrix(len(p_s))
    return p_s * (1.0 + beta * (delta - (delta @ p_s)[:, None]))


def _cvar_vertices(p_s, kappa):
    # basic feasible points of {mu >= 0, sum mu = 1, mu <= p / kappa}:
    # every coordinate but one (the free one) at a bound
    k = len(p_s)
    cap = p_s / kappa
    if k == 1:
        return np.ones((1, 1))
    bits = _bit_matrix(k - 1)
    out = []
    for f in range(k):
        others = [j for j in range(k) if j != f]
        mu = np.zeros((len(bits), k))
        mu[:, others] = bits * cap[others]
        mu[:, f] = 1.0 - mu[:, others].sum(axis=1)
        ok = (mu[:, f] >= -1e-12) & (mu[:, f] <= cap[f] + 1e-12)
        out.append(np.clip(mu[ok], 0.0, None))
    return np.vstack(out)


def envelope_vertices(m, p, limit=SUPPORT_LIMIT):
    """Extreme points of the dual set ``A(p)`` of ``m``."""
    p = check_probability(p)
    support = np.flatnonzero(p > 0)
    if m.kind == "expectation":
        return EnvelopeVertexSet(p[None, :].copy(), p)
    if len(support) > limit:
        raise EnumerationLimitError(
            f"support size {len(support)} exceeds the enumeration limit {limit}; "
            "use distortion_coefficient's analytic bound instead"
        )
    p_s = p[support]
    if m.kind == "mean_semideviation":
        V_s = _semidev_vertices(p_s, m.beta)
    else:
        V_s = _cvar_vertices(p_s, m.kappa)
    V = np.zeros((len(V_s), len(p)))
    V[:, support] = V_s
    return EnvelopeVertexSet(_unique_rows(V), p)


@dataclass(frozen=True)
class DistortionReport:
    kappa_hat: float
    witness: tuple  # (row i, state j, vertex mu)
    condition_td0: bool
    condition_tdlambda: bool
    alpha: float
    method: str

    def to_dict(self):
        i, j, mu = self.witness
        return {
            "kappa_hat": self.kappa_hat,
            "witness": {"i": i, "j": j, "vertex": np.asarray(mu).tolist()},
            "condition_td0": self.condition_td0,
            "condition_tdlambda": self.condition_tdlambda,
            "td0_factor": self.alpha * np.sqrt(1.0 + self.kappa_hat),
            "tdlambda_factor": self.alpha * (1.0 + self.kappa_hat),
            "method": self.method,
        }


def contraction_flags(kappa_hat, alpha):
    """``(alpha*sqrt(1+kappa) < 1, alpha*(1+kappa) < 1)``."""
    return bool(alpha * np.sqrt(1.0 + kappa_hat) < 1.0), bool(alpha * (1.0 + kappa_hat) < 1.0)


def _row_distortion(mu, p):
    s = p > 0
    ratio = np.abs(mu[:, s] - p[s]) / p[s]
    k = np.unravel_index(np.argmax(ratio), ratio.shape)
    return float(ratio[k]), int(np.flatnonzero(s)[k[1]]), mu[k[0]]


def distortion_coefficient(m, P, alpha, limit=SUPPORT_LIMIT):
    """Distortion ``max |mu_ij - p_ij| / p_ij`` over all rows and dual vertices.

    Mean-semideviation uses the exact per-row value ``beta * (1 - min_j p_ij)``
    (attained at ``delta = e_j``); CVaR enumerates vertices row by row.
    """
    P = np.asarray(P, dtype=float)
    best = (-1.0, None)
    if m.kind == "expectation":
        best = (0.0, (0, int(np.flatnonzero(P[0] > 0)[0]), P[0].copy()))
        method = "exact"
    elif m.kind == "mean_semideviation":
        method = "closed-form"
        for i, p in enumerate(P):
            s = np.flatnonzero(p > 0)
            j = int(s[np.argmin(p[s])])
            delta = np.zeros(len(p))
            delta[j] = 1.0
            mu = p * (1.0 + m.beta * (delta - p[j]))
            val = abs(mu[j] - p[j]) / p[j]
            if val > best[0]:
                best = (val, (i, j, mu))
    else:
        method = "enumeration"
        for i, p in enumerate(P):
            V = envelope_vertices(m, p, limit).vertices
            val, j, mu = _row_distortion(V, p)
            if val > best[0]:
                best = (val, (i, j, mu))
    kappa_hat, witness = best
    td0, tdl = contraction_flags(kappa_hat, alpha)
    return DistortionReport(float(kappa_hat), witness, td0, tdl, float(alpha), method)


# ---------------------------------------------------------------------------
# Sample-based estimation


@dataclass(frozen=True)
class SampleRiskEstimate:
    value: float
    sample: tuple
    N: int


def empirical_distribution(successors, n):
    successors = np.asarray(successors, dtype=np.int64)
    if successors.size == 0:
        raise ValueError("empty sample")
    return np.bincount(successors, minlength=n) / successors.size


def sample_plug_in(m, successors, v):
    """Evaluate ``m`` on the empirical distribution of ``successors``."""
    v = np.asarray(v, dtype=float)
    pN = empirical_distribution(successors, len(v))
    return SampleRiskEstimate(evaluate(m, pN, v), tuple(int(j) for j in successors), len(successors))


def exact_sample_mapping(m, p, v, N, limit=TUPLE_LIMIT):
    """``E[sigma(P^N, v)]`` over all ``N``-samples from ``p``, by enumeration."""
    p = check_probability(p)
    v = np.asarray(v, dtype=float)
    if N < 1:
        raise ValueError("N must be at least 1")
    support = np.flatnonzero(p > 0)
    count = len(support) ** N
    if count > limit:
        raise EnumerationLimitError(
            f"{len(support)}^{N} = {count} sample tuples exceed the limit {limit}; "
            "check unbiasedness by Monte Carlo instead"
        )
    tuples = np.array(list(itertools.product(support, repeat=N)), dtype=np.int64)
    weights = np.prod(p[tuples], axis=1)
    return float(weights @ m.sample_values(v[tuples]))
