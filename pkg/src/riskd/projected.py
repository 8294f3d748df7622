"""Deterministic projected risk-averse dynamic programming.

Everything here uses the model (``P``, ``q``, ``c``) and serves as ground
truth for the stochastic learners in :mod:`riskd.td`:

* ``L``, the ``q``-weighted least-squares projection onto ``range(Phi)``;
* ``D(v) = L(c + alpha * sigma(P, v))`` and its fixed point;
* the expected TD(0) update ``U`` and the TD(lambda) drift ``Ubar``;
* solvers for the single-step and multistep projected equations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractionError, SolverError
from .markov import StationaryDistribution, make_rng, multistep_matrix, q_norm
from .risk import apply_operator, distortion_coefficient

RANK_TOL = 1e-10


@dataclass(frozen=True)
class FeatureModel:
    """Feature matrix ``Phi`` (row ``i`` is ``phi(i)``) with projection weights ``q``."""

    Phi: np.ndarray
    q: np.ndarray
    rank_full: bool = field(init=False)

    def __post_init__(self):
        Phi = np.array(self.Phi, dtype=float)
        if Phi.ndim != 2:
            raise ConfigError(f"Phi must be a matrix, got shape {Phi.shape}")
        q = self.q.q if isinstance(self.q, StationaryDistribution) else np.array(self.q, dtype=float)
        n, m = Phi.shape
        if m > n:
            raise ConfigError(f"Phi has more features ({m}) than states ({n})")
        if q.shape != (n,):
            raise ConfigError(f"q has shape {q.shape}, expected ({n},)")
        Phi.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "q", q)
        sv = np.linalg.svd(Phi, compute_uv=False)
        object.__setattr__(self, "rank_full", bool(sv.size and sv[-1] > RANK_TOL * max(1.0, sv[0])))

    @property
    def n(self):
        return self.Phi.shape[0]

    @property
    def m(self):
        return self.Phi.shape[1]

    def null_space(self):
        """Orthonormal basis of ``null(Phi)``, or ``None`` when ``Phi`` has full column rank."""
        if self.rank_full:
            return None
        _, sv, Vt = np.linalg.svd(self.Phi)
        rank = int(np.sum(sv > RANK_TOL * max(1.0, sv[0]))) if sv.size else 0
        return Vt[rank:].T

    @property
    def gram(self):
        """``Phi' Q Phi``."""
        return self.Phi.T @ (self.q[:, None] * self.Phi)

    def coefficients(self, w):
        """Minimum-norm ``r`` with ``Phi r = L(w)``."""
        return np.linalg.pinv(self.gram) @ (self.Phi.T @ (self.q * w))

    def norm(self, h):
        return q_norm(h, self.q)


def load_features(source, q):
    """Read ``{"Phi": [[...]]}`` from a path or dict and attach weights ``q``."""
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "Phi" not in doc:
        raise ConfigError("feature document must contain 'Phi'")
    try:
        Phi = np.array(doc["Phi"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Phi has non-numeric entries: {exc}") from None
    return FeatureModel(Phi, q)


def project_q(fm, w):
    """``argmin_{z in range(Phi)} ||z - w||_q``."""
    return fm.Phi @ fm.coefficients(np.asarray(w, dtype=float))


def apply_D(fm, chain, m, v):
    """``L(c + alpha * sigma(P, v))``."""
    return project_q(fm, chain.c + chain.alpha * apply_operator(m, chain.P, v))


def U_operator(fm, chain, m, r):
    """Expected TD(0) update ``Phi' Q [Phi r - c - alpha sigma(P, Phi r)]``."""
    v = fm.Phi @ r
    return fm.Phi.T @ (fm.q * (v - chain.c - chain.alpha * apply_operator(m, chain.P, v)))


def Ubar_operator(fm, chain, m, lam, r, Pbar=None):
    """TD(lambda) drift ``Phi' Q Pbar [Phi r - c - alpha sigma(P, Phi r)]``."""
    if Pbar is None:
        Pbar = multistep_matrix(chain, lam).Pbar
    v = fm.Phi @ r
    return fm.Phi.T @ (fm.q * (Pbar @ (v - chain.c - chain.alpha * apply_operator(m, chain.P, v))))


@dataclass(frozen=True)
class ProjectedSolution:
    r_star: np.ndarray
    v_star: np.ndarray
    residual: float
    iterations: int
    equation: str  # "single-step" or "multistep"
    unique: bool
    meta: dict = field(default_factory=dict)
    null_space: np.ndarray | None = None  # orthonormal basis of null(Phi) when r* is not unique

    def to_dict(self):
        return {
            "equation": self.equation,
            "r_star": self.r_star.tolist(),
            "v_star": self.v_star.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "unique": self.unique,
            "meta": self.meta,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _check_condition(report, which, override):
    ok = report.condition_td0 if which == "td0" else report.condition_tdlambda
    if not ok and not override:
        factor = report.to_dict()["td0_factor" if which == "td0" else "tdlambda_factor"]
        bound = "alpha*sqrt(1+kappa)" if which == "td0" else "alpha*(1+kappa)"
        raise ContractionError(
            f"{bound} = {factor:.4f} >= 1 (kappa = {report.kappa_hat:.4f}); pass override=True to proceed anyway"
        )


def solve_single_step(fm, chain, m, tol=1e-10, max_iter=100_000, override=False, report=None):
    """Fixed point of ``v = D(v)`` by successive approximation.

    Stops once ``||v - D(v)||_q <= tol``; ``r*`` is the minimum-norm
    least-squares coefficient vector of ``v*``.
    """
    if report is None:
        report = distortion_coefficient(m, chain.P, chain.alpha)
    _check_condition(report, "td0", override)
    v = np.zeros(chain.n)
    res = np.inf
    for k in range(1, max_iter + 1):
        v_next = apply_D(fm, chain, m, v)
        res = fm.norm(v_next - v)
        v = v_next
        if res <= tol:
            break
    else:
        raise SolverError(f"no convergence in {max_iter} iterations (residual {res:.3e})", res, max_iter)
    r = fm.coefficients(v)
    v = fm.Phi @ r
    residual = fm.norm(v - apply_D(fm, chain, m, v))
    return ProjectedSolution(
        r, v, residual, k, "single-step", fm.rank_full,
        {"distortion": report.to_dict(), "tol": tol}, fm.null_space(),
    )


def estimate_lipschitz(fm, op, r, rng=0, samples=64, radius=1.0):
    """Largest sampled ``||op(r') - op(r'')||^2 / ||Phi (r' - r'')||_q^2`` near ``r``."""
    rng = make_rng(rng)
    scale = radius * max(1.0, float(np.linalg.norm(r)))
    best = 0.0
    for _ in range(samples):
        a = r + scale * rng.standard_normal(fm.m)
        b = r + scale * rng.standard_normal(fm.m)
        den = fm.norm(fm.Phi @ (a - b)) ** 2
        if den > 0:
            best = max(best, float(np.sum((op(a) - op(b)) ** 2)) / den)
    return best


def stable_stepsize(fm, op, r, kappa_hat, alpha, rng=0):
    """Half of the bound ``2 (1 - alpha(1 + kappa)) / C`` with ``C`` sampled.

    When the contraction margin is not positive (caller override), the
    risk-neutral margin ``1 - alpha`` is used instead.
    """
    C = estimate_lipschitz(fm, op, r, rng)
    margin = 1.0 - alpha * (1.0 + kappa_hat)
    rule = "margin"
    if margin <= 0:
        margin, rule = 1.0 - alpha, "neutral-margin-fallback"
    if C == 0:
        return 1.0, C, rule
    return margin / C, C, rule


def iterate_operator(op, r0, gamma, steps):
    """Iterates ``r <- r - gamma * op(r)``; returns an array of ``steps + 1`` rows."""
    out = np.empty((steps + 1, len(r0)))
    r = np.array(r0, dtype=float)
    out[0] = r
    for t in range(steps):
        r = r - gamma * op(r)
        out[t + 1] = r
    return out


def solve_multistep(fm, chain, m, lam, gamma_bar=None, tol=1e-10, max_iter=1_000_000, override=False, report=None):
    """Zero of ``Ubar`` by ``r <- r - gamma_bar * Ubar(r)``.

    ``gamma_bar`` defaults to :func:`stable_stepsize`; the choice is recorded
    in ``meta``.  Divergence (iterate norm beyond 1e12 times its starting
    scale) raises :class:`SolverError`.
    """
    if report is None:
        report = distortion_coefficient(m, chain.P, chain.alpha)
    _check_condition(report, "tdlambda", override)
    Pbar = multistep_matrix(chain, lam).Pbar

    def op(r):
        return Ubar_operator(fm, chain, m, lam, r, Pbar)

    r = np.zeros(fm.m)
    meta = {"distortion": report.to_dict(), "tol": tol, "lambda": lam}
    if gamma_bar is None:
        # C is sampled around the risk-neutral TD(lambda) solution, which fixes the scale of r
        A = fm.Phi.T @ (fm.q[:, None] * (Pbar @ (fm.Phi - chain.alpha * chain.P @ fm.Phi)))
        b = fm.Phi.T @ (fm.q * (Pbar @ chain.c))
        centre = np.linalg.lstsq(A, b, rcond=None)[0]
        gamma_bar, C, rule = stable_stepsize(fm, op, centre, report.kappa_hat, chain.alpha)
        meta.update({"gamma_bar": gamma_bar, "C_bar": C, "gamma_rule": rule})
        r = centre
    else:
        meta.update({"gamma_bar": gamma_bar, "gamma_rule": "user"})
    bound = 1e12 * max(1.0, float(np.linalg.norm(r)), float(np.abs(chain.c).max()) / (1 - chain.alpha))
    g = op(r)
    gn = float(np.linalg.norm(g))
    for k in range(1, max_iter + 1):
        if gn <= tol:
            break
        r = r - gamma_bar * g
        if not np.all(np.isfinite(r)) or np.linalg.norm(r) > bound:
            raise SolverError(f"iterates diverged at step {k}; try a smaller gamma_bar", gn, k)
        g = op(r)
        gn = float(np.linalg.norm(g))
    else:
        raise SolverError(f"no convergence in {max_iter} iterations (|Ubar| = {gn:.3e})", gn, max_iter)
    v = fm.Phi @ r
    # residual of L Pbar Phi r = L Pbar (c + alpha sigma(P, Phi r))
    w = Pbar @ (v - chain.c - chain.alpha * apply_operator(m, chain.P, v))
    residual = fm.norm(project_q(fm, w))
    meta["Ubar_norm"] = gn
    if not fm.rank_full:
        r = fm.coefficients(v)
    return ProjectedSolution(r, v, residual, k - 1, "multistep", fm.rank_full, meta, fm.null_space())
