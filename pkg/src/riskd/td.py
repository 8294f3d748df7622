"""Risk-averse temporal-difference learning with linear features.

The learners only see sampled transitions: at time ``t`` they observe the
state ``i_t``, draw ``N`` fresh successors of ``i_t`` to form a plug-in risk
estimate, and update ``r`` with the observed risk-averse temporal difference

    d_t = phi(i_t)' r_t - c(i_t) - alpha * sigma_hat_t.

TD(0) moves along ``phi(i_t)``; TD(lambda) moves along the eligibility trace
``z_t = lambda * alpha * z_{t-1} + phi(i_t)`` with ``z_{-1} = 0``.  Both can
project onto the box ``||r||_inf <= R``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .markov import sample_path
from .risk import RiskMapping, exact_sample_mapping

DIVERGENCE_BOUND = 1e12
DEFAULT_BOX = 1e6


@dataclass(frozen=True)
class StepsizeSchedule:
    """``gamma_t = a / (b + t)^p``."""

    a: float = 1.0
    b: float = 100.0
    p: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"schedule a must be positive, got {self.a}")
        if not self.b >= 1:
            raise ConfigError(f"schedule b must be at least 1, got {self.b}")
        if not 0.5 < self.p <= 1.0:
            raise ConfigError(f"schedule p must lie in (1/2, 1], got {self.p}")

    def __call__(self, t):
        # same vectorized arithmetic as values(), so stepwise and batched runs agree bit for bit
        return float(self.values(t, 1)[0])

    def values(self, start, count):
        t = np.arange(start, start + count, dtype=float)
        return self.a / (self.b + t) ** self.p

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"a", "b", "p"}
        if extra:
            raise ConfigError(f"unexpected schedule fields {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self):
        return {"a": self.a, "b": self.b, "p": self.p}


@dataclass(frozen=True)
class LearnerState:
    r: np.ndarray
    z: np.ndarray
    t: int = 0
    lam: float = 0.0
    alpha: float = 0.9
    schedule: StepsizeSchedule = field(default_factory=StepsizeSchedule)
    box: float | None = DEFAULT_BOX
    N: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.lam * self.alpha < 1.0:
            raise ConfigError("lambda * alpha must be below 1")
        if self.N < 1:
            raise ConfigError("N must be at least 1")

    @classmethod
    def initial(cls, m, **kw):
        r0 = kw.pop("r0", None)
        r = np.zeros(m) if r0 is None else np.array(r0, dtype=float)
        return cls(r=r, z=np.zeros(m), **kw)

    @property
    def gamma(self):
        return self.schedule(self.t)


def _project_box(r, box):
    if box is None:
        return r
    return np.clip(r, -box, box)


def observed_td(phi_i, r, sigma_tilde, cost, alpha):
    """``phi(i)' r - c(i) - alpha * sigma_tilde``."""
    return float(phi_i @ r) - cost - alpha * sigma_tilde


def td0_step(ls, phi_i, d):
    """``r <- Proj_Y(r - gamma_t * phi(i) * d)``."""
    r = _project_box(ls.r - ls.gamma * phi_i * d, ls.box)
    return replace(ls, r=r, t=ls.t + 1)


def tdlambda_step(ls, phi_i, d):
    """``z <- lambda*alpha*z + phi(i)``, then ``r <- Proj_Y(r - gamma_t * z * d)``."""
    z = ls.lam * ls.alpha * ls.z + phi_i
    r = _project_box(ls.r - ls.gamma * z * d, ls.box)
    return replace(ls, r=r, z=z, t=ls.t + 1)


@dataclass
class LearningTrace:
    """Per-step record of a learning run."""

    t: np.ndarray
    state: np.ndarray
    td: np.ndarray
    gamma: np.ndarray
    W: np.ndarray
    final: LearnerState
    error: str | None = None

    def __len__(self):
        return len(self.t)

    def summary(self):
        n = len(self.t)
        tail = self.td[n // 2:] if n else self.td
        out = {
            "steps": n,
            "final_r": self.final.r.tolist(),
            "mean_abs_td_last_half": float(np.mean(np.abs(tail))) if n else None,
            "error": self.error,
        }
        if n and np.isfinite(self.W[-1]):
            out["final_W"] = float(self.W[-1])
        return out

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "state", "td", "gamma", "W"])
        for row in zip(self.t.tolist(), self.state.tolist(), self.td.tolist(), self.gamma.tolist(), self.W.tolist()):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])

    def to_csv(self):
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def lyapunov_W(r, sol):
    """Squared distance from ``r`` to the solution set ``r* + null(Phi)``.

    For full-rank features this is ``||r - r*||^2``.
    """
    d = np.asarray(r, dtype=float) - sol.r_star
    if sol.null_space is not None:
        d = d - sol.null_space @ (sol.null_space.T @ d)
    return float(d @ d)


def run_learner(chain, fm, m, ls, steps, seed, start=0, oracle=None):
    """Run RA-TD(lambda) (TD(0) when ``ls.lam == 0``) along one simulated trajectory.

    The trajectory and the risk-estimation successors come from
    :func:`riskd.markov.sample_path`, so a given ``seed`` fixes the whole run.
    ``oracle`` (a :class:`~riskd.projected.ProjectedSolution`) only feeds the
    ``W`` column; the updates never use ``P``, ``q`` or the oracle.
    """
    states, succ = sample_path(chain, start, steps, ls.N, seed)
    gam = ls.schedule.values(ls.t, steps)
    Phi = fm.Phi
    c = chain.c.tolist()
    alpha = chain.alpha
    decay = ls.lam * ls.alpha
    box = ls.box
    sample_value = m.sample_value

    td = np.empty(steps)
    W = np.full(steps, np.nan)
    r = ls.r.copy()
    z = ls.z.copy()
    error = None
    done = steps
    state_list = states.tolist()
    # overflow on a diverging run is reported through ``error``, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            i = state_list[t]
            phi = Phi[i]
            sigma = sample_value((Phi[succ[t]] @ r).tolist())
            d = float(phi @ r) - c[i] - alpha * sigma
            z = decay * z + phi
            r = r - gam[t] * z * d
            if box is not None:
                r = np.clip(r, -box, box)
            td[t] = d
            if oracle is not None:
                W[t] = lyapunov_W(r, oracle)
            if t % 1024 == 0 and not (math.isfinite(d) and np.max(np.abs(r)) < DIVERGENCE_BOUND):
                error = f"iterates diverged at step {t}"
                done = t + 1
                break
    if error is None and not np.all(np.isfinite(r)):
        error = "non-finite iterate at the end of the run"
    final = replace(ls, r=r, z=z, t=ls.t + done)
    return LearningTrace(
        np.arange(ls.t, ls.t + done), states[:done], td[:done], gam[:done], W[:done], final, error
    )


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class LearnerConfig:
    lam: float = 0.0
    alpha: float | None = None
    risk: RiskMapping = field(default_factory=RiskMapping.expectation)
    schedule: StepsizeSchedule = field(default_factory=StepsizeSchedule)
    N: int = 4
    box: float | None = DEFAULT_BOX
    steps: int = 10_000
    seed: int = 0
    start: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {"lambda", "alpha", "risk", "schedule", "N", "box", "steps", "seed", "start"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unexpected learner fields {sorted(extra)}")
        kw = {}
        if "lambda" in d:
            kw["lam"] = float(d["lambda"])
        if d.get("alpha") is not None:
            kw["alpha"] = float(d["alpha"])
        if "risk" in d:
            kw["risk"] = RiskMapping.from_dict(d["risk"])
        if "schedule" in d:
            kw["schedule"] = StepsizeSchedule.from_dict(d["schedule"])
        if "box" in d:
            kw["box"] = None if d["box"] is None else float(d["box"])
        for key in ("N", "steps", "seed", "start"):
            if key in d:
                if not isinstance(d[key], int) or isinstance(d[key], bool):
                    raise ConfigError(f"learner field {key!r} must be an integer, got {d[key]!r}")
                kw[key] = d[key]
        if kw.get("N", 1) < 1:
            raise ConfigError("learner N must be at least 1")
        if kw.get("steps", 0) < 0:
            raise ConfigError("learner steps must be nonnegative")
        if not 0.0 <= kw.get("lam", 0.0) <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {kw['lam']}")
        return cls(**kw)

    def to_dict(self):
        return {
            "lambda": self.lam,
            "alpha": self.alpha,
            "risk": self.risk.to_dict(),
            "schedule": self.schedule.to_dict(),
            "N": self.N,
            "box": self.box,
            "steps": self.steps,
            "seed": self.seed,
            "start": self.start,
        }

    def initial_state(self, m, alpha, r0=None):
        if self.alpha is not None and abs(self.alpha - alpha) > 1e-15:
            raise ConfigError(f"learner alpha {self.alpha} differs from the model's alpha {alpha}")
        return LearnerState.initial(
            m, r0=r0, lam=self.lam, alpha=alpha, schedule=self.schedule, box=self.box, N=self.N
        )


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class ScheduleReport:
    horizon: int
    checks: dict
    analytic: dict | None = None

    @property
    def failed(self):
        return [k for k, v in self.checks.items() if not v["passed"]]

    @property
    def passed(self):
        return not self.failed

    def to_dict(self):
        return {
            "horizon": self.horizon,
            "passed": self.passed,
            "failed": self.failed,
            "checks": self.checks,
            "analytic": self.analytic,
        }


def _decade_ratio(partial, T):
    # increment over (T/10, T] relative to the increment over (T/100, T/10]
    a, b, c = T // 100, T // 10, T
    first = partial[b] - partial[a]
    second = partial[c] - partial[b]
    return float(second / first) if first > 0 else math.inf


def validate_schedule(s, horizon, eps=1.0):
    """Spot-check the four stepsize conditions over ``t = 0..horizon``.

    ``s`` is a :class:`StepsizeSchedule` or any callable ``t -> gamma_t``.
    The checks are finite-horizon trends, not proofs:

    * (i)   positive, nonincreasing, and visibly decaying: ``gamma_T <= 0.9 gamma_{T/10}``;
    * (ii)  the partial sums keep growing: the last decade adds at least 0.9
      times what the previous decade added;
    * (iii) the squared partial sums level off: the same decade ratio is at most 0.97;
    * (iv)  the variation ``sum |gamma_t - gamma_{t+1}|`` over windows with
      ``sum gamma <= eps`` is at most ``0.1 * eps`` for windows starting in the
      second half of the horizon.
    """
    if horizon < 1000:
        raise ValueError("horizon must be at least 1000 for the decade trend checks")
    T = int(horizon)
    t = np.arange(T + 2, dtype=float)
    g = np.array([s(k) for k in t]) if not isinstance(s, StepsizeSchedule) else s.values(0, T + 2)
    checks = {}

    positive = bool(np.all(g > 0))
    nonincreasing = bool(np.all(np.diff(g[: T + 1]) <= 0))
    decay = float(g[T] / g[T // 10]) if g[T // 10] > 0 else math.inf
    checks["i"] = {
        "passed": positive and nonincreasing and decay <= 0.9,
        "positive": positive,
        "nonincreasing": nonincreasing,
        "decay_ratio": decay,
    }

    S1 = np.concatenate([[0.0], np.cumsum(g[: T + 1])])
    ratio1 = _decade_ratio(S1, T + 1)
    checks["ii"] = {"passed": ratio1 >= 0.9, "decade_ratio": ratio1, "partial_sum": float(S1[-1])}

    S2 = np.concatenate([[0.0], np.cumsum(g[: T + 1] ** 2)])
    ratio2 = _decade_ratio(S2, T + 1)
    checks["iii"] = {"passed": ratio2 <= 0.97, "decade_ratio": ratio2, "partial_square_sum": float(S2[-1])}

    var = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(g)))])
    starts = np.arange(T // 2, T + 1)
    # last index T_end with sum_{t0..T_end} gamma <= eps
    ends = np.searchsorted(S1, S1[starts] + eps, side="right") - 2
    ends = np.clip(ends, starts, T)
    window_var = var[ends + 1] - var[starts]
    worst = float(np.max(window_var)) if len(window_var) else 0.0
    checks["iv"] = {"passed": worst <= 0.1 * eps, "max_window_variation": worst, "eps": eps}

    analytic = None
    if isinstance(s, StepsizeSchedule):
        analytic = {
            "i": s.p > 0,
            "ii": s.p <= 1,
            "iii": s.p > 0.5,
            "iv": True,  # monotone schedules telescope
            "note": "a/(b+t)^p with a>0, b>=1: (ii) iff p<=1, (iii) iff p>1/2, (iv) holds for any monotone schedule",
        }
    return ScheduleReport(T, checks, analytic)


def estimation_errors(chain, m, v, N, steps, seed, start=0):
    """Plug-in errors ``xi_t = sigma_hat_t - sigma^N(P_{i_t}, v)`` at a frozen ``v``.

    ``sigma^N`` is computed exactly by enumerating all ``N``-samples.
    """
    v = np.asarray(v, dtype=float)
    states, succ = sample_path(chain, start, steps, N, seed)
    exact = np.array([exact_sample_mapping(m, chain.P[i], v, N) for i in range(chain.n)])
    est = m.sample_values(v[succ])
    return est - exact[states[:steps]]
