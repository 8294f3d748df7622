import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_instance, two_state
from riskd.errors import ConfigError, ContractionError, SolverError
from riskd.markov import MarkovChain, multistep_matrix, neutral_policy_value, stationary_distribution
from riskd.projected import (
    FeatureModel,
    U_operator,
    Ubar_operator,
    apply_D,
    iterate_operator,
    load_features,
    project_q,
    solve_multistep,
    solve_single_step,
)
from riskd.risk import RiskMapping, distortion_coefficient

EXP = RiskMapping.expectation()
MSD = RiskMapping.mean_semideviation


def qn(h, q):
    return float(np.sqrt(np.sum(q * h * h)))


def wls(Phi, q, w):
    """Weighted least squares via lstsq on the sqrt(q)-scaled system."""
    s = np.sqrt(q)
    return np.linalg.lstsq(s[:, None] * Phi, s * w, rcond=None)[0]


class TestFeatureModel:
    def test_rank_flags(self):
        q = np.full(3, 1 / 3)
        assert FeatureModel(np.eye(3)[:, :2], q).rank_full
        Phi = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        fm = FeatureModel(Phi, q)
        assert not fm.rank_full
        u = fm.null_space()
        assert u.shape == (2, 1) and np.allclose(Phi @ u, 0, atol=1e-12)

    def test_too_many_features(self):
        with pytest.raises(ConfigError):
            FeatureModel(np.ones((2, 3)), [0.5, 0.5])

    def test_load_json(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"Phi": [[1, 0], [0, 1]]}))
        fm = load_features(path, stationary_distribution(two_state()))
        assert fm.m == 2 and np.allclose(fm.q, [2 / 3, 1 / 3])
        with pytest.raises(ConfigError):
            load_features({"phi": []}, [1.0])


class TestProjection:
    def test_identity_features(self):
        fm = FeatureModel(np.eye(3), [0.2, 0.3, 0.5])
        w = np.array([1.0, -2.0, 3.5])
        assert np.allclose(project_q(fm, w), w, atol=1e-14)

    def test_range_fixed(self):
        rng = np.random.default_rng(0)
        fm = FeatureModel(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
        w = fm.Phi @ np.array([0.3, -1.2])
        assert np.allclose(project_q(fm, w), w, atol=1e-12)

    def test_weighted_mean_by_hand(self):
        fm = FeatureModel([[1.0], [1.0]], [0.5, 0.5])
        assert np.allclose(project_q(fm, [0.0, 2.0]), [1.0, 1.0], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
    def test_projection_properties(self, n, seed, deficient):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, n + 1))
        Phi = rng.normal(size=(n, m))
        if deficient and m > 1:
            Phi[:, -1] = Phi[:, 0]
        q = rng.dirichlet(np.ones(n))
        fm = FeatureModel(Phi, q)
        w, h = rng.normal(size=(2, n))
        Lw = project_q(fm, w)
        assert np.allclose(project_q(fm, Lw), Lw, atol=1e-10)
        assert qn(Lw, q) <= qn(w, q) + 1e-10
        assert np.dot(q * Lw, h) == pytest.approx(np.dot(q * w, project_q(fm, h)), abs=1e-10)
        assert np.allclose(Lw, Phi @ wls(Phi, q, w), atol=1e-9)


class TestOperators:
    def test_D_neutral_identity(self):
        ch = two_state()
        fm = FeatureModel(np.eye(2), stationary_distribution(ch))
        v = np.array([0.7, -1.3])
        assert np.allclose(apply_D(fm, ch, EXP, v), ch.c + ch.alpha * ch.P @ v, atol=1e-14)

    def test_U_neutral_is_classical(self):
        ch, fm = random_instance(4, 2, 0.9, 3)
        r = np.array([0.4, -0.2])
        Q = np.diag(fm.q)
        ref = fm.Phi.T @ Q @ (fm.Phi @ r - ch.c - ch.alpha * ch.P @ fm.Phi @ r)
        assert np.allclose(U_operator(fm, ch, EXP, r), ref, atol=1e-13)

    def test_Ubar_lambda_zero_is_U(self):
        ch, fm = random_instance(4, 2, 0.9, 4)
        r = np.array([1.0, 2.0])
        m = MSD(0.3)
        assert np.allclose(Ubar_operator(fm, ch, m, 0.0, r), U_operator(fm, ch, m, r), atol=1e-14)

    def test_Ubar_td1_zero_at_fit(self):
        ch, fm = random_instance(3, 2, 0.9, 5)
        v_true = neutral_policy_value(ch)
        r_fit = wls(fm.Phi, fm.q, v_true)
        assert np.linalg.norm(Ubar_operator(fm, ch, EXP, 1.0, r_fit)) < 1e-10
        # against the truncated series drift (1 - a) sum a^l P^l
        r = np.array([0.5, -0.5])
        Pbar = sum((1 - 0.9) * 0.9**k * np.linalg.matrix_power(ch.P, k) for k in range(400))
        d = fm.Phi @ r - ch.c - 0.9 * ch.P @ fm.Phi @ r
        assert np.allclose(Ubar_operator(fm, ch, EXP, 1.0, r), fm.Phi.T @ (fm.q * (Pbar @ d)), atol=1e-12)

    def test_D_contraction(self):
        ch, fm = random_instance(5, 3, 0.9, 6)
        for m in (EXP, MSD(0.2), RiskMapping.cvar(0.7)):
            kap = distortion_coefficient(m, ch.P, ch.alpha).kappa_hat
            rng = np.random.default_rng(1)
            for _ in range(1000):
                w, v = rng.normal(scale=5.0, size=(2, 5))
                lhs = qn(apply_D(fm, ch, m, w) - apply_D(fm, ch, m, v), fm.q)
                assert lhs <= ch.alpha * np.sqrt(1 + kap) * qn(w - v, fm.q) + 1e-10

    def test_multistep_quadratic_bound(self):
        ch, fm = random_instance(5, 2, 0.9, 7)
        Pbar = multistep_matrix(ch, 0.7).Pbar
        for h in np.random.default_rng(2).normal(size=(500, 5)):
            lhs = np.dot(fm.q * h, Pbar @ (-h + ch.alpha * ch.P @ h))
            assert lhs <= (ch.alpha - 1) * qn(h, fm.q) ** 2 + 1e-10


class TestSingleStep:
    def test_zero_cost(self):
        ch = MarkovChain([[0.9, 0.1], [0.2, 0.8]], [0.0, 0.0], 0.9)
        fm = FeatureModel(np.eye(2), stationary_distribution(ch))
        sol = solve_single_step(fm, ch, MSD(0.1))
        assert np.allclose(sol.v_star, 0) and np.allclose(sol.r_star, 0)

    def test_neutral_identity_features(self):
        ch = two_state()
        fm = FeatureModel(np.eye(2), stationary_distribution(ch))
        sol = solve_single_step(fm, ch, EXP)
        assert np.allclose(sol.v_star, np.linalg.solve(np.eye(2) - 0.9 * ch.P, ch.c), atol=1e-8)
        assert sol.equation == "single-step" and sol.unique

    def test_risk_zero_of_U(self):
        ch, fm = random_instance(3, 2, 0.9, 8)
        sol = solve_single_step(fm, ch, MSD(0.1))
        assert np.linalg.norm(U_operator(fm, ch, MSD(0.1), sol.r_star)) <= 1e-8
        assert sol.residual <= 1e-10

    def test_max_iter(self):
        ch, fm = random_instance(3, 2, 0.9, 8)
        with pytest.raises(SolverError) as err:
            solve_single_step(fm, ch, EXP, max_iter=3)
        assert err.value.residual > 0

    def test_contraction_guard(self):
        P = [[0.02, 0.98], [0.5, 0.5]]
        ch = MarkovChain(P, [1.0, 2.0], 0.95)
        fm = FeatureModel(np.eye(2), stationary_distribution(ch))
        with pytest.raises(ContractionError, match="override"):
            solve_single_step(fm, ch, MSD(1.0))
        sol = solve_single_step(fm, ch, MSD(1.0), override=True)
        assert sol.meta["distortion"]["condition_td0"] is False

    def test_rank_deficient(self):
        ch, _ = random_instance(4, 2, 0.9, 9)
        q = stationary_distribution(ch)
        Phi = np.array([[1.0, 1.0], [0.5, 0.5], [2.0, 2.0], [0.0, 0.0]])
        sol = solve_single_step(FeatureModel(Phi, q), ch, MSD(0.1))
        assert not sol.unique
        assert np.allclose(sol.r_star[0], sol.r_star[1])  # minimum norm
        full = solve_single_step(FeatureModel(Phi[:, :1], q), ch, MSD(0.1))
        assert np.allclose(sol.v_star, full.v_star, atol=1e-9)

    def test_json_export(self):
        ch, fm = random_instance(3, 2, 0.9, 8)
        doc = json.loads(solve_single_step(fm, ch, EXP).to_json())
        assert set(doc) >= {"r_star", "v_star", "residual", "iterations", "equation"}


class TestDeterministicDescent:
    def test_monotone_U_iteration(self):
        ch, fm = random_instance(3, 2, 0.9, 10)
        m = MSD(0.1)
        sol = solve_single_step(fm, ch, m)
        traj = iterate_operator(lambda r: U_operator(fm, ch, m, r), np.array([5.0, -5.0]), 0.05, 200)
        err = [qn(fm.Phi @ (r - sol.r_star), fm.q) for r in traj]
        assert all(b <= a + 1e-12 for a, b in zip(err, err[1:]))
        assert err[-1] < err[0]

    def test_semi_contraction(self):
        ch, fm = random_instance(4, 2, 0.9, 11)
        m = MSD(0.1)
        op = lambda r: U_operator(fm, ch, m, r)  # noqa: E731
        gamma = 0.05
        rng = np.random.default_rng(3)
        ratios = []
        for _ in range(200):
            a, b = rng.normal(scale=4.0, size=(2, 2))
            lhs = np.sum((a - gamma * op(a) - b + gamma * op(b)) ** 2)
            gap = np.sum((a - b) ** 2) - lhs
            ratios.append(gap / (gamma * qn(fm.Phi @ (a - b), fm.q) ** 2))
        assert min(ratios) > 0

    def test_unique_from_random_starts(self):
        ch, fm = random_instance(4, 2, 0.9, 12)
        m = MSD(0.1)
        sol = solve_single_step(fm, ch, m)
        for r0 in np.random.default_rng(4).normal(scale=10.0, size=(5, 2)):
            r = iterate_operator(lambda r: U_operator(fm, ch, m, r), r0, 0.3, 4000)[-1]
            assert np.linalg.norm(r - sol.r_star) < 1e-9


class TestMultistep:
    def test_lambda_zero_agrees(self):
        ch, fm = random_instance(3, 2, 0.9, 13)
        m = MSD(0.05)
        a = solve_single_step(fm, ch, m)
        b = solve_multistep(fm, ch, m, 0.0)
        assert np.allclose(a.v_star, b.v_star, atol=1e-8)

    @pytest.mark.parametrize("seed", [3, 14])
    def test_neutral_full_range_any_lambda(self, seed):
        # without an active projection both equations reduce to v = c + alpha P v
        ch, fm = random_instance(3, 3, 0.9, seed)
        a = solve_single_step(fm, ch, EXP)
        for lam in (0.3, 0.9, 1.0):
            b = solve_multistep(fm, ch, EXP, lam)
            assert qn(a.v_star - b.v_star, fm.q) <= 1e-8

    def test_neutral_projected_depends_on_lambda(self):
        # with m < n the risk-neutral TD(lambda) limit moves with lambda (classical TD theory)
        ch, fm = random_instance(3, 2, 0.9, 14)
        a = solve_single_step(fm, ch, EXP)
        b = solve_multistep(fm, ch, EXP, 0.9)
        assert qn(a.v_star - b.v_star, fm.q) > 0.1
        # TD(1) is the q-weighted least-squares fit of the true value
        c = solve_multistep(fm, ch, EXP, 1.0)
        assert np.allclose(c.r_star, wls(fm.Phi, fm.q, neutral_policy_value(ch)), atol=1e-8)

    def test_neutral_identity_features_any_lambda(self):
        ch = MarkovChain([[0.3, 0.7, 0.0], [0.2, 0.2, 0.6], [0.5, 0.1, 0.4]], [1.0, 2.0, 0.5], 0.9)
        fm = FeatureModel(np.eye(3), stationary_distribution(ch))
        a = solve_single_step(fm, ch, EXP)
        for lam in (0.5, 0.9):
            b = solve_multistep(fm, ch, EXP, lam)
            assert np.allclose(a.v_star, b.v_star, atol=1e-8)

    def test_risk_averse_solutions_differ(self):
        ch, fm = random_instance(3, 2, 0.9, 15)
        m = MSD(0.05)
        a = solve_single_step(fm, ch, m)
        b = solve_multistep(fm, ch, m, 0.9)
        assert np.linalg.norm(Ubar_operator(fm, ch, m, 0.9, b.r_star)) <= 1e-10
        assert qn(fm.Phi @ (a.r_star - b.r_star), fm.q) > 10 * 1e-10
        assert b.meta["gamma_rule"] == "margin" and b.meta["gamma_bar"] > 0

    def test_divergence_detected(self):
        ch, fm = random_instance(3, 2, 0.9, 15)
        with pytest.raises(SolverError, match="smaller gamma_bar"):
            solve_multistep(fm, ch, MSD(0.05), 0.5, gamma_bar=1e4)

    def test_contraction_guard(self):
        ch, fm = random_instance(3, 2, 0.9, 15)
        with pytest.raises(ContractionError):
            solve_multistep(fm, ch, MSD(0.5), 0.5)

    def test_monotone_Ubar_iteration(self):
        ch, fm = random_instance(3, 2, 0.9, 16)
        m = MSD(0.05)
        sol = solve_multistep(fm, ch, m, 0.5)
        g = sol.meta["gamma_bar"]
        traj = iterate_operator(lambda r: Ubar_operator(fm, ch, m, 0.5, r), sol.r_star + [3.0, -4.0], g, 300)
        err = [np.linalg.norm(r - sol.r_star) for r in traj]
        assert all(b <= a + 1e-12 for a, b in zip(err, err[1:]))
