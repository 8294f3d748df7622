"""A short tour of riskd on the demo instance in this directory.

Run from the repository root:

    python demos/walkthrough.py
"""

from pathlib import Path

import numpy as np

from riskd import (
    LearnerState,
    RiskMapping,
    StepsizeSchedule,
    distortion_coefficient,
    evaluate,
    load_chain,
    load_features,
    run_learner,
    solve_multistep,
    solve_single_step,
    stationary_distribution,
)

HERE = Path(__file__).parent


def main():
    # one-step risk: the semideviation term only charges outcomes above the mean
    p = np.array([0.5, 0.5])
    v = np.array([0.0, 2.0])
    for beta in (0.0, 0.5, 1.0):
        print(f"mean-semideviation beta={beta}: {evaluate(RiskMapping.mean_semideviation(beta), p, v):.3f}")

    chain = load_chain(HERE / "mdp.json")
    fm = load_features(HERE / "features.json", stationary_distribution(chain))
    m = RiskMapping.mean_semideviation(0.05)
    rep = distortion_coefficient(m, chain.P, chain.alpha)
    print(f"\nkappa = {rep.kappa_hat:.4f}, TD(0) condition {rep.condition_td0}, TD(lambda) condition {rep.condition_tdlambda}")

    single = solve_single_step(fm, chain, m)
    multi = solve_multistep(fm, chain, m, 0.9)
    print("single-step r* =", np.round(single.r_star, 4))
    print("multistep  r* =", np.round(multi.r_star, 4), "(lambda 0.9)")

    for lam, target in ((0.0, single), (0.9, multi)):
        ls = LearnerState.initial(fm.m, lam=lam, alpha=chain.alpha, N=4, schedule=StepsizeSchedule(100, 100, 1))
        r = run_learner(chain, fm, m, ls, 200_000, seed=0).final.r
        err = fm.norm(fm.Phi @ r - target.v_star) / fm.norm(target.v_star)
        print(f"TD(lambda={lam}) after 200000 steps: r = {np.round(r, 4)}, relative error {err:.4f}")


if __name__ == "__main__":
    main()
