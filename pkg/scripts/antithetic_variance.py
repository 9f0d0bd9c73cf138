"""Compare the sample variance of the multistep Hessian target with and without antithetic pairs.

Exact Merton (or no-leverage) derivatives stand in for trained networks, so the
comparison isolates the estimator itself.
"""

import argparse

import numpy as np

from neuralpde.fully_nonlinear import HessianEstimate, gamma_v3_target
from neuralpde.problems import make_merton_problem, make_no_leverage
from neuralpde.sim import TimeGrid, simulate_paths


def exact_networks(problem, grid):
    def at(i, part):
        return lambda x: problem.reference_derivatives(grid.t(i), x)[part]

    u_nets = {i: (lambda x, f=at(i, 0): f(x)[:, None]) for i in range(grid.n_steps)}
    z_nets = {i: at(i, 2) for i in range(grid.n_steps)}
    gammas = {m: HessianEstimate(m, problem.dim, terminal=at(m * grid.kappa_hat, 3)) for m in range(grid.n_coarse)}
    gammas[grid.n_coarse] = HessianEstimate(grid.n_coarse, problem.dim, terminal=problem.d2g)
    return u_nets, z_nets, gammas


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--problem", choices=["merton", "noleverage1"], default="merton")
    parser.add_argument("--paths", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    problem = make_merton_problem() if args.problem == "merton" else make_no_leverage(1)
    grid = TimeGrid(problem.maturity, 20, 4)
    nets = exact_networks(problem, grid)
    paths = simulate_paths(grid, problem.x0, problem.drift, problem.diffusion, args.paths, np.random.default_rng(args.seed))
    print(f"{'coarse point':>12} {'exact':>10} {'plain mean':>11} {'plain var':>10} {'anti mean':>10} {'anti var':>10}")
    for ell in range(grid.n_coarse):
        exact = problem.reference_derivatives(grid.t(ell * grid.kappa_hat), paths.X[:, ell * grid.kappa_hat])[3][:, 0, 0].mean()
        plain = gamma_v3_target(problem, grid, paths, ell, *nets, antithetic=False)[:, 0, 0]
        anti = gamma_v3_target(problem, grid, paths, ell, *nets, antithetic=True)[:, 0, 0]
        print(f"{ell:>12d} {exact:>10.4f} {plain.mean():>11.4f} {plain.var():>10.4f} {anti.mean():>10.4f} {anti.var():>10.4f}")


if __name__ == "__main__":
    main()
