import itertools

import numpy as np
import pytest

from fluororegi.optimize import (
    BoxConstraints, GridTooLargeError, ParallelObjective, minimize_bobyqa, minimize_cmaes,
    minimize_de, minimize_grid, minimize_pso,
)


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x):
    return float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)


BOX6 = BoxConstraints.symmetric([10.0] * 6)


def assert_consistent(rep, obj, box=None):
    if box is not None:
        assert box.contains(rep.x)
    assert abs(rep.fun - obj(rep.x)) <= 1e-12 * max(1.0, abs(rep.fun))
    assert rep.fun == pytest.approx(min(rep.trace), abs=0)
    assert all(b <= a for a, b in zip(rep.trace, rep.trace[1:]))


def test_box_validation():
    with pytest.raises(ValueError):
        BoxConstraints([1.0], [0.0])
    b = BoxConstraints([0, 0], [1, 2])
    assert np.array_equal(b.clip([-1, 3]), [0, 2]) and b.contains([0.5, 2]) and not b.contains([2, 0])


# --------------------------------------------------------------------------
# grid


def test_grid_1d_quadratic():
    rep = minimize_grid(lambda x: (x[0] - 0.2) ** 2, BoxConstraints([-5], [5]), [1.0])
    assert rep.x[0] == 0.0 and rep.nfev == 11


def test_grid_matches_enumeration_oracle():
    box = BoxConstraints([-2.0, -1.0], [2.0, 3.0])
    inc = [0.5, 0.75]
    f = lambda x: (x[0] - 0.33) ** 2 + 2 * (x[1] - 1.1) ** 2
    rep = minimize_grid(f, box, inc, chunk=7)
    pts = [(-2 + 0.5 * i, -1 + 0.75 * j) for i in range(9) for j in range(6)]
    best = min(pts, key=f)
    assert np.allclose(rep.x, best) and rep.nfev == len(pts)
    assert_consistent(rep, f, box)


def test_grid_single_point_and_ties_and_cap():
    rep = minimize_grid(sphere, BoxConstraints([1.0, 2.0], [1.5, 2.0]), [10.0, 0.0])
    assert rep.nfev == 1 and np.array_equal(rep.x, [1.0, 2.0])
    rep = minimize_grid(lambda x: 0.0, BoxConstraints([0, 0], [2, 2]), [1, 1])
    assert np.array_equal(rep.x, [0, 0])
    with pytest.raises(GridTooLargeError):
        minimize_grid(sphere, BOX6, [0.01] * 6)
    with pytest.raises(ValueError):
        minimize_grid(sphere, BOX6, [0.0] * 6)


# --------------------------------------------------------------------------
# DE / PSO


def test_de_sphere_6d():
    rep = minimize_de(sphere, BOX6, iters=100, pop=50, seed=3)
    assert rep.fun < 1e-3
    assert_consistent(rep, sphere, BOX6)
    rep2 = minimize_de(sphere, BOX6, iters=100, pop=50, seed=3)
    assert np.array_equal(rep.x, rep2.x) and rep.trace == rep2.trace


def test_de_partners_are_distinct():
    seen = []

    class Probe:
        def evaluate_batch(self, X):
            seen.append(X.copy())
            return np.zeros(len(X))

        def __call__(self, x):
            return 0.0
    # with CR = 1 the trial is the mutant; a repeated partner would make V == P[r1]
    box = BoxConstraints([-1e6] * 2, [1e6] * 2)
    minimize_de(Probe(), box, iters=1, pop=5, cr=1.0, dither=(1.0, 1.0), seed=0)
    P, U = seen
    assert len(U) == 5 and not any(np.allclose(u, p) for u in U for p in P)


def test_pso_sphere_6d():
    rep = minimize_pso(sphere, BOX6, iters=50, particles=500, seed=4)
    assert rep.fun < 1e-2
    assert_consistent(rep, sphere, BOX6)
    rep2 = minimize_pso(sphere, BOX6, iters=50, particles=500, seed=4)
    assert np.array_equal(rep.x, rep2.x) and rep.fun == rep2.fun


def test_population_results_independent_of_workers():
    a = minimize_de(sphere, BOX6, iters=10, pop=20, seed=5)
    with ParallelObjective(sphere, workers=3) as po:
        b = minimize_de(po, BOX6, iters=10, pop=20, seed=5)
        c = minimize_pso(po, BOX6, iters=5, particles=30, seed=1)
    d = minimize_pso(sphere, BOX6, iters=5, particles=30, seed=1)
    assert np.array_equal(a.x, b.x) and a.trace == b.trace
    assert np.array_equal(c.x, d.x) and c.trace == d.trace


# --------------------------------------------------------------------------
# CMA-ES


def test_cmaes_rosenbrock():
    rep = minimize_cmaes(rosenbrock, [-1.2, 1.0], [0.5, 0.5], pop=100, seed=1, maxfevals=5000)
    assert rep.fun < 1e-6 and rep.nfev <= 5000
    assert np.allclose(rep.x, [1, 1], atol=1e-2)
    assert_consistent(rep, rosenbrock)
    rep2 = minimize_cmaes(rosenbrock, [-1.2, 1.0], [0.5, 0.5], pop=100, seed=1, maxfevals=5000)
    assert np.array_equal(rep.x, rep2.x) and rep.trace == rep2.trace


def test_cmaes_isotropic_quadratic_stays_isotropic():
    rep = minimize_cmaes(sphere, [3.0, -2.0, 1.0, 4.0], [1.0] * 4, pop=20, seed=2, maxfevals=20000)
    assert rep.fun < 1e-12
    assert rep.info["cov_condition"] < 10


def test_cmaes_per_coordinate_scaling_and_penalty_and_box():
    f = lambda x: (x[0] / 100.0) ** 2 + (x[1] * 100.0) ** 2
    rep = minimize_cmaes(f, [300.0, 0.03], [100.0, 0.01], pop=12, seed=3, maxfevals=4000)
    assert rep.fun < 1e-10
    pen = lambda x: (x[0] - 1) ** 2
    rep = minimize_cmaes(sphere, [2.0, 2.0], [1.0, 1.0], pop=10, penalty=pen, seed=0, maxfevals=3000)
    assert np.allclose(rep.x, [0.5, 0.0], atol=1e-5)
    assert rep.fun == pytest.approx(sphere(rep.x) + pen(rep.x), abs=1e-14)
    box = BoxConstraints([1.0, -5.0], [5.0, 5.0])
    rep = minimize_cmaes(sphere, [3.0, 3.0], [1.0, 1.0], pop=10, seed=0, box=box, maxfevals=3000)
    assert box.contains(rep.x) and rep.x[0] == 1.0 and abs(rep.x[1]) < 1e-5


# --------------------------------------------------------------------------
# BOBYQA


def test_bobyqa_interior_quadratic():
    c = np.array([0.3, -1.7])
    f = lambda x: float((x[0] - c[0]) ** 2 + 3 * (x[1] - c[1]) ** 2 + (x[0] - c[0]) * (x[1] - c[1]))
    box = BoxConstraints([-4.0, -5.0], [4.0, 3.0])
    rep = minimize_bobyqa(f, [2.0, 2.0], box)
    assert np.max(np.abs(rep.x - c)) < 1e-6
    assert_consistent(rep, f, box)


def test_bobyqa_minimum_outside_box_is_kkt():
    f = lambda x: float((x[0] - 5) ** 2 + (x[1] - 0.5) ** 2)
    box = BoxConstraints([-2.0, -2.0], [2.0, 2.0])
    rep = minimize_bobyqa(f, [0.0, 0.0], box)
    assert rep.x[0] == pytest.approx(2.0, abs=1e-10) and rep.x[1] == pytest.approx(0.5, abs=1e-6)
    # projected gradient vanishes: no feasible descent direction
    g = np.array([2 * (rep.x[0] - 5), 2 * (rep.x[1] - 0.5)])
    proj = box.clip(rep.x - g) - rep.x
    assert np.linalg.norm(proj) < 1e-6
    # constrained scan oracle
    xs = np.linspace(-2, 2, 401)
    scan = min(f((a, b)) for a, b in itertools.product(xs, xs))
    assert rep.fun <= scan + 1e-12


def test_bobyqa_optimal_init_and_boundary_nudge():
    box = BoxConstraints([-1.0, -1.0], [1.0, 1.0])
    rep = minimize_bobyqa(sphere, [0.0, 0.0], box)
    assert rep.fun == 0.0
    with pytest.warns(RuntimeWarning):
        rep = minimize_bobyqa(sphere, [1.0, 0.0], box)
    assert rep.fun < 1e-12
    with pytest.raises(ValueError):
        minimize_bobyqa(sphere, [2.0, 0.0], box)


def test_bobyqa_six_dims_with_fixed_coordinate():
    c = np.array([1.0, -2.0, 0.5, 3.0, 0.0, -1.0])
    f = lambda x: float(np.sum((x - c) ** 2 * np.arange(1, 7)))
    box = BoxConstraints([-5] * 6, [5] * 6)
    rep = minimize_bobyqa(f, np.zeros(6), box)
    assert np.max(np.abs(rep.x - c)) < 1e-6
    box2 = BoxConstraints([-5, -5, 0, -5, -5, -5], [5, 5, 0, 5, 5, 5])
    rep = minimize_bobyqa(f, np.zeros(6), box2)
    assert rep.x[2] == 0.0 and abs(rep.x[0] - 1.0) < 1e-6
