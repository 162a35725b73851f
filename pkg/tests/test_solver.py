"""Solver unit tests: line search, L-BFGS, PHR outer loop, KKT toys."""

import numpy as np
import pytest

from camp.solver import (
    AlmConfig,
    AlmState,
    DenseProblem,
    alm_solve,
    augmented_objective,
    lbfgs_minimize,
    lewis_overton_search,
    update_duals,
)

TIGHT = AlmConfig(eps_opt=1e-6, eps_feas=1e-7, max_outer=50)


# ---------------------------------------------------------------------------
# augmented objective algebra


def test_augmented_equality_value_and_gradient():
    prob = DenseProblem(lambda x: x[0] ** 2, lambda x: np.array([2 * x[0]]),
                        eqs=[(lambda x: x[0] - 1.0, lambda x: np.array([1.0]))])
    ev = prob.evaluate(np.array([0.5]))
    state = AlmState(np.array([0.3]), np.zeros(0), 2.0)
    value, grad = augmented_objective(ev, state)
    # J + rho/2 (h + lam/rho)^2 = 0.25 + 1.0 * (-0.35)^2
    assert value == pytest.approx(0.3725, abs=1e-12)
    # gradJ + (rho h + lam) dh = 1.0 + (-0.7)
    assert grad[0] == pytest.approx(0.3, abs=1e-12)


def test_augmented_inactive_inequality_contributes_nothing():
    prob = DenseProblem(lambda x: x[0] ** 2, lambda x: np.array([2 * x[0]]),
                        ineqs=[(lambda x: x[0], lambda x: np.array([1.0]))])
    ev = prob.evaluate(np.array([-1.0]))
    state = AlmState(np.zeros(0), np.array([0.0]), 5.0)
    value, grad = augmented_objective(ev, state)
    assert value == pytest.approx(1.0)
    assert grad[0] == pytest.approx(-2.0)


def test_penalty_smooth_at_activation_boundary():
    # with mu = 0.4, rho = 2 the hinge switches at g = -0.2
    prob = DenseProblem(lambda x: 0.0, lambda x: np.array([0.0]),
                        ineqs=[(lambda x: x[0], lambda x: np.array([1.0]))])
    state = AlmState(np.zeros(0), np.array([0.4]), 2.0)

    def dphi(x):
        _, grad = augmented_objective(prob.evaluate(np.array([x])), state)
        return grad[0]

    eps = 1e-7
    left = dphi(-0.2 - eps)
    right = dphi(-0.2 + eps)
    assert abs(left - right) < 1e-6  # first derivative continuous
    assert dphi(-0.2 - 0.1) == 0.0
    assert dphi(-0.2 + 0.1) == pytest.approx(2.0 * 0.1, abs=1e-12)


def test_dual_update_formulas():
    cfg = AlmConfig(gamma=10.0)
    state = AlmState(np.array([1.0]), np.array([0.5, 0.2]), 4.0)
    h = np.array([0.25])
    g = np.array([0.1, -1.0])
    out = update_duals(state, h, g, prev_violation=1.0, cfg=cfg)
    assert out.lam[0] == pytest.approx(1.0 + 4.0 * 0.25)
    assert out.mu[0] == pytest.approx(0.5 + 4.0 * 0.1)
    assert out.mu[1] == 0.0  # clamped at zero
    # violation 0.25 <= 0.5 * 1.0 so rho holds
    assert out.rho == 4.0
    out2 = update_duals(state, h, g, prev_violation=0.3, cfg=cfg)
    assert out2.rho == 40.0  # 0.25 > 0.15 stalls, rho grows


def test_augmented_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 3))
    Q = A @ A.T + 3 * np.eye(3)
    b = rng.normal(size=3)

    prob = DenseProblem(
        lambda x: 0.5 * x @ Q @ x + b @ x,
        lambda x: Q @ x + b,
        eqs=[(lambda x: x[0] * x[1] - 0.3, lambda x: np.array([x[1], x[0], 0.0]))],
        ineqs=[(lambda x: x[2] ** 2 - 0.5, lambda x: np.array([0.0, 0.0, 2 * x[2]])),
               (lambda x: -x[0] - 0.1, lambda x: np.array([-1.0, 0.0, 0.0]))],
    )
    state = AlmState(np.array([0.7]), np.array([0.4, 0.2]), 3.0)
    for _ in range(5):
        x = rng.normal(size=3)
        _, grad = augmented_objective(prob.evaluate(x), state)
        fd = np.zeros(3)
        hstep = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = hstep
            fp, _ = augmented_objective(prob.evaluate(x + e), state)
            fm, _ = augmented_objective(prob.evaluate(x - e), state)
            fd[i] = (fp - fm) / (2 * hstep)
        assert np.max(np.abs(fd - grad)) < 1e-5


# ---------------------------------------------------------------------------
# line search and L-BFGS behavior


def test_line_search_rejects_ascent_direction():
    fun = lambda x: (float(x @ x), 2 * x)
    x = np.array([1.0])
    _, g = fun(x)
    with pytest.raises(ValueError):
        lewis_overton_search(fun, x, g, float(x @ x), g)


def test_line_search_weak_wolfe_on_kink():
    # |x| from x = 1 along d = -1; subgradient 0 at the kink
    fun = lambda x: (abs(float(x[0])), np.array([np.sign(x[0])]))
    f0, g0 = fun(np.array([1.0]))
    hit = lewis_overton_search(fun, np.array([1.0]), np.array([-1.0]), f0, g0)
    assert hit is not None
    alpha, f, _, _ = hit
    assert f <= f0 - 1e-4 * alpha  # Armijo held


def test_lbfgs_rosenbrock():
    def rosen(x):
        f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
        g = np.array([
            -2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
            200 * (x[1] - x[0] ** 2),
        ])
        return f, g

    res = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), grad_tol=1e-9, max_iter=500)
    assert res.converged
    assert np.max(np.abs(res.x - 1.0)) <= 1e-6


def quadratic_instance(seed, n=5):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    Qm, _ = np.linalg.qr(A)
    Q = Qm @ np.diag(np.linspace(1.0, 5.0, n)) @ Qm.T
    b = rng.normal(size=n)
    return (lambda x: (0.5 * x @ Q @ x + b @ x, Q @ x + b)), rng.normal(size=n)


def test_lbfgs_quadratic_terminates_fast():
    n = 5
    fun, x0 = quadratic_instance(3, n)
    res = lbfgs_minimize(fun, x0, grad_tol=1e-9, max_iter=100, memory=n + 5)
    assert res.converged
    assert np.max(np.abs(res.grad)) < 1e-9
    assert res.iterations <= n + 5


def test_lbfgs_quadratic_count_distribution():
    # near-CG behavior with full memory: inexact steps and the adaptive
    # initial scaling cost at most a few extra iterations on any instance
    n = 5
    counts = []
    for seed in range(12):
        fun, x0 = quadratic_instance(seed, n)
        res = lbfgs_minimize(fun, x0, grad_tol=1e-9, max_iter=100, memory=n + 5)
        assert res.converged
        counts.append(res.iterations)
    assert sorted(counts)[len(counts) // 2] <= n + 5
    assert max(counts) <= n + 8


def test_lbfgs_nonsmooth_l1():
    fun = lambda x: (float(np.sum(np.abs(x))), np.sign(x))
    res = lbfgs_minimize(fun, np.array([0.7, -0.3, 0.2]), grad_tol=1e-5,
                         max_iter=200)
    assert res.f <= 1e-3


def test_lbfgs_double_line_search_failure_returns_best():
    # upward jump in every direction away from 0: no step can decrease, so
    # the line search fails, the memory reset changes nothing, and the second
    # failure must hand back the starting point with a warning
    def fun(x):
        r = float(np.linalg.norm(x))
        if r == 0.0:
            return 0.0, np.array([1.0, 0.0])
        return 1.0 + r, x / r

    res = lbfgs_minimize(fun, np.zeros(2), grad_tol=1e-9, max_iter=50)
    assert res.warning is not None
    assert res.f == 0.0
    assert np.allclose(res.x, 0.0)


# ---------------------------------------------------------------------------
# KKT toys through the full outer loop


def test_toy_active_inequality():
    # min (x-2)^2 s.t. x <= 1; solution x = 1, multiplier 2
    prob = DenseProblem(lambda x: (x[0] - 2) ** 2, lambda x: np.array([2 * (x[0] - 2)]),
                        ineqs=[(lambda x: x[0] - 1.0, lambda x: np.array([1.0]))])
    rep = alm_solve(prob, np.array([0.0]), TIGHT)
    assert rep.converged
    assert abs(rep.x[0] - 1.0) <= 1e-4
    assert abs(rep.state.mu[0] - 2.0) <= 1e-3


def test_toy_equality():
    # min x^2 + y^2 s.t. x + y = 1; solution (0.5, 0.5), multiplier -1
    prob = DenseProblem(lambda x: float(x @ x), lambda x: 2 * x,
                        eqs=[(lambda x: x[0] + x[1] - 1.0,
                              lambda x: np.array([1.0, 1.0]))])
    rep = alm_solve(prob, np.array([2.0, -1.0]), TIGHT)
    assert rep.converged
    assert np.max(np.abs(rep.x - 0.5)) <= 1e-4
    assert abs(rep.state.lam[0] + 1.0) <= 1e-3


def test_toy_mixed_active_inactive():
    # min (x+1)^2 + (y-2)^2 s.t. x >= 0, y <= 3; solution (0, 2), mu = (2, 0)
    prob = DenseProblem(
        lambda x: (x[0] + 1) ** 2 + (x[1] - 2) ** 2,
        lambda x: np.array([2 * (x[0] + 1), 2 * (x[1] - 2)]),
        ineqs=[(lambda x: -x[0], lambda x: np.array([-1.0, 0.0])),
               (lambda x: x[1] - 3.0, lambda x: np.array([0.0, 1.0]))],
    )
    rep = alm_solve(prob, np.array([1.5, 0.0]), TIGHT)
    assert rep.converged
    assert abs(rep.x[0]) <= 1e-4
    assert abs(rep.x[1] - 2.0) <= 1e-4
    assert abs(rep.state.mu[0] - 2.0) <= 1e-3
    assert abs(rep.state.mu[1]) <= 1e-9


def test_complementarity_toy():
    # pull both coordinates toward 1 subject to x, y >= 0 and x * y = 0
    prob = DenseProblem(
        lambda x: (x[0] - 1) ** 2 + (x[1] - 1) ** 2,
        lambda x: np.array([2 * (x[0] - 1), 2 * (x[1] - 1)]),
        eqs=[(lambda x: x[0] * x[1], lambda x: np.array([x[1], x[0]]))],
        ineqs=[(lambda x: -x[0], lambda x: np.array([-1.0, 0.0])),
               (lambda x: -x[1], lambda x: np.array([0.0, -1.0]))],
    )
    rep = alm_solve(prob, np.array([0.5, 0.4]), TIGHT)
    assert abs(rep.x[0] * rep.x[1]) <= 1e-6
    f = (rep.x[0] - 1) ** 2 + (rep.x[1] - 1) ** 2
    assert f == pytest.approx(1.0, abs=1e-3)  # lands on one branch


def test_warm_start_resumes():
    prob = DenseProblem(lambda x: float(x @ x), lambda x: 2 * x,
                        eqs=[(lambda x: x[0] + x[1] - 1.0,
                              lambda x: np.array([1.0, 1.0]))])
    stage1 = alm_solve(prob, np.array([2.0, -1.0]),
                       AlmConfig(eps_opt=1e-6, eps_feas=1e-7, max_outer=1))
    assert not stage1.converged or stage1.max_violation <= 1e-7
    stage2 = alm_solve(prob, stage1.x, TIGHT, state=stage1.state)
    assert stage2.converged
    assert np.max(np.abs(stage2.x - 0.5)) <= 1e-4
    assert len(stage1.history) == 1


def test_unconstrained_through_outer_loop():
    prob = DenseProblem(lambda x: float((x[0] - 3) ** 2), lambda x: np.array([2 * (x[0] - 3)]))
    rep = alm_solve(prob, np.array([0.0]), AlmConfig())
    assert rep.converged
    assert rep.outer_iterations == 1
    assert abs(rep.x[0] - 3.0) <= 1e-4
