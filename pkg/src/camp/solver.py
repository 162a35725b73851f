"""Augmented Lagrangian solver with an L-BFGS inner loop.

The outer loop is the PHR scheme: equality residuals h get multipliers
lambda, inequality residuals g get clamped multipliers mu, both folded
into one smooth penalty whose unconstrained minimizer is found by L-BFGS
with a bracketing-bisection weak-Wolfe line search (tolerant of the
nonsmooth residual terms). Penalty weight rho grows by gamma only when
the worst violation failed to halve, and multipliers warm start across
outer iterations.

Problems are anything with an ``evaluate(x) -> ProblemEval`` method; the
evaluation carries the objective, its gradient, stacked residual vectors,
and a backprop closure that turns per-residual penalty weights into a
gradient contribution without materializing Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


@dataclass(eq=False)
class ProblemEval:
    """One evaluation of a constrained problem at a point."""

    J: float  # objective value
    gradJ: np.ndarray  # (n,)
    h: np.ndarray  # (n_eq,) equality residuals, want 0
    g: np.ndarray  # (n_ineq,) inequality residuals, want <= 0
    backprop: Callable[[np.ndarray, np.ndarray], np.ndarray]  # weights -> gradient
    signature: Optional[bytes] = None  # active-set fingerprint for nonsmoothness
    extra: Optional[dict] = None  # evaluator-specific diagnostics

    def max_violation(self) -> float:
        vh = float(np.max(np.abs(self.h))) if len(self.h) else 0.0
        vg = float(np.max(np.maximum(self.g, 0.0))) if len(self.g) else 0.0
        return max(vh, vg)


class DenseProblem:
    """Small problem with explicit residual Jacobians, used by tests and toys."""

    def __init__(self, f, grad_f, eqs=(), ineqs=()):
        # eqs/ineqs: sequences of (residual(x) -> float, jacobian(x) -> (n,))
        self.f = f
        self.grad_f = grad_f
        self.eqs = list(eqs)
        self.ineqs = list(ineqs)

    def evaluate(self, x: np.ndarray) -> ProblemEval:
        x = np.asarray(x, dtype=float)
        h = np.array([r(x) for r, _ in self.eqs])
        g = np.array([r(x) for r, _ in self.ineqs])
        jh = np.array([j(x) for _, j in self.eqs]).reshape(len(self.eqs), len(x))
        jg = np.array([j(x) for _, j in self.ineqs]).reshape(len(self.ineqs), len(x))

        def backprop(w_h, w_g):
            out = np.zeros(len(x))
            if len(w_h):
                out += w_h @ jh
            if len(w_g):
                out += w_g @ jg
            return out

        return ProblemEval(float(self.f(x)), np.asarray(self.grad_f(x), dtype=float),
                           h, g, backprop)


@dataclass
class AlmConfig:
    rho0: float = 1.0
    gamma: float = 10.0
    eps_opt: float = 1e-4  # stationarity: inf-norm of the augmented gradient
    eps_feas: float = 1e-3  # feasibility: worst residual violation
    max_outer: int = 30
    max_inner: int = 300
    rho_max: float = 1e6  # growth cap; beyond this L-BFGS cannot polish anyway
    # inner stationarity target starts loose and tightens geometrically;
    # convergence is still certified against eps_opt at the kept iterate
    inner_tol0: float = 1e-1
    inner_shrink: float = 0.5
    memory: int = 8
    c1: float = 1e-4  # Armijo slope fraction
    c2: float = 0.9  # weak Wolfe curvature fraction
    max_bisect: int = 60


@dataclass(eq=False)
class AlmState:
    lam: np.ndarray  # equality multipliers
    mu: np.ndarray  # inequality multipliers, kept >= 0
    rho: float
    # per-row penalty scale (diagonal W): rows whose Jacobians are naturally
    # steep (time-derivative chains) get weight < 1 so one scalar rho serves
    # every family without wrecking the inner conditioning; feasibility is
    # still measured on the raw residuals
    scale_h: Optional[np.ndarray] = None
    scale_g: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, n_eq: int, n_ineq: int, rho0: float,
              scale_h: Optional[np.ndarray] = None,
              scale_g: Optional[np.ndarray] = None) -> "AlmState":
        return cls(np.zeros(n_eq), np.zeros(n_ineq), float(rho0),
                   scale_h, scale_g)

    def rho_rows(self) -> tuple:
        rh = self.rho if self.scale_h is None else self.rho * self.scale_h
        rg = self.rho if self.scale_g is None else self.rho * self.scale_g
        return rh, rg


def augmented_objective(ev: ProblemEval, state: AlmState):
    """PHR augmented Lagrangian value and gradient at one evaluation."""
    rho_h, rho_g = state.rho_rows()
    w_h = rho_h * ev.h + state.lam
    w_g = np.maximum(rho_g * ev.g + state.mu, 0.0)
    # lam h + rho/2 h^2 == (w_h^2 - lam^2) / (2 rho), and the PHR hinge term
    # is (w_g^2 - mu^2) / (2 rho); both forms stay valid with per-row rho
    pen_h = float(np.sum((w_h * w_h - state.lam * state.lam) / rho_h)) if len(ev.h) else 0.0
    pen_g = float(np.sum((w_g * w_g - state.mu * state.mu) / rho_g)) if len(ev.g) else 0.0
    value = ev.J + 0.5 * (pen_h + pen_g)
    grad = ev.gradJ + ev.backprop(w_h, w_g)
    return value, grad


def update_duals(state: AlmState, h: np.ndarray, g: np.ndarray,
                 prev_violation: float, cfg: AlmConfig) -> AlmState:
    """First-order multiplier update; rho grows only when progress stalled."""
    rho_h, rho_g = state.rho_rows()
    lam = state.lam + rho_h * h
    mu = np.maximum(state.mu + rho_g * g, 0.0)
    vh = float(np.max(np.abs(h))) if len(h) else 0.0
    vg = float(np.max(np.maximum(g, 0.0))) if len(g) else 0.0
    viol = max(vh, vg)
    rho = state.rho
    # grow only while genuinely infeasible: past the feasibility target a
    # larger rho cannot buy anything and only poisons the inner conditioning
    if viol > cfg.eps_feas and viol > 0.5 * prev_violation:
        rho = min(rho * cfg.gamma, cfg.rho_max)
    return AlmState(lam, mu, rho, state.scale_h, state.scale_g)


# ---------------------------------------------------------------------------
# line search and L-BFGS


def lewis_overton_search(fun, x, d, f0, g0, c1=1e-4, c2=0.9,
                         max_bisect=60, alpha0=1.0):
    """Bracketing-bisection search for Armijo + weak Wolfe conditions.

    Handles nonsmooth objectives: a trial with a non-finite value counts
    as an Armijo failure and shrinks the bracket. When the bisection budget
    runs out, the lower bracket end still satisfies sufficient decrease, so
    it is returned instead of reporting failure; only a ray with no recorded
    decrease at all returns None.
    """
    slope0 = float(g0 @ d)
    if slope0 >= 0.0:
        raise ValueError("line search needs a descent direction")
    lo, hi = 0.0, np.inf
    lo_hit = None
    alpha = float(alpha0)
    evals = 0
    # sufficient-decrease comparisons below ~20 ulps of f0 are pure rounding
    # noise; without this allowance the bracket collapses right at the spot
    # where the iterate is closing the last digits of the gradient
    noise = 20.0 * np.finfo(float).eps * max(1.0, abs(f0))
    for _ in range(max_bisect):
        f, g = fun(x + alpha * d)
        evals += 1
        if not np.isfinite(f) or f > f0 + c1 * alpha * slope0 + noise:
            hi = alpha
        elif float(g @ d) < c2 * slope0:
            lo = alpha
            lo_hit = (alpha, f, g)
        else:
            slope1 = float(g @ d)
            if abs(slope1) > 0.3 * abs(slope0) and slope1 != slope0:
                # the accepted step is far from the 1-d minimizer; one secant
                # step on the slope sharpens the curvature pair (exact for
                # locally quadratic objectives) and is skipped near
                # quasi-Newton convergence where unit steps are already good
                a2 = alpha * slope0 / (slope0 - slope1)
                if np.isfinite(a2) and 0.0 < a2 < 10.0 * alpha:
                    f2, g2 = fun(x + a2 * d)
                    evals += 1
                    if (np.isfinite(f2) and f2 <= f0 + c1 * a2 * slope0 + noise
                            and float(g2 @ d) >= c2 * slope0 and f2 <= f):
                        return a2, f2, g2, evals
            return alpha, f, g, evals
        alpha = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * alpha
        if hi - lo < 1e-16 and np.isfinite(hi):
            break
    if lo_hit is not None:
        # curvature condition never held (the augmented objective jumps at
        # contact switches); the decrease at lo is still real progress
        alpha, f, g = lo_hit
        return alpha, f, g, evals
    return None


@dataclass(eq=False)
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    warning: Optional[str] = None
    n_evals: int = 0


def lbfgs_minimize(fun, x0: np.ndarray, grad_tol: float = 1e-4, max_iter: int = 300,
                   memory: int = 8, c1: float = 1e-4, c2: float = 0.9,
                   max_bisect: int = 60) -> LbfgsResult:
    """Limited-memory quasi-Newton descent with weak-Wolfe steps.

    Non-descent directions flush the memory; two consecutive line-search
    failures return the best point seen with a warning.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    evals = 1
    best_f, best_x, best_g = f, x.copy(), g.copy()
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    consec_fail = 0
    it = 0
    warning = None
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= grad_tol:
            return LbfgsResult(x, f, g, it - 1, True, None, evals)

        # two-loop recursion
        d = -g.copy()
        if s_list:
            alphas = []
            for s, y, r in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
                a = r * float(s @ d)
                alphas.append(a)
                d -= a * y
            s, y = s_list[-1], y_list[-1]
            d *= float(s @ y) / float(y @ y)
            for (s, y, r), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
                b = r * float(y @ d)
                d += (a - b) * s
        if float(g @ d) >= -1e-12 * np.linalg.norm(g) * np.linalg.norm(d):
            s_list.clear()
            y_list.clear()
            rho_list.clear()
            d = -g.copy()

        alpha0 = 1.0 if s_list or it > 1 else min(1.0, 1.0 / max(1.0, gnorm))
        hit = lewis_overton_search(fun, x, d, f, g, c1, c2, max_bisect, alpha0)
        if hit is None:
            consec_fail += 1
            s_list.clear()
            y_list.clear()
            rho_list.clear()
            if consec_fail >= 2:
                warning = "line search failed twice; returning best iterate"
                break
            continue
        alpha, f_new, g_new, used = hit
        evals += used
        consec_fail = 0
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x = x + s
        f, g = f_new, g_new
        if f < best_f:
            best_f, best_x, best_g = f, x.copy(), g.copy()

    if f <= best_f:
        best_f, best_x, best_g = f, x, g
    converged = float(np.max(np.abs(best_g))) <= grad_tol
    return LbfgsResult(best_x, best_f, best_g, it, converged, warning, evals)


# ---------------------------------------------------------------------------
# outer loop


@dataclass(eq=False)
class SolveReport:
    x: np.ndarray
    converged: bool
    outer_iterations: int
    inner_iterations: int
    grad_inf: float  # stationarity of the augmented objective at exit
    max_violation: float
    state: AlmState
    final_eval: ProblemEval
    history: list = field(default_factory=list)  # per outer: dict of scalars


def alm_solve(problem, x0: np.ndarray, cfg: Optional[AlmConfig] = None,
              state: Optional[AlmState] = None) -> SolveReport:
    """Run the full outer/inner loop from a (possibly warm) start."""
    cfg = cfg or AlmConfig()
    x = np.asarray(x0, dtype=float).copy()
    ev = problem.evaluate(x)
    if state is None:
        scale = getattr(problem, "penalty_scale", None)
        sh, sg = scale() if callable(scale) else (None, None)
        state = AlmState.fresh(len(ev.h), len(ev.g), cfg.rho0, sh, sg)

    history = []
    total_inner = 0
    prev_viol = np.inf
    grad_inf = np.inf
    converged = False
    outer = 0
    stalled = 0
    x_prev = None
    tol_cur = cfg.inner_tol0
    for outer in range(1, cfg.max_outer + 1):
        cell = {}

        def fun(xv):
            e = problem.evaluate(xv)
            cell["ev"] = e
            cell["x"] = np.array(xv, copy=True)
            return augmented_objective(e, state)

        tol_k = max(cfg.eps_opt, tol_cur)
        res = lbfgs_minimize(fun, x, grad_tol=tol_k, max_iter=cfg.max_inner,
                             memory=cfg.memory, c1=cfg.c1, c2=cfg.c2,
                             max_bisect=cfg.max_bisect)
        total_inner += res.iterations
        x = res.x
        ev = cell.get("ev")
        if ev is None or not np.array_equal(cell["x"], x):
            ev = problem.evaluate(x)
        # the kept iterate may not be the last evaluated point
        _, grad = augmented_objective(ev, state)
        grad_inf = float(np.max(np.abs(grad))) if len(grad) else 0.0
        viol = ev.max_violation()
        row = {
            "outer": outer,
            "rho": state.rho,
            "objective": ev.J,
            "violation": viol,
            "grad_inf": grad_inf,
            "inner_iterations": res.iterations,
            "inner_warning": res.warning,
        }
        report = (ev.extra or {}).get("report")
        if report is not None:
            row["families"] = {name: st.max_violation
                               for name, st in report.families.items()}
        history.append(row)
        if viol <= cfg.eps_feas and grad_inf <= cfg.eps_opt:
            converged = True
            break
        # a frozen primal point makes further dual pumping pure poison:
        # the same residuals get re-added to the multipliers every outer
        # while x cannot move, so stop after two no-op outers
        if x_prev is not None and np.array_equal(x, x_prev):
            stalled += 1
            if stalled >= 2:
                break
        else:
            stalled = 0
        x_prev = x.copy()
        # a far-from-feasible unconverged subproblem says nothing about the
        # duals or the penalty weight: updating from its iterate only
        # destabilises the next solve, so carry the warm x forward and retry.
        # A primal-feasible iterate is different even when stationarity was
        # missed: the first-order dual step is bounded by rho * eps_feas and
        # polishes the multiplier balance that the inner cannot resolve on
        # its own once the penalty surface is stiff.
        if res.converged or viol <= cfg.eps_feas:
            state = update_duals(state, ev.h, ev.g, prev_viol, cfg)
            prev_viol = viol
        if res.converged:
            tol_cur = max(cfg.eps_opt, cfg.inner_shrink * tol_cur)

    return SolveReport(x, converged, outer, total_inner, grad_inf,
                       ev.max_violation(), state, ev, history)
