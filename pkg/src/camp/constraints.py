"""Constraint and objective assembly over sampled trajectory nodes.

The decision variables are waypoint columns q (one 2-D block per agent)
and log durations tau. Each evaluation solves the minimum-jerk
interpolant, samples every segment at kappa midpoints, and evaluates the
residual families on the sampled states:

equalities   boundary (masked waypoint pins), dynamics (objects cannot
             accelerate without contact), contact complementarity
             (relative speed times contact force), and a motion gate
             (objects move only while touched);
inequalities robot/static clearance through the distance field, object/
             static clearance, pairwise non-penetration, velocity and
             acceleration bounds, complementarity non-negativity, and
             axis alignment for cube objects.

Gradients never materialize Jacobians: every family records sparse
pulls on node values, and a backprop closure folds penalty weights
through those records and the trajectory adjoint in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from camp.contact import GAP_TOL, AgentModel
from camp.frontend import Scenario
from camp.geometry import (
    Esdf,
    build_esdf,
    disc_disc_gap_batch,
    disc_polygon_gap_batch,
)
from camp.solver import ProblemEval
from camp.trajgen import (
    BoundaryCondition,
    DecisionVariables,
    basis_rows,
    energy_cost,
    minco_solve,
    propagate_gradient,
)

MODES = ("contact_aware", "avoidance")

# log-duration trust region: outside it the interpolation system is
# numerically hopeless, so evaluation returns an infinite objective and
# the line search backtracks
TAU_MIN = -6.0
TAU_MAX = 9.0


@dataclass(eq=False)
class BoundarySpec:
    """Element-wise waypoint pins: residual = q - b wherever mask is 1."""

    A: np.ndarray  # (s, M+1) entries in {0, 1}
    b: np.ndarray  # (s, M+1) desired values, finite where masked

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.A.shape != self.b.shape:
            raise ValueError("mask and target shapes differ")
        if not np.all((self.A == 0.0) | (self.A == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        if not np.all(np.isfinite(self.b[self.A == 1.0])):
            raise ValueError("masked targets must be finite")

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.A.ravel() == 1.0)


def make_boundary(scenario: Scenario, mode: str, num_segments: int) -> BoundarySpec:
    """Start pins for every agent; goal pins for the robot and, in RAMO,
    for each object with a target. NAMO object finals stay free."""
    n_obj = len(scenario.movables) if mode == "contact_aware" else 0
    s = 2 * (1 + n_obj)
    A = np.zeros((s, num_segments + 1))
    b = np.zeros((s, num_segments + 1))
    A[0:2, 0] = 1.0
    b[0:2, 0] = scenario.robot_start
    A[0:2, -1] = 1.0
    b[0:2, -1] = scenario.robot_goal
    for j in range(n_obj):
        d = slice(2 + 2 * j, 4 + 2 * j)
        A[d, 0] = 1.0
        b[d, 0] = scenario.movables[j].start
        target = scenario.movables[j].target
        if target is not None:
            A[d, -1] = 1.0
            b[d, -1] = target
    return BoundarySpec(A, b)


@dataclass
class ProgramConfig:
    kappa: int = 16  # samples per segment
    v_max: float = 1.0
    a_max: float = 2.0
    alpha: float = 0.1  # total-time weight in the objective
    beta: float = 0.0  # task-loss weight
    weights: float = 1.0  # control-effort weight (scalar or per-dim)
    eps_smooth: float = 1e-4  # norm smoothing in complementarity factors
    gap_tol: float = GAP_TOL
    gate_band: float = 0.05  # m, fade-in width of the contact gate above gap_tol
    clearance: float = 0.0  # extra margin against statics
    d_clear: float = 0.5  # task loss: desired object-path clearance
    sigma: float = 0.01  # task loss: softmin temperature
    seg_max: float = 2.5  # s, per-segment duration cap (0 disables)
    # diagonal penalty metric W: families whose rows chain through spline
    # accelerations or the gate slope carry Jacobians an order of magnitude
    # steeper than the metric collision rows, so one scalar penalty cannot
    # serve them all; these weights equalise the curvature without touching
    # the reported residual values or the feasibility tolerances
    penalty_weights: dict = field(default_factory=lambda: {
        "dynamics": 0.025,
        "motion_gate": 0.25,
        "comp_product": 0.25,
        "comp_nonneg": 0.1,
    })

    def __post_init__(self):
        if self.kappa < 4:
            raise ValueError("kappa must be at least 4")
        if self.v_max <= 0 or self.a_max <= 0:
            raise ValueError("state limits must be positive")


def smooth_norm(vecs: np.ndarray, eps: float):
    """sqrt(|v|^2 + eps^2) - eps along the last axis, and d(norm)/dv."""
    root = np.sqrt(np.sum(vecs * vecs, axis=-1) + eps * eps)
    return root - eps, vecs / root[..., None]


def smooth_abs(z: np.ndarray, eps: float):
    root = np.sqrt(z * z + eps * eps)
    return root - eps, z / root


def smooth_plus(z: np.ndarray, eps: float):
    """C1 positive part: 0.5 (z + sqrt(z^2 + eps^2)), and its derivative."""
    root = np.sqrt(z * z + eps * eps)
    return 0.5 * (z + root), 0.5 * (1.0 + z / root)


def smooth_gate(z: np.ndarray, lo: float, band: float):
    """C1 ramp from 0 (z <= lo) to 1 (z >= lo + band), cubic in between.

    Gates the no-free-acceleration residual on the contact gap; a hard
    on/off switch there makes the penalty jump under the line search."""
    u = np.clip((z - lo) / band, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u) / band


# ---------------------------------------------------------------------------
# node sampling


@dataclass(eq=False)
class NodeSet:
    """Midpoint samples of every segment: kappa per segment, in time order."""

    times: np.ndarray  # (n,) absolute sample times
    segment: np.ndarray  # (n,) owning segment index
    weight: np.ndarray  # (n,) rectangle-rule quadrature weight T_m / kappa
    values: dict  # derivative order -> (s, n) sampled states


def _node_basis(durations: np.ndarray, kappa: int, orders=(0, 1, 2, 3)):
    frac = (np.arange(kappa) + 0.5) / kappa
    us = durations[:, None] * frac[None, :]  # (M, kappa) local times
    flat = us.ravel()
    B = {d: basis_rows(flat, d).reshape(len(durations), kappa, 6) for d in orders}
    return frac, us, B


def sample_nodes(traj, kappa: int, orders=(0, 1, 2, 3)) -> NodeSet:
    if kappa < 4:
        raise ValueError("kappa must be at least 4")
    durations = traj.durations
    m = len(durations)
    frac, us, B = _node_basis(durations, kappa, orders)
    values = {d: np.einsum("smc,mkc->smk", traj.coeffs, B[d]).reshape(
        traj.coeffs.shape[0], m * kappa) for d in orders}
    times = (traj.knots[:m, None] + us).ravel()
    segment = np.repeat(np.arange(m), kappa)
    weight = np.repeat(durations / kappa, kappa)
    return NodeSet(times, segment, weight, values)


# ---------------------------------------------------------------------------
# residual report


@dataclass
class FamilyStats:
    kind: str  # "eq" | "ineq"
    max_violation: float
    mean_violation: float
    count: int
    argmax_time: Optional[float]  # node time of the worst row, None if not nodal


@dataclass(eq=False)
class ResidualReport:
    families: dict  # name -> FamilyStats
    h: np.ndarray
    g: np.ndarray

    def max_violation(self) -> float:
        worst = 0.0
        for st in self.families.values():
            worst = max(worst, st.max_violation)
        return worst

    def to_json_dict(self) -> dict:
        return {
            name: {
                "kind": st.kind,
                "max": st.max_violation,
                "mean": st.mean_violation,
                "count": st.count,
                "argmax_time": st.argmax_time,
            }
            for name, st in self.families.items()
        }


def _family_stats(kind, values, times):
    viol = np.abs(values) if kind == "eq" else np.maximum(values, 0.0)
    if len(viol) == 0:
        return FamilyStats(kind, 0.0, 0.0, 0, None)
    i = int(np.argmax(viol))
    t = None if times is None else float(times[i])
    return FamilyStats(kind, float(viol[i]), float(np.mean(viol)), len(viol), t)


# ---------------------------------------------------------------------------
# the assembled program


@dataclass(eq=False)
class _Movable:
    model: AgentModel
    dims: slice  # rows of q owned by this object (contact_aware only)
    is_disc: bool
    radius: float  # bounding radius (disc radius / half-diagonal)
    inscribed: float  # inscribed radius for static clearance
    local_vertices: Optional[np.ndarray]
    parked: np.ndarray  # start position, the fixed pose in avoidance mode


class TrajectoryProgram:
    """Everything the ALM solver needs for one scenario and mode.

    evaluate() matches the solver's problem protocol; assemble() returns
    the spec-level triple (objective, gradient, report).
    """

    def __init__(self, scenario: Scenario, mode: str = "contact_aware",
                 config: Optional[ProgramConfig] = None, num_segments: Optional[int] = None,
                 boundary: Optional[BoundarySpec] = None, esdf: Optional[Esdf] = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if boundary is None and num_segments is None:
            raise ValueError("need num_segments or an explicit boundary spec")
        self.scenario = scenario
        self.mode = mode
        self.cfg = config or ProgramConfig()
        self.esdf = esdf if esdf is not None else build_esdf(
            scenario.grid, treat_movable_as="free")
        n_obj = len(scenario.movables)
        self.num_agents = 1 + n_obj if mode == "contact_aware" else 1
        self.s = 2 * self.num_agents
        self.boundary = boundary if boundary is not None else make_boundary(
            scenario, mode, num_segments)
        if self.boundary.A.shape[0] != self.s:
            raise ValueError("boundary spec rows do not match the agent stack")
        self.num_segments = self.boundary.A.shape[1] - 1
        self.bc = BoundaryCondition.rest(self.s)
        self.movables = []
        for j, mov in enumerate(scenario.movables):
            shape = mov.model.shape
            is_disc = shape.kind == "disc"
            dims = slice(2 + 2 * j, 4 + 2 * j) if mode == "contact_aware" else slice(0, 0)
            self.movables.append(_Movable(
                model=mov.model,
                dims=dims,
                is_disc=is_disc,
                radius=shape.bounding_radius(),
                inscribed=mov.model.effective_radius(),
                local_vertices=None if is_disc else np.array(shape.vertices),
                parked=np.asarray(mov.start, dtype=float),
            ))
        # per-agent limits, broadcast from the scalar config values
        self.v_max = np.full(self.num_agents, self.cfg.v_max)
        self.a_max = np.full(self.num_agents, self.cfg.a_max)
        self._hg_sizes: Optional[tuple] = None
        self._h_layout: Optional[list] = None  # [(family, row count)] stacked
        self._g_layout: Optional[list] = None

    # -- helpers ------------------------------------------------------------

    def unpack(self, vec: np.ndarray) -> DecisionVariables:
        return DecisionVariables.unpack(vec, self.s, self.num_segments)

    def penalty_scale(self):
        """Per-row penalty weights (diagonal W) in stacking order.

        Available after the first evaluation; families absent from
        cfg.penalty_weights keep weight 1."""
        if self._h_layout is None:
            return None, None
        pw = self.cfg.penalty_weights

        def build(layout):
            parts = [np.full(count, pw.get(name, 1.0)) for name, count in layout]
            return np.concatenate(parts) if parts else np.zeros(0)

        return build(self._h_layout), build(self._g_layout)

    def _agent_dims(self, a: int) -> slice:
        return slice(2 * a, 2 * a + 2)

    # -- evaluation ---------------------------------------------------------

    def _barrier_eval(self, vec: np.ndarray) -> ProblemEval:
        if self._hg_sizes is None:
            raise FloatingPointError("initial decision variables out of range")
        nh, ng = self._hg_sizes
        n = len(vec)
        return ProblemEval(np.inf, np.zeros(n), np.zeros(nh), np.zeros(ng),
                           lambda w_h, w_g: np.zeros(n), None,
                           extra={"report": None, "trajectory": None,
                                  "times": None})

    def evaluate(self, vec: np.ndarray) -> ProblemEval:
        vec = np.asarray(vec, dtype=float)
        tau = vec[len(vec) - self.num_segments:]
        if (not np.all(np.isfinite(vec)) or np.any(tau < TAU_MIN)
                or np.any(tau > TAU_MAX)):
            return self._barrier_eval(vec)
        x = self.unpack(vec)
        cfg = self.cfg
        eps = cfg.eps_smooth
        s, M, kappa = self.s, self.num_segments, cfg.kappa
        Mk = M * kappa
        T = x.durations
        traj = minco_solve(x, self.bc)
        frac, us, B = _node_basis(T, kappa)
        vals = {d: np.einsum("smc,mkc->smk", traj.coeffs, B[d]) for d in range(4)}
        flat = {d: vals[d].reshape(s, Mk) for d in range(4)}
        times = (traj.knots[:M, None] + us).ravel()

        P, V, Acc = flat[0], flat[1], flat[2]
        rpos = P[0:2].T  # (Mk, 2)
        rvel = V[0:2].T
        r_robot = self.scenario.robot.effective_radius()

        h_parts, g_parts = [], []  # (name, values, times, records)
        sig: list[np.ndarray] = []

        # ---- boundary -----------------------------------------------------
        idx = self.boundary.masked_indices
        rb = x.q.ravel()[idx] - self.boundary.b.ravel()[idx]
        h_parts.append(("boundary", rb, None,
                        [("q", idx, np.ones(len(idx)), np.arange(len(idx)))]))

        # ---- per-object contact data --------------------------------------
        contacts = []
        for mv in self.movables:
            if self.mode == "contact_aware":
                opos = P[mv.dims].T
            else:
                opos = np.broadcast_to(mv.parked, (Mk, 2))
            if mv.is_disc:
                gap, grad_r = disc_disc_gap_batch(
                    rpos, r_robot, opos, mv.radius)
                feature = None
            else:
                gap, grad_r, feature = disc_polygon_gap_batch(
                    rpos, r_robot, opos, mv.local_vertices)
            active = gap <= cfg.gap_tol
            contacts.append((gap, grad_r, active, feature))
            if feature is not None:
                sig.append(feature.astype(np.int8))

        # ---- collision: robot vs statics ----------------------------------
        es = self.esdf.query_c1(rpos)
        g_rs = r_robot + cfg.clearance - es.distance
        rec = _node_pull(0, (0, 1), -es.gradient, Mk)
        g_parts.append(("collision_robot_static", g_rs, times, rec))
        sig.append(es.out_of_bounds.astype(np.uint8))

        # ---- collision: objects vs statics (contact_aware only) -----------
        if self.mode == "contact_aware":
            vals_os, recs_os = [], []
            row0 = 0
            for mv in self.movables:
                opos = P[mv.dims].T
                dims = (mv.dims.start, mv.dims.start + 1)
                if mv.is_disc:
                    e = self.esdf.query_c1(opos)
                    vals_os.append(mv.radius + cfg.clearance - e.distance)
                    recs_os += _node_pull(0, dims, -e.gradient, Mk, row0)
                    row0 += Mk
                else:
                    # inscribed-disc row carries penetration depth (vertex
                    # rows are vacuous once distance hits zero inside walls)
                    e = self.esdf.query_c1(opos)
                    vals_os.append(mv.inscribed + cfg.clearance - e.distance)
                    recs_os += _node_pull(0, dims, -e.gradient, Mk, row0)
                    row0 += Mk
                    for vloc in mv.local_vertices:
                        ev = self.esdf.query_c1(opos + vloc)
                        vals_os.append(cfg.clearance - ev.distance)
                        recs_os += _node_pull(0, dims, -ev.gradient, Mk, row0)
                        row0 += Mk
            g_parts.append(("collision_object_static",
                            _cat(vals_os), _tile_times(times, len(vals_os)), recs_os))

        # ---- collision: agent pairs ---------------------------------------
        vals_pp, recs_pp = [], []
        row0 = 0
        for j, (mv, (gap, grad_r, active, feature)) in enumerate(
                zip(self.movables, contacts)):
            # robot vs object: gap >= 0, touching allowed
            vals_pp.append(-gap)
            recs_pp += _node_pull(0, (0, 1), -grad_r, Mk, row0)
            if self.mode == "contact_aware":
                dims = (mv.dims.start, mv.dims.start + 1)
                recs_pp += _node_pull(0, dims, grad_r, Mk, row0)
            row0 += Mk
        if self.mode == "contact_aware":
            for a in range(len(self.movables)):
                for bidx in range(a + 1, len(self.movables)):
                    ma, mb = self.movables[a], self.movables[bidx]
                    pa, pb = P[ma.dims].T, P[mb.dims].T
                    gap_ab, grad_a, feat_ab = _pair_gap(ma, pa, mb, pb)
                    vals_pp.append(-gap_ab)
                    da = (ma.dims.start, ma.dims.start + 1)
                    db = (mb.dims.start, mb.dims.start + 1)
                    recs_pp += _node_pull(0, da, -grad_a, Mk, row0)
                    recs_pp += _node_pull(0, db, grad_a, Mk, row0)
                    if feat_ab is not None:
                        sig.append(feat_ab.astype(np.int8))
                    row0 += Mk
        g_parts.append(("collision_pairs", _cat(vals_pp),
                        _tile_times(times, len(vals_pp)), recs_pp))

        # ---- state bounds --------------------------------------------------
        vals_v, vals_a, recs_v, recs_a = [], [], [], []
        row0 = 0
        for a in range(self.num_agents):
            d = self._agent_dims(a)
            va = V[d].T
            aa = Acc[d].T
            vals_v.append(np.sum(va * va, axis=1) - self.v_max[a] ** 2)
            vals_a.append(np.sum(aa * aa, axis=1) - self.a_max[a] ** 2)
            dims = (d.start, d.start + 1)
            recs_v += _node_pull(1, dims, 2 * va, Mk, row0)
            recs_a += _node_pull(2, dims, 2 * aa, Mk, row0)
            row0 += Mk
        g_parts.append(("vel_bound", _cat(vals_v),
                        _tile_times(times, self.num_agents), recs_v))
        g_parts.append(("acc_bound", _cat(vals_a),
                        _tile_times(times, self.num_agents), recs_a))

        # ---- segment duration cap -------------------------------------------
        # keeps node spacing bounded so no violation can hide between samples
        if cfg.seg_max:
            g_parts.append(("duration_bound", tau - np.log(cfg.seg_max), None,
                            [("tau", np.arange(M), np.ones(M), np.arange(M))]))

        # ---- contact families (contact_aware only) -------------------------
        if self.mode == "contact_aware" and self.movables:
            h_dyn, recs_dyn = [], []
            h_cp, recs_cp = [], []
            h_mg, recs_mg = [], []
            g_nn, recs_nn = [], []
            row_dyn = row_cp = row_mg = row_nn = 0
            for mv, (gap, grad_r, active, feature) in zip(self.movables, contacts):
                dims = (mv.dims.start, mv.dims.start + 1)
                ovel = V[mv.dims].T  # (Mk, 2)
                oacc = Acc[mv.dims].T
                mass = mv.model.mass
                wg, dwg = smooth_gate(gap, cfg.gap_tol, cfg.gate_band)

                # dynamics: objects cannot accelerate without contact
                h_dyn.append((mass * wg[:, None] * oacc).ravel())
                recs_dyn += _node_pull_xy(2, dims, mass * wg, Mk, row_dyn)
                # the gate itself moves with both bodies through the gap
                cols = np.arange(Mk)
                for axis in (0, 1):
                    cg = (mass * oacc[:, axis] * dwg)[:, None] * grad_r
                    rows = row_dyn + 2 * cols + axis
                    recs_dyn += _node_pull_at(0, (0, 1), cg, cols, rows)
                    recs_dyn += _node_pull_at(0, dims, -cg, cols, rows)
                row_dyn += 2 * Mk

                # complementarity product: relative speed times force
                vrel = rvel - ovel
                fC = (1.0 - wg)[:, None] * mass * oacc
                n_v, dn_v = smooth_norm(vrel, eps)
                n_f, dn_f = smooth_norm(fC, eps)
                h_cp.append(n_v * n_f)
                recs_cp += _node_pull(1, (0, 1), n_f[:, None] * dn_v, Mk, row_cp)
                recs_cp += _node_pull(1, dims, -n_f[:, None] * dn_v, Mk, row_cp)
                recs_cp += _node_pull(
                    2, dims,
                    (n_v * (1.0 - wg) * mass)[:, None] * dn_f, Mk, row_cp)
                cgf = (-n_v * dwg * mass
                       * np.sum(dn_f * oacc, axis=1))[:, None] * grad_r
                recs_cp += _node_pull(0, (0, 1), cgf, Mk, row_cp)
                recs_cp += _node_pull(0, dims, -cgf, Mk, row_cp)
                row_cp += Mk

                # motion gate: positive gap times object speed
                sp, dsp = smooth_plus(gap, eps)
                n_vo, dn_vo = smooth_norm(ovel, eps)
                h_mg.append(sp * n_vo)
                recs_mg += _node_pull(0, (0, 1),
                                      (dsp * n_vo)[:, None] * grad_r, Mk, row_mg)
                recs_mg += _node_pull(0, dims,
                                      -(dsp * n_vo)[:, None] * grad_r, Mk, row_mg)
                recs_mg += _node_pull(1, dims, sp[:, None] * dn_vo, Mk, row_mg)
                row_mg += Mk

                # non-negativity of both complementarity factors
                g_nn.append(-n_v)
                recs_nn += _node_pull(1, (0, 1), -dn_v, Mk, row_nn)
                recs_nn += _node_pull(1, dims, dn_v, Mk, row_nn)
                row_nn += Mk
                g_nn.append(-n_f)
                recs_nn += _node_pull(
                    2, dims, -((1.0 - wg) * mass)[:, None] * dn_f, Mk, row_nn)
                cgn = (dwg * mass * np.sum(dn_f * oacc, axis=1))[:, None] * grad_r
                recs_nn += _node_pull(0, (0, 1), cgn, Mk, row_nn)
                recs_nn += _node_pull(0, dims, -cgn, Mk, row_nn)
                row_nn += Mk

            h_parts.append(("dynamics", _cat(h_dyn),
                            _tile_times(np.repeat(times, 2), len(self.movables)),
                            recs_dyn))
            h_parts.append(("comp_product", _cat(h_cp),
                            _tile_times(times, len(self.movables)), recs_cp))
            h_parts.append(("motion_gate", _cat(h_mg),
                            _tile_times(times, len(self.movables)), recs_mg))
            g_parts.append(("comp_nonneg", _cat(g_nn),
                            _tile_times(times, 2 * len(self.movables)), recs_nn))

            # axis alignment for cubes: one velocity component must vanish
            vals_ax, recs_ax, n_ax = [], [], 0
            for mv in self.movables:
                if mv.is_disc:
                    continue
                ovel = V[mv.dims].T
                ax, dax = smooth_abs(ovel[:, 0], eps)
                ay, day = smooth_abs(ovel[:, 1], eps)
                pick = (ay < ax).astype(int)  # 0 -> |vx| smaller, 1 -> |vy|
                vals_ax.append(np.where(pick == 1, ay, ax))
                coeff = np.zeros((Mk, 2))
                coeff[pick == 0, 0] = dax[pick == 0]
                coeff[pick == 1, 1] = day[pick == 1]
                dims = (mv.dims.start, mv.dims.start + 1)
                recs_ax += _node_pull(1, dims, coeff, Mk, n_ax * Mk)
                sig.append(pick.astype(np.uint8))
                n_ax += 1
            if n_ax:
                g_parts.append(("axis_alignment", _cat(vals_ax),
                                _tile_times(times, n_ax), recs_ax))

        # ---- objective ------------------------------------------------------
        w = np.full(s, float(self.cfg.weights)) if np.isscalar(self.cfg.weights) \
            else np.asarray(self.cfg.weights, dtype=float)
        energy, dE_dc, dE_dT = energy_cost(traj, w)
        J = energy + cfg.alpha * float(np.sum(T))
        GJ = [np.zeros((s, Mk)) for _ in range(3)]
        dq_J = np.zeros((s, M + 1))
        dT_extra = cfg.alpha * np.ones(M)

        if cfg.beta != 0.0 and self.mode == "contact_aware":
            K, hinge_flags = self._task_loss(x, P, GJ[0], dq_J, cfg.beta)
            J += cfg.beta * K
            sig.append(hinge_flags)

        ctx = (traj, B, vals, frac, s, M, kappa)
        gradJ = _propagate(ctx, GJ, dq_J, dE_dc, dE_dT + dT_extra, T)

        # ---- stack residuals and build the report ---------------------------
        h, g = [], []
        fam_stats = {}
        rec_h, rec_g = [], []
        off = 0
        for name, valsv, tms, recs in h_parts:
            h.append(valsv)
            fam_stats[name] = _family_stats("eq", valsv, tms)
            rec_h += [_shift(r, off) for r in recs]
            off += len(valsv)
        off = 0
        for name, valsv, tms, recs in g_parts:
            g.append(valsv)
            fam_stats[name] = _family_stats("ineq", valsv, tms)
            rec_g += [_shift(r, off) for r in recs]
            off += len(valsv)
        self._h_layout = [(name, len(v)) for name, v, _, _ in h_parts]
        self._g_layout = [(name, len(v)) for name, v, _, _ in g_parts]
        h = _cat(h)
        g = _cat(g)
        report = ResidualReport(fam_stats, h, g)

        def backprop(w_h: np.ndarray, w_g: np.ndarray) -> np.ndarray:
            G = [np.zeros((s, Mk)) for _ in range(3)]
            dq = np.zeros((s, M + 1))
            dtau = np.zeros(M)
            _apply_records(rec_h, w_h, G, dq, dtau)
            _apply_records(rec_g, w_g, G, dq, dtau)
            return _propagate(ctx, G, dq, None, None, T, dtau)

        signature = b"".join(a.tobytes() for a in sig)
        self._hg_sizes = (len(h), len(g))
        return ProblemEval(J, gradJ, h, g, backprop, signature,
                           extra={"report": report, "trajectory": traj,
                                  "times": times})

    # -- task loss ----------------------------------------------------------

    def _task_loss(self, x, P, G0, dq_direct, beta_scale):
        """Hinge on the softmin distance between each object's final
        position and the robot's sampled path. Returns (K, hinge flags)."""
        cfg = self.cfg
        rp = P[0:2]  # (2, Mk)
        K = 0.0
        flags = np.zeros(len(self.movables), dtype=np.uint8)
        for j, mv in enumerate(self.movables):
            o_fin = x.q[mv.dims, -1]
            diff = o_fin[:, None] - rp  # (2, Mk)
            dist = np.sqrt(np.sum(diff * diff, axis=0) + 1e-12)
            mmin = float(np.min(dist))
            ws = np.exp(-(dist - mmin) / cfg.sigma)
            Z = float(np.sum(ws))
            softmin = mmin - cfg.sigma * np.log(Z)
            z = cfg.d_clear - softmin
            if z <= 0.0:
                continue
            flags[j] = 1
            K += z * z
            wsoft = ws / Z  # d softmin / d dist_t
            coef = -2.0 * z * wsoft  # dK / d dist_t
            unit = diff / dist[None, :]
            G0[0:2] += beta_scale * coef[None, :] * (-unit)
            dq_direct[mv.dims, -1] += beta_scale * np.sum(coef[None, :] * unit, axis=1)
        return K, flags

    # -- spec-level wrapper ---------------------------------------------------

    def assemble(self, x: DecisionVariables):
        ev = self.evaluate(x.pack())
        return ev.J, ev.gradJ, ev.extra["report"]


def assemble(x: DecisionVariables, scenario: Scenario, mode: str = "contact_aware",
             config: Optional[ProgramConfig] = None):
    """One-shot objective/gradient/report for a decision-variable guess."""
    program = TrajectoryProgram(scenario, mode, config,
                                num_segments=x.num_segments)
    return program.assemble(x)


# ---------------------------------------------------------------------------
# record plumbing: sparse pulls on node values and direct q entries


def _node_pull(order, dims, coeff, Mk, row0=0):
    """One record: rows row0..row0+Mk pull coeff[:, i] on dim dims[i]."""
    cols = np.arange(Mk)
    widx = row0 + cols
    return [("node", order,
             np.concatenate([np.full(Mk, dims[0]), np.full(Mk, dims[1])]),
             np.concatenate([cols, cols]),
             np.concatenate([coeff[:, 0], coeff[:, 1]]),
             np.concatenate([widx, widx]))]


def _node_pull_xy(order, dims, coeff, Mk, row0=0):
    """Two rows per node (x then y), each pulling its own axis."""
    cols = np.arange(Mk)
    return [("node", order,
             np.concatenate([np.full(Mk, dims[0]), np.full(Mk, dims[1])]),
             np.concatenate([cols, cols]),
             np.concatenate([coeff, coeff]),
             np.concatenate([row0 + 2 * cols, row0 + 2 * cols + 1]))]


def _node_pull_at(order, dims, coeff, cols, rows):
    """Explicit (row, node) pairs pulling coeff[:, i] on dim dims[i]."""
    n = len(cols)
    return [("node", order,
             np.concatenate([np.full(n, dims[0]), np.full(n, dims[1])]),
             np.concatenate([cols, cols]),
             np.concatenate([coeff[:, 0], coeff[:, 1]]),
             np.concatenate([rows, rows]))]


def _shift(rec, off):
    kind = rec[0]
    if kind == "node":
        _, d, dims, cols, coeff, widx = rec
        return ("node", d, dims, cols, coeff, widx + off)
    _, idx, coeff, widx = rec
    return (kind, idx, coeff, widx + off)


def _apply_records(records, wvec, G, dq, dtau):
    for rec in records:
        if rec[0] == "node":
            _, d, dims, cols, coeff, widx = rec
            np.add.at(G[d], (dims, cols), wvec[widx] * coeff)
        elif rec[0] == "q":
            _, idx, coeff, widx = rec
            np.add.at(dq.ravel(), idx, wvec[widx] * coeff)
        else:
            _, idx, coeff, widx = rec
            np.add.at(dtau, idx, wvec[widx] * coeff)


def _propagate(ctx, G, dq_direct, extra_dc, extra_dT, T, dtau_direct=None):
    """Node-value gradients -> (q, tau) gradient through the interpolant."""
    traj, B, vals, frac, s, M, kappa = ctx
    dcoeffs = np.zeros((s, M, 6))
    ddur = np.zeros(M)
    for d in range(3):
        Gd = G[d].reshape(s, M, kappa)
        if not Gd.any():
            continue
        dcoeffs += np.einsum("smk,mkc->smc", Gd, B[d])
        ddur += np.einsum("smk,smk,k->m", Gd, vals[d + 1], frac)
    if extra_dc is not None:
        dcoeffs += extra_dc
    if extra_dT is not None:
        ddur += extra_dT
    dq, dtau = propagate_gradient(traj, dcoeffs, ddur)
    dq += dq_direct
    if dtau_direct is not None:
        dtau = dtau + dtau_direct
    return np.concatenate([dq.ravel(), dtau])


def _pair_gap(ma, pa, mb, pb):
    """Batched signed gap between two movable objects (disc/disc fast path,
    disc/polygon either orientation, polygon/polygon scalar fallback)."""
    if ma.is_disc and mb.is_disc:
        gap, grad_a = disc_disc_gap_batch(pa, ma.radius, pb, mb.radius)
        return gap, grad_a, None
    if ma.is_disc:
        gap, grad_a, feat = disc_polygon_gap_batch(pa, ma.radius, pb, mb.local_vertices)
        return gap, grad_a, feat
    if mb.is_disc:
        gap, grad_b, feat = disc_polygon_gap_batch(pb, mb.radius, pa, ma.local_vertices)
        return gap, -grad_b, feat
    from camp.geometry import gjk_distance
    n = len(pa)
    gap = np.zeros(n)
    grad_a = np.zeros((n, 2))
    for i in range(n):
        res = gjk_distance(ma.model.shape.at(pa[i]), mb.model.shape.at(pb[i]))
        gap[i] = res.distance
        grad_a[i] = res.normal
    return gap, grad_a, None


def _cat(parts):
    parts = [p for p in parts if len(p)]
    return np.concatenate(parts) if parts else np.zeros(0)


def _tile_times(times, copies):
    if copies == 0:
        return np.zeros(0)
    return np.tile(times, copies)


# ---------------------------------------------------------------------------
# spec-level evaluators (thin wrappers used by tests and validation)


def eval_boundary(x: DecisionVariables, spec: BoundarySpec) -> np.ndarray:
    idx = spec.masked_indices
    return x.q.ravel()[idx] - spec.b.ravel()[idx]


def eval_state_bounds(nodes: NodeSet, v_max, a_max) -> np.ndarray:
    """Stacked squared-norm bounds, velocity rows then acceleration rows."""
    s = nodes.values[1].shape[0]
    v_max = np.broadcast_to(np.asarray(v_max, dtype=float), (s // 2,))
    a_max = np.broadcast_to(np.asarray(a_max, dtype=float), (s // 2,))
    out_v, out_a = [], []
    for a in range(s // 2):
        d = slice(2 * a, 2 * a + 2)
        out_v.append(np.sum(nodes.values[1][d] ** 2, axis=0) - v_max[a] ** 2)
        out_a.append(np.sum(nodes.values[2][d] ** 2, axis=0) - a_max[a] ** 2)
    return np.concatenate(out_v + out_a)


def eval_dynamics(nodes: NodeSet, active_masks, models) -> np.ndarray:
    """Per object, per node, per axis: mass * acc gated off while touched."""
    rows = []
    for j, model in enumerate(models):
        d = slice(2 + 2 * j, 4 + 2 * j)
        oacc = nodes.values[2][d].T
        gate = 1.0 - np.asarray(active_masks[j], dtype=float)
        rows.append((model.mass * gate[:, None] * oacc).ravel())
    return _cat(rows)


def eval_complementarity(nodes: NodeSet, gaps, active_masks, models,
                         eps: float = 1e-4):
    """Returns (inequality rows, equality rows) per robot-object pair."""
    rvel = nodes.values[1][0:2].T
    g_rows, h_rows = [], []
    for j, model in enumerate(models):
        d = slice(2 + 2 * j, 4 + 2 * j)
        ovel = nodes.values[1][d].T
        oacc = nodes.values[2][d].T
        active = np.asarray(active_masks[j], dtype=float)
        fC = active[:, None] * model.mass * oacc
        n_v, _ = smooth_norm(rvel - ovel, eps)
        n_f, _ = smooth_norm(fC, eps)
        n_vo, _ = smooth_norm(ovel, eps)
        sp, _ = smooth_plus(np.asarray(gaps[j]), eps)
        g_rows += [-n_v, -n_f]
        h_rows += [n_v * n_f, sp * n_vo]
    return _cat(g_rows), _cat(h_rows)


def eval_collision(nodes: NodeSet, scenario: Scenario, mode: str,
                   esdf: Optional[Esdf] = None,
                   config: Optional[ProgramConfig] = None) -> np.ndarray:
    """Stacked collision inequalities at the given nodes (values only)."""
    cfg = config or ProgramConfig()
    es = esdf if esdf is not None else build_esdf(scenario.grid,
                                                  treat_movable_as="free")
    r_robot = scenario.robot.effective_radius()
    P = nodes.values[0]
    Mk = P.shape[1]
    rpos = P[0:2].T
    rows = [r_robot + cfg.clearance - es.query_c1(rpos).distance]
    movs = []
    for j, mov in enumerate(scenario.movables):
        shape = mov.model.shape
        is_disc = shape.kind == "disc"
        movs.append(_Movable(mov.model,
                             slice(2 + 2 * j, 4 + 2 * j), is_disc,
                             shape.bounding_radius(), mov.model.effective_radius(),
                             None if is_disc else np.array(shape.vertices),
                             np.asarray(mov.start, dtype=float)))
    if mode == "contact_aware":
        for mv in movs:
            opos = P[mv.dims].T
            rows.append(mv.inscribed + cfg.clearance - es.query_c1(opos).distance)
            if not mv.is_disc:
                for vloc in mv.local_vertices:
                    rows.append(cfg.clearance - es.query_c1(opos + vloc).distance)
    for mv in movs:
        opos = P[mv.dims].T if mode == "contact_aware" else \
            np.broadcast_to(mv.parked, (Mk, 2))
        if mv.is_disc:
            gap, _ = disc_disc_gap_batch(rpos, r_robot, opos, mv.radius)
        else:
            gap, _, _ = disc_polygon_gap_batch(rpos, r_robot, opos,
                                               mv.local_vertices)
        rows.append(-gap)
    if mode == "contact_aware":
        for a in range(len(movs)):
            for b in range(a + 1, len(movs)):
                pa, pb = P[movs[a].dims].T, P[movs[b].dims].T
                gap, _, _ = _pair_gap(movs[a], pa, movs[b], pb)
                rows.append(-gap)
    return _cat(rows)


def eval_task_loss(traj, x: DecisionVariables, scenario: Scenario, beta: float,
                   config: Optional[ProgramConfig] = None):
    """Task loss K and its gradient over packed (q, tau)."""
    cfg = config or ProgramConfig()
    n = x.pack().shape[0]
    if beta == 0.0:
        return 0.0, np.zeros(n)
    s, M, kappa = x.num_dims, x.num_segments, cfg.kappa
    program = TrajectoryProgram.__new__(TrajectoryProgram)
    program.cfg = cfg
    program.movables = []
    for j, mov in enumerate(scenario.movables):
        shape = mov.model.shape
        program.movables.append(_Movable(
            mov.model, slice(2 + 2 * j, 4 + 2 * j), shape.kind == "disc",
            shape.bounding_radius(), mov.model.effective_radius(),
            None if shape.kind == "disc" else np.array(shape.vertices),
            np.asarray(mov.start, dtype=float)))
    frac, us, B = _node_basis(traj.durations, kappa)
    vals = {d: np.einsum("smc,mkc->smk", traj.coeffs, B[d]) for d in range(4)}
    P = vals[0].reshape(s, M * kappa)
    G0 = [np.zeros((s, M * kappa)) for _ in range(3)]
    dq = np.zeros((s, M + 1))
    K, _ = program._task_loss(x, P, G0[0], dq, 1.0)
    ctx = (traj, B, vals, frac, s, M, kappa)
    grad = _propagate(ctx, G0, dq, None, None, traj.durations)
    return K, grad
