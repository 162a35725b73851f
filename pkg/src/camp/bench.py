"""Randomized NAMO/RAMO benchmark harness.

Generates cluttered desk-scale maps, runs the contact-aware planner
head-to-head against a contact-avoidance baseline on the identical
scenarios, validates every returned trajectory independently of the
solver's own convergence flag, and aggregates success/timing metrics.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    FREE,
    STATIC,
    GridMap,
    build_esdf,
    disc,
    empty_grid,
    gjk_distance,
    square,
)
from .contact import AgentModel, cube_object, cylinder_object, quasi_static_rollout
from .frontend import (
    FrontendPlan,
    MovableObject,
    NoPathError,
    RobotModel,
    Scenario,
    assemble_initial,
    plan_avoidance,
    plan_namo,
    plan_ramo,
)
from .trajgen import DecisionVariables
from .constraints import ProgramConfig, TrajectoryProgram
from .solver import AlmConfig, SolveReport, alm_solve

log = logging.getLogger(__name__)

# Workspace: [-1, 7] x [-3, 3] m at 0.05 m cells, with a solid wall band
# outside (-0.5, 6.5) x (-2.5, 2.5) so the distance field is defined and
# every path stays interior.
RESOLUTION = 0.05
ORIGIN = (-1.0, -3.0)
GRID_W, GRID_H = 160, 120
INNER_LO = np.array([-0.5, -2.5])
INNER_HI = np.array([6.5, 2.5])

ROBOT_RADIUS = 0.3
CYLINDER_RADIUS = 0.3
CUBE_SIDE = 0.5
STATIC_SIDE = 0.5
OBJECT_CLEARANCE = 0.1  # m, minimum surface-to-surface gap between objects
ENDPOINT_CLEARANCE = ROBOT_RADIUS + 0.1  # m, objects keep off start/goal

ROBOT_START = np.array([0.0, 0.0])
ROBOT_GOAL = np.array([6.0, 0.0])

COLLISION_FAMILIES = ("collision_robot_static", "collision_object_static",
                      "collision_pairs")
COMPLEMENTARITY_FAMILIES = ("comp_product", "comp_nonneg", "motion_gate")

SUCCESS_TOL = 1e-3  # max validation violation for the gated families
ROLLOUT_TOL = 0.15  # m, object-to-target error after quasi-static replay
VALIDATION_FACTOR = 10  # validation samples per segment = factor * kappa


# ---------------------------------------------------------------------------
# configuration and result records


@dataclass
class BenchmarkConfig:
    """One suite: which task sets to generate and how to solve them."""

    family: str = "namo"  # "namo" | "ramo"
    m_values: tuple = (1, 2, 3, 4, 5, 6, 7)  # NAMO: movable counts
    shape_classes: tuple = ("cylinder", "cube")  # RAMO: object shapes
    maps_per_set: int = 10
    seed: int = 0
    modes: tuple = ("camp", "avoidance")
    program: ProgramConfig = field(default_factory=ProgramConfig)
    solver: AlmConfig = field(default_factory=lambda: AlmConfig(rho0=100.0))
    spacing: float = 1.0  # m, waypoint spacing for the front-end downsample

    def __post_init__(self):
        if self.family not in ("namo", "ramo"):
            raise ValueError("family must be 'namo' or 'ramo'")
        if self.maps_per_set < 0:
            raise ValueError("maps_per_set must be nonnegative")

    def set_labels(self) -> list:
        if self.family == "namo":
            return [f"S{8 - m}M{m}" for m in self.m_values]
        return [f"RAMO-{s}" for s in self.shape_classes]


@dataclass
class MetricsRow:
    """One Table row: timing stats and success rate for a (set, mode) pair."""

    task_id: str
    mode: str
    frontend_min_ms: float
    frontend_max_ms: float
    frontend_mean_ms: float
    frontend_std_ms: float
    backend_min_s: float
    backend_max_s: float
    backend_mean_s: float
    backend_std_s: float
    success_pct: float


@dataclass
class FeasibilityReport:
    """Independent validation verdict for one run.

    Success is an artifact definition (the metric itself, not a solver
    flag): the solver must report convergence AND resampling the returned
    trajectory at a 10x denser grid must show collision violations within
    1e-3; contact-aware runs must additionally keep complementarity
    violations within 1e-3, and RAMO runs must place the object within
    0.15 m of its target under a quasi-static replay of the robot path.
    """

    family_max: dict
    collision_max: float
    complementarity_max: float
    rollout_error: Optional[float]
    success: bool
    failure_reason: str  # "" when success


# ---------------------------------------------------------------------------
# scenario generation


def _workspace_grid() -> GridMap:
    grid = empty_grid(RESOLUTION, ORIGIN, GRID_W, GRID_H)
    xs = ORIGIN[0] + (np.arange(GRID_W) + 0.5) * RESOLUTION
    ys = ORIGIN[1] + (np.arange(GRID_H) + 0.5) * RESOLUTION
    outside = ((xs[None, :] < INNER_LO[0]) | (xs[None, :] > INNER_HI[0])
               | (ys[:, None] < INNER_LO[1]) | (ys[:, None] > INNER_HI[1]))
    grid.cells[outside] = STATIC
    return grid


def _shape_for(kind: str, center: np.ndarray):
    if kind == "cylinder":
        return disc(center, CYLINDER_RADIUS)
    if kind == "cube":
        return square(center, CUBE_SIDE)
    return square(center, STATIC_SIDE)


def _placement_ok(shape, placed: list) -> bool:
    for other in placed:
        if gjk_distance(shape, other).distance < OBJECT_CLEARANCE:
            return False
    for endpoint in (ROBOT_START, ROBOT_GOAL):
        if gjk_distance(shape, disc(endpoint, 0.0)).distance < ENDPOINT_CLEARANCE:
            return False
    return True


def _draw_centers(rng, kinds: list, box_lo, box_hi, extra_points=(),
                  attempts_per_object: int = 200):
    """Rejection-sample one center per kind, or None if the budget runs out.

    extra_points are (point, clearance) pairs every shape must also keep
    away from (used for the RAMO target so the object can reach it)."""
    placed = []
    centers = []
    for kind in kinds:
        for _ in range(attempts_per_object):
            c = rng.uniform(box_lo, box_hi)
            shape = _shape_for(kind, c)
            if not _placement_ok(shape, placed):
                continue
            if any(gjk_distance(shape, disc(p, 0.0)).distance < clear
                   for p, clear in extra_points):
                continue
            placed.append(shape)
            centers.append(c)
            break
        else:
            return None
    return centers


def _with_subseeds(entropy, draw, max_subseeds: int = 50):
    """Run draw(rng) under successive sub-seeded generators until it
    returns non-None; each exhausted budget is logged and re-seeded."""
    for sub in range(max_subseeds):
        rng = np.random.default_rng(list(entropy) + [sub])
        out = draw(rng)
        if out is not None:
            if sub > 0:
                log.info("placement budget exhausted %d time(s) for entropy %s",
                         sub, entropy)
            return out
    raise RuntimeError(f"could not place objects after {max_subseeds} sub-seeds")


def gen_namo(seed, m_movable: int) -> Scenario:
    """Random navigation-among-movables map: m movable cylinders plus
    8 - m static squares, centers uniform in [1, 5] x [-2, 2], all
    pairwise surface gaps >= 0.1 m and both robot endpoints kept clear.

    seed may be an int or a sequence of ints (deterministic either way).
    """
    if not 1 <= m_movable <= 7:
        raise ValueError("m_movable must be in 1..7")
    entropy = [seed] if np.isscalar(seed) else list(seed)
    kinds = ["cylinder"] * m_movable + ["static"] * (8 - m_movable)
    centers = _with_subseeds(entropy + [m_movable],
                             lambda rng: _draw_centers(
                                 rng, kinds, [1.0, -2.0], [5.0, 2.0]))
    grid = _workspace_grid()
    movables = []
    for kind, c in zip(kinds, centers):
        if kind == "static":
            grid.fill_shape(_shape_for(kind, c), STATIC)
        else:
            movables.append(MovableObject(cylinder_object(CYLINDER_RADIUS), c))
    return Scenario(grid, RobotModel(ROBOT_RADIUS), ROBOT_START, ROBOT_GOAL,
                    movables, "namo")


def gen_ramo(seed, shape_class: str) -> Scenario:
    """Random rearrangement map: one movable object pushed from
    [1, y_s] to [5, y_t] past 4 static squares in [2, 4] x [-2, 2]."""
    if shape_class not in ("cylinder", "cube"):
        raise ValueError("shape_class must be 'cylinder' or 'cube'")
    entropy = [seed] if np.isscalar(seed) else list(seed)

    def draw(rng):
        y_s, y_t = rng.uniform(-2.0, 2.0, size=2)
        start = np.array([1.0, y_s])
        target = np.array([5.0, y_t])
        # statics must leave both the pickup and the drop-off free
        extra = ((start, OBJECT_CLEARANCE + _half_extent(shape_class)),
                 (target, OBJECT_CLEARANCE + _half_extent(shape_class)))
        centers = _draw_centers(rng, ["static"] * 4, [2.0, -2.0], [4.0, 2.0],
                                extra_points=extra)
        if centers is None:
            return None
        obj_shape = _shape_for(shape_class, start)
        if not _placement_ok(obj_shape, [_shape_for("static", c) for c in centers]):
            return None
        return start, target, centers

    start, target, centers = _with_subseeds(entropy + [shape_class], draw)
    grid = _workspace_grid()
    for c in centers:
        grid.fill_shape(_shape_for("static", c), STATIC)
    model = (cylinder_object(CYLINDER_RADIUS) if shape_class == "cylinder"
             else cube_object(CUBE_SIDE))
    movables = [MovableObject(model, start, target)]
    return Scenario(grid, RobotModel(ROBOT_RADIUS), ROBOT_START, ROBOT_GOAL,
                    movables, "ramo")


def _half_extent(shape_class: str) -> float:
    if shape_class == "cylinder":
        return CYLINDER_RADIUS
    return CUBE_SIDE * math.sqrt(0.5)


# ---------------------------------------------------------------------------
# single run


def _frontend(scenario: Scenario, mode: str, spacing: float) -> FrontendPlan:
    if mode == "avoidance":
        return plan_avoidance(scenario, spacing)
    if scenario.task_kind == "ramo":
        return plan_ramo(scenario, spacing)
    return plan_namo(scenario, spacing)


def _initial_guess(plan: FrontendPlan, mode: str) -> DecisionVariables:
    x0 = assemble_initial(plan)
    if mode == "avoidance":
        return DecisionVariables(x0.q[:2], x0.tau)  # robot rows only
    return x0


def _family_max(report, names) -> float:
    worst = 0.0
    for name in names:
        st = report.families.get(name)
        if st is not None:
            worst = max(worst, st.max_violation)
    return worst


def validate(scenario: Scenario, mode: str, x: np.ndarray,
             program: TrajectoryProgram, converged: bool) -> FeasibilityReport:
    """Re-check a solution on a 10x denser sample grid, then (contact-aware
    only) replay the robot path quasi-statically and measure where the
    objects actually end up."""
    prog_mode = "contact_aware" if mode == "camp" else "avoidance"
    dense_cfg = replace(program.cfg, kappa=VALIDATION_FACTOR * program.cfg.kappa)
    checker = TrajectoryProgram(scenario, prog_mode, dense_cfg,
                                boundary=program.boundary, esdf=program.esdf)
    ev = checker.evaluate(np.asarray(x, dtype=float))
    report = ev.extra["report"]
    family_max = {name: st.max_violation for name, st in report.families.items()}
    collision = _family_max(report, COLLISION_FAMILIES)
    comp = _family_max(report, COMPLEMENTARITY_FAMILIES)

    rollout_error = None
    if mode == "camp" and scenario.movables:
        traj = ev.extra["trajectory"]
        ts = np.linspace(0.0, traj.total_time,
                         VALIDATION_FACTOR * program.cfg.kappa * traj.num_segments + 1)
        robot_pts = traj.eval_many(ts)[0:2].T
        roll = quasi_static_rollout(
            robot_pts, scenario.robot.radius,
            [mv.model for mv in scenario.movables],
            np.array([mv.start for mv in scenario.movables]),
            static_esdf=program.esdf)
        if roll.wedged:
            rollout_error = float("inf")
        elif scenario.task_kind == "ramo":
            targets = np.array([mv.target for mv in scenario.movables])
            rollout_error = float(np.max(
                np.linalg.norm(roll.final_positions - targets, axis=1)))
        else:
            # NAMO has no object targets; report drift from the plan instead
            planned = checker.unpack(np.asarray(x, dtype=float)).q[2:, -1]
            planned = planned.reshape(-1, 2)
            rollout_error = float(np.max(
                np.linalg.norm(roll.final_positions - planned, axis=1)))

    reason = ""
    if not converged:
        reason = "solver_not_converged"
    elif collision > SUCCESS_TOL:
        reason = "collision"
    elif mode == "camp" and comp > SUCCESS_TOL:
        reason = "complementarity"
    elif (mode == "camp" and scenario.task_kind == "ramo"
          and rollout_error is not None and rollout_error > ROLLOUT_TOL):
        reason = "rollout"
    return FeasibilityReport(family_max, collision, comp, rollout_error,
                             reason == "", reason)


def run_one(scenario: Scenario, mode: str,
            program_cfg: Optional[ProgramConfig] = None,
            solver_cfg: Optional[AlmConfig] = None,
            spacing: float = 1.0):
    """Plan, solve, and validate one scenario in one mode.

    Returns (SolveReport or None, FeasibilityReport, timings) where
    timings is {"frontend_ms", "backend_s"}; a front-end failure yields
    a None solve report and reason "frontend_no_path".
    """
    if mode not in ("camp", "avoidance"):
        raise ValueError("mode must be 'camp' or 'avoidance'")
    if solver_cfg is None:
        solver_cfg = AlmConfig(rho0=100.0)  # benchmark recipe
    timings = {"frontend_ms": float("nan"), "backend_s": float("nan")}
    t0 = time.perf_counter()
    try:
        plan = _frontend(scenario, mode, spacing)
    except NoPathError:
        timings["frontend_ms"] = 1e3 * (time.perf_counter() - t0)
        report = FeasibilityReport({}, float("inf"), float("inf"), None,
                                   False, "frontend_no_path")
        return None, report, timings
    timings["frontend_ms"] = 1e3 * (time.perf_counter() - t0)

    prog_mode = "contact_aware" if mode == "camp" else "avoidance"
    program = TrajectoryProgram(scenario, prog_mode, program_cfg,
                                num_segments=plan.num_segments)
    x0 = _initial_guess(plan, mode)
    t1 = time.perf_counter()
    res = alm_solve(program, x0.pack(), solver_cfg)
    timings["backend_s"] = time.perf_counter() - t1

    feas = validate(scenario, mode, res.x, program, res.converged)
    return res, feas, timings


# ---------------------------------------------------------------------------
# suite


def _scenario_for(config: BenchmarkConfig, set_index: int, map_index: int) -> Scenario:
    if config.family == "namo":
        m = config.m_values[set_index]
        return gen_namo([config.seed, map_index], m)
    shape = config.shape_classes[set_index]
    return gen_ramo([config.seed, map_index], shape)


def _stats(values: list) -> tuple:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return (float("nan"),) * 4
    arr = np.asarray(vals)
    return (float(arr.min()), float(arr.max()), float(arr.mean()),
            float(arr.std()))


def _metrics_row(task_id: str, mode: str, records: list) -> MetricsRow:
    fe = _stats([r["frontend_ms"] for r in records])
    be = _stats([r["backend_s"] for r in records])
    n = len(records)
    pct = 100.0 * sum(r["success"] for r in records) / n if n else float("nan")
    return MetricsRow(task_id, mode, fe[0], fe[1], fe[2], fe[3],
                      be[0], be[1], be[2], be[3], pct)


def run_suite(config: BenchmarkConfig, out_csv: Optional[str] = None,
              out_jsonl: Optional[str] = None,
              progress: bool = False):
    """Run every (set, map, mode) combination; aggregate a metrics table.

    Individual failures (including unexpected exceptions) become failure
    records, never abort. Returns (rows, records); rows end with one
    TOTAL AVG row per mode pooled over all runs."""
    labels = config.set_labels()
    records = []
    for si, label in enumerate(labels):
        for mi in range(config.maps_per_set):
            try:
                scenario = _scenario_for(config, si, mi)
            except Exception as exc:  # noqa: BLE001 - suite must survive
                log.exception("generation for %s map %d raised", label, mi)
                for mode in config.modes:
                    records.append({
                        "task_id": label, "map_index": mi, "mode": mode,
                        "seed": config.seed, "frontend_ms": float("nan"),
                        "backend_s": float("nan"), "converged": False,
                        "success": False,
                        "failure_reason": f"error:{type(exc).__name__}"})
                continue
            for mode in config.modes:
                rec = {"task_id": label, "map_index": mi, "mode": mode,
                       "seed": config.seed}
                try:
                    res, feas, timings = run_one(
                        scenario, mode, config.program, config.solver,
                        config.spacing)
                    rec.update(timings)
                    rec["converged"] = bool(res.converged) if res else False
                    rec["outer_iterations"] = res.outer_iterations if res else 0
                    rec["inner_iterations"] = res.inner_iterations if res else 0
                    rec["max_violation"] = res.max_violation if res else None
                    rec["family_max"] = feas.family_max
                    rec["collision_max"] = feas.collision_max
                    rec["complementarity_max"] = feas.complementarity_max
                    rec["rollout_error"] = feas.rollout_error
                    rec["success"] = feas.success
                    rec["failure_reason"] = feas.failure_reason
                except Exception as exc:  # noqa: BLE001 - suite must survive
                    log.exception("run %s map %d mode %s raised", label, mi, mode)
                    rec.update({"frontend_ms": float("nan"),
                                "backend_s": float("nan"),
                                "converged": False, "success": False,
                                "failure_reason": f"error:{type(exc).__name__}"})
                records.append(rec)
                if progress:
                    print(f"{label} map {mi} {mode}: "
                          f"{'ok' if rec['success'] else rec['failure_reason']}",
                          flush=True)

    rows = []
    for label in labels:
        for mode in config.modes:
            sub = [r for r in records
                   if r["task_id"] == label and r["mode"] == mode]
            rows.append(_metrics_row(label, mode, sub))
    for mode in config.modes:
        sub = [r for r in records if r["mode"] == mode]
        if sub:
            rows.append(_metrics_row("TOTAL AVG", mode, sub))

    if out_csv:
        write_metrics_csv(out_csv, rows)
    if out_jsonl:
        write_records_jsonl(out_jsonl, records)
    return rows, records


CSV_COLUMNS = ("task_id", "mode",
               "frontend_min_ms", "frontend_max_ms", "frontend_mean_ms",
               "frontend_std_ms",
               "backend_min_s", "backend_max_s", "backend_mean_s",
               "backend_std_s", "success_pct")

TIMING_COLUMNS = tuple(c for c in CSV_COLUMNS
                       if c.startswith(("frontend_", "backend_")))


def write_metrics_csv(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.task_id, row.mode,
                             *(f"{getattr(row, c):.3f}" for c in TIMING_COLUMNS),
                             f"{row.success_pct:.1f}"])


def write_records_jsonl(path: str, records: list) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
