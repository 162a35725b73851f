"""Task initialization: semantic masking, grid search, contact sequencing,
time allocation, and the initial decision variables.

The front end thinks in grid cells and straight pushes. It produces a
waypoint matrix (robot plus every movable object) and per-segment times
that the back-end optimizer refines; nothing here needs to be dynamically
feasible, only topologically sensible.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from camp.contact import AgentModel
from camp.geometry import FREE, GridMap, MOVABLE_BASE, build_esdf
from camp.trajgen import DecisionVariables

SQRT2 = math.sqrt(2.0)


class NoPathError(RuntimeError):
    """Grid search could not connect start and goal."""


@dataclass(eq=False)
class RobotModel:
    """Disc robot with kinematic limits."""

    radius: float
    v_max: float = 1.0
    a_max: float = 2.0

    def effective_radius(self) -> float:
        return self.radius


@dataclass(eq=False)
class MovableObject:
    model: AgentModel
    start: np.ndarray
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=float)


@dataclass(eq=False)
class Scenario:
    grid: GridMap
    robot: RobotModel
    robot_start: np.ndarray
    robot_goal: np.ndarray
    movables: list
    task_kind: str  # "namo" | "ramo"

    def __post_init__(self):
        self.robot_start = np.asarray(self.robot_start, dtype=float)
        self.robot_goal = np.asarray(self.robot_goal, dtype=float)
        if self.task_kind not in ("namo", "ramo"):
            raise ValueError("task_kind must be 'namo' or 'ramo'")
        if self.task_kind == "ramo":
            if any(m.target is None for m in self.movables):
                raise ValueError("RAMO scenarios need a target per object")
        elif any(m.target is not None for m in self.movables):
            raise ValueError("NAMO scenarios must not carry object targets")


@dataclass(eq=False)
class FrontendPlan:
    robot_path: np.ndarray  # (M+1, 2) metric waypoints
    object_paths: np.ndarray  # (n_obj, M+1, 2)
    contact_schedule: list  # (object index, window start knot, window end knot)
    deltas: list  # object offset from the robot per schedule entry
    durations: np.ndarray  # (M,) seconds
    task_kind: str = "namo"

    @property
    def num_segments(self) -> int:
        return len(self.robot_path) - 1


# ---------------------------------------------------------------------------
# masking and grid search


def mask_map(grid: GridMap) -> GridMap:
    """Movable cells become free; statics stay. Idempotent."""
    out = grid.copy()
    out.cells[out.cells >= MOVABLE_BASE] = FREE
    return out


def blocked_cells(grid: GridMap, inflate_radius: float = 0.0,
                  include_movables: bool = False) -> np.ndarray:
    """Boolean blocked mask, optionally dilated by a metric radius."""
    work = grid if include_movables else mask_map(grid)
    occ = work.cells != FREE
    if inflate_radius <= 0.0:
        return occ
    esdf = build_esdf(work, treat_movable_as="occupied")
    return esdf.distance < inflate_radius


# cardinals first, diagonals after; the fixed order keeps ties reproducible
_MOVES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
          (1, 1, 1), (-1, 1, 1), (1, -1, 1), (-1, -1, 1))


def astar(grid: GridMap, start_cell, goal_cell,
          blocked: Optional[np.ndarray] = None) -> list:
    """8-connected shortest path on the grid.

    Step costs 1 and sqrt(2) are carried as an exact (straight, diagonal)
    integer pair so cost comparisons cannot be corrupted by accumulated
    rounding. Diagonal moves require both adjacent cardinal cells free.
    Ties in f break by heap insertion order. Raises NoPathError.
    """
    if blocked is None:
        blocked = grid.cells != FREE
    w, h = grid.width, grid.height
    sx, sy = int(start_cell[0]), int(start_cell[1])
    gx, gy = int(goal_cell[0]), int(goal_cell[1])
    if not (grid.in_bounds(sx, sy) and grid.in_bounds(gx, gy)):
        raise NoPathError("start or goal outside the map")
    if blocked[sy, sx] or blocked[gy, gx]:
        raise NoPathError("start or goal cell blocked")

    def heuristic(x, y):
        return math.hypot(x - gx, y - gy)

    INF = (1 << 30, 1 << 30)
    gcost = {(sx, sy): (0, 0)}
    parent: dict = {}
    counter = 0
    heap = [(heuristic(sx, sy), counter, sx, sy)]
    closed = np.zeros((h, w), dtype=bool)
    while heap:
        _, _, x, y = heapq.heappop(heap)
        if closed[y, x]:
            continue
        closed[y, x] = True
        if (x, y) == (gx, gy):
            path = [(x, y)]
            while (x, y) != (sx, sy):
                x, y = parent[(x, y)]
                path.append((x, y))
            return path[::-1]
        a0, b0 = gcost[(x, y)]
        for dx, dy, diag in _MOVES:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or blocked[ny, nx]:
                continue
            if diag and (blocked[y, nx] or blocked[ny, x]):
                continue
            cand = (a0 + 1 - diag, b0 + diag)
            cur = gcost.get((nx, ny), INF)
            if cand[0] + cand[1] * SQRT2 < cur[0] + cur[1] * SQRT2:
                gcost[(nx, ny)] = cand
                parent[(nx, ny)] = (x, y)
                counter += 1
                f = cand[0] + cand[1] * SQRT2 + heuristic(nx, ny)
                heapq.heappush(heap, (f, counter, nx, ny))
    raise NoPathError("goal unreachable")


def path_cost(path: list) -> tuple:
    """(straight, diagonal) step counts of a cell path."""
    a = b = 0
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        if abs(x1 - x0) + abs(y1 - y0) == 2:
            b += 1
        else:
            a += 1
    return a, b


# ---------------------------------------------------------------------------
# waypoint shaping and timing


def _dedupe(points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    keep = [points[0]]
    for p in points[1:]:
        if np.linalg.norm(p - keep[-1]) > tol:
            keep.append(p)
    return np.array(keep)


def downsample_path(points: np.ndarray, spacing: float = 1.0,
                    max_segments: int = 40) -> np.ndarray:
    """Resample a polyline by arc length; endpoints kept exactly."""
    points = _dedupe(np.asarray(points, dtype=float))
    if len(points) == 1:
        return points
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(np.sum(seg))
    n = max(1, min(max_segments, int(np.ceil(total / spacing))))
    targets = np.linspace(0.0, total, n + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((n + 1, 2))
    for i, t in enumerate(targets):
        k = min(np.searchsorted(cum, t, side="right") - 1, len(seg) - 1)
        r = (t - cum[k]) / seg[k]
        out[i] = points[k] * (1 - r) + points[k + 1] * r
    out[0], out[-1] = points[0], points[-1]
    return _dedupe(out)


def allocate_times(waypoints: np.ndarray, v_max: float, a_max: float,
                   floor: float = 0.1) -> np.ndarray:
    """Trapezoidal (or triangular, when cruise speed is never reached)
    rest-to-rest time per straight segment, floored at 0.1 s."""
    waypoints = np.asarray(waypoints, dtype=float)
    d = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cruise = d >= v_max * v_max / a_max
    t = np.where(cruise, d / v_max + v_max / a_max,
                 2.0 * np.sqrt(np.maximum(d, 0.0) / a_max))
    return np.maximum(t, floor)


def cells_to_metric(grid: GridMap, cells: list) -> np.ndarray:
    return np.array([grid.cell_center(x, y) for x, y in cells])


def _astar_metric(grid: GridMap, blocked: np.ndarray, start_m, goal_m) -> np.ndarray:
    """Cell path between metric points with exact endpoints spliced in.
    Endpoint cells are whitelisted so contact-adjacent poses stay legal."""
    start_c = grid.world_to_cell(start_m)
    goal_c = grid.world_to_cell(goal_m)
    blocked = blocked.copy()
    if grid.in_bounds(*start_c):
        blocked[start_c[1], start_c[0]] = False
    if grid.in_bounds(*goal_c):
        blocked[goal_c[1], goal_c[0]] = False
    cells = astar(grid, start_c, goal_c, blocked=blocked)
    pts = cells_to_metric(grid, cells)
    pts[0] = np.asarray(start_m, dtype=float)
    pts[-1] = np.asarray(goal_m, dtype=float)
    return _dedupe(pts)


# ---------------------------------------------------------------------------
# task planners


def _constant_objects(movables: list, m1: int) -> np.ndarray:
    if not movables:
        return np.zeros((0, m1, 2))
    return np.stack([np.tile(mv.start, (m1, 1)) for mv in movables])


def plan_namo(scenario: Scenario, spacing: float = 1.0,
              max_segments: int = 40) -> FrontendPlan:
    """Search the masked map; objects ride along at their start states."""
    masked = mask_map(scenario.grid)
    blocked = blocked_cells(masked, inflate_radius=scenario.robot.radius)
    pts = _astar_metric(masked, blocked, scenario.robot_start, scenario.robot_goal)
    robot = downsample_path(pts, spacing, max_segments)
    durations = allocate_times(robot, scenario.robot.v_max, scenario.robot.a_max)
    return FrontendPlan(robot, _constant_objects(scenario.movables, len(robot)),
                        [], [], durations, "namo")


def plan_avoidance(scenario: Scenario, spacing: float = 1.0,
                   max_segments: int = 40) -> FrontendPlan:
    """Baseline initialization: movables count as obstacles, no masking."""
    grid = scenario.grid.copy()
    for mv in scenario.movables:
        grid.fill_shape(mv.model.shape_at(mv.start), MOVABLE_BASE)
    blocked = blocked_cells(grid, inflate_radius=scenario.robot.radius,
                            include_movables=True)
    pts = _astar_metric(grid, blocked, scenario.robot_start, scenario.robot_goal)
    robot = downsample_path(pts, spacing, max_segments)
    durations = allocate_times(robot, scenario.robot.v_max, scenario.robot.a_max)
    return FrontendPlan(robot, _constant_objects(scenario.movables, len(robot)),
                        [], [], durations, "namo")


def _push_legs(mv: MovableObject) -> list:
    """(unit push direction, travel length) legs moving start to target.
    Cylinders push along the straight line; cubes take one axis-aligned
    leg per axis, x before y."""
    delta = mv.target - mv.start
    legs = []
    if mv.model.shape_class == "cube":
        for axis in (0, 1):
            if abs(delta[axis]) > 1e-9:
                u = np.zeros(2)
                u[axis] = math.copysign(1.0, delta[axis])
                legs.append((u, abs(float(delta[axis]))))
    else:
        dist = float(np.linalg.norm(delta))
        if dist > 1e-9:
            legs.append((delta / dist, dist))
    return legs


def _transit_blocked(masked: GridMap, scenario: Scenario, poses: np.ndarray,
                     r_robot: float) -> np.ndarray:
    """Blocked mask for robot-only travel: statics plus every object
    stamped at its current pose, all inflated by the robot radius."""
    grid = masked.copy()
    for mv, p in zip(scenario.movables, poses):
        grid.fill_shape(mv.model.shape_at(p), MOVABLE_BASE)
    return blocked_cells(grid, inflate_radius=r_robot, include_movables=True)


def plan_ramo(scenario: Scenario, spacing: float = 1.0,
              max_segments: int = 40) -> FrontendPlan:
    """Nearest-first contact order; per object: a transit leg to the
    push-side approach point, straight push legs (axis split for cubes)
    with the robot glued behind the object, transits around the stamped
    objects between legs, then a final leg to the robot goal."""
    masked = mask_map(scenario.grid)
    r_robot = scenario.robot.radius
    blocked_static = blocked_cells(masked, inflate_radius=r_robot)

    order = []
    for j, mv in enumerate(scenario.movables):
        pts = _astar_metric(masked, blocked_static, scenario.robot_start, mv.start)
        a, b = path_cost([masked.world_to_cell(p) for p in pts])
        order.append((a + b * SQRT2, j))
    order.sort()

    n_obj = len(scenario.movables)
    poses = np.array([mv.start for mv in scenario.movables], dtype=float) \
        if n_obj else np.zeros((0, 2))
    legs = []  # dicts: kind, a, b, j, delta, poses snapshot
    cur = scenario.robot_start.copy()
    for _, j in order:
        mv = scenario.movables[j]
        touch = r_robot + mv.model.effective_radius()
        for u, dist in _push_legs(mv):
            approach = poses[j] - touch * u
            legs.append({"kind": "transit", "a": cur.copy(), "b": approach,
                         "poses": poses.copy()})
            legs.append({"kind": "push", "a": approach,
                         "b": approach + dist * u, "j": j, "delta": touch * u})
            poses = poses.copy()
            poses[j] = poses[j] + dist * u
            cur = approach + dist * u
    legs.append({"kind": "transit", "a": cur.copy(),
                 "b": scenario.robot_goal.copy(), "poses": poses.copy()})

    seg_lens = [float(np.linalg.norm(leg["b"] - leg["a"])) for leg in legs]
    total = max(sum(seg_lens), 1e-9)
    budget = max(max_segments - len(legs), len(legs))

    robot_rows = [scenario.robot_start.copy()]
    obj_rows = [[scenario.movables[j].start.copy()] for j in range(n_obj)]

    def extend(points, moving_j=None, delta=None):
        for p in points[1:]:
            robot_rows.append(np.asarray(p, dtype=float))
            for j in range(n_obj):
                if j == moving_j:
                    obj_rows[j].append(robot_rows[-1] + delta)
                else:
                    obj_rows[j].append(obj_rows[j][-1].copy())

    for leg, length in zip(legs, seg_lens):
        n_seg = max(1, min(int(np.ceil(length / spacing)) if length > 0 else 1,
                           1 + int(budget * length / total)))
        if leg["kind"] == "push":
            pts = leg["a"] + np.linspace(0.0, 1.0, n_seg + 1)[:, None] \
                * (leg["b"] - leg["a"])
            extend(pts, moving_j=leg["j"], delta=leg["delta"])
        else:
            if length < 1e-9:
                continue
            blk = _transit_blocked(masked, scenario, leg["poses"], r_robot)
            pts = _astar_metric(masked, blk, leg["a"], leg["b"])
            pts = downsample_path(pts, spacing, max(n_seg, 2))
            extend(pts)

    robot_path, object_paths = _dedupe_matrix(np.array(robot_rows), obj_rows)
    durations = allocate_times(robot_path, scenario.robot.v_max,
                               scenario.robot.a_max)
    schedule, deltas = _recover_schedule(object_paths, robot_path)
    plan = FrontendPlan(robot_path, object_paths, schedule, deltas,
                        durations, "ramo")
    _assert_contact_law(plan)
    return plan


def _dedupe_matrix(robot_rows: np.ndarray, obj_rows: list):
    """Drop knots where no agent moved, keeping all tracks aligned."""
    n = len(robot_rows)
    keep = [0]
    for i in range(1, n):
        moved = np.linalg.norm(robot_rows[i] - robot_rows[keep[-1]]) > 1e-9
        for track in obj_rows:
            moved = moved or np.linalg.norm(track[i] - track[keep[-1]]) > 1e-9
        if moved:
            keep.append(i)
    keep = np.array(keep)
    objects = np.stack([np.array(track)[keep] for track in obj_rows]) \
        if obj_rows else np.zeros((0, len(keep), 2))
    return robot_rows[keep], objects


def _recover_schedule(object_paths: np.ndarray, robot_path: np.ndarray):
    """Contiguous runs of object motion; the offset is read off the rows."""
    schedule, deltas = [], []
    for j in range(object_paths.shape[0]):
        track = object_paths[j]
        moving = np.linalg.norm(np.diff(track, axis=0), axis=1) > 1e-9
        i = 0
        while i < len(moving):
            if moving[i]:
                k = i
                while k < len(moving) and moving[k]:
                    k += 1
                schedule.append((j, i, k))
                deltas.append(track[i + 1] - robot_path[i + 1])
                i = k
            else:
                i += 1
    order = np.argsort([p for (_, p, _) in schedule], kind="stable")
    return [schedule[i] for i in order], [deltas[i] for i in order]


def _assert_contact_law(plan: FrontendPlan) -> None:
    """During a window the object sits at robot + delta; outside every
    window it is constant. Exact by construction, checked anyway."""
    for (j, p, q), delta in zip(plan.contact_schedule, plan.deltas):
        track = plan.object_paths[j]
        for i in range(p + 1, q + 1):
            if not np.allclose(track[i], plan.robot_path[i] + delta, atol=1e-9):
                raise AssertionError("contact law violated inside push window")
    for j in range(plan.object_paths.shape[0]):
        windows = [(p, q) for (jj, p, q) in plan.contact_schedule if jj == j]
        track = plan.object_paths[j]
        for i in range(1, len(track)):
            if any(p < i <= q for p, q in windows):
                continue
            if not np.allclose(track[i], track[i - 1], atol=1e-9):
                raise AssertionError("object moved outside its contact window")


def assemble_initial(plan: FrontendPlan) -> DecisionVariables:
    """Stack waypoint rows (robot first, objects in order) and log-times."""
    rows = [plan.robot_path.T]
    for j in range(plan.object_paths.shape[0]):
        rows.append(plan.object_paths[j].T)
    q = np.concatenate(rows, axis=0)
    return DecisionVariables(q, np.log(plan.durations))
