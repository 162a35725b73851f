"""Contact frames, quasi-static force reconstruction, and push rollout.

The motion model is quasi-static and translation-only: objects sit still
unless the robot presses on them, forces act through a single contact
frame, and the reconstructed force is whatever Newton balance requires
for the object's planned acceleration. The rollout replays a robot path
kinematically and moves objects purely by resolving overlap, which is
how a planned push is checked without trusting the plan's forces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .geometry import ConvexShape, Esdf, disc, signed_gap, square

GAP_TOL = 1e-3  # m, touching threshold for an active contact


@dataclass(eq=False)
class AgentModel:
    """A movable object: its shape at the local origin plus physical params."""

    shape_class: str  # "cylinder" | "cube"
    shape: ConvexShape  # local frame, position (0, 0)
    mass: float  # kg
    friction_mu: float  # contact friction coefficient

    def shape_at(self, position) -> ConvexShape:
        return self.shape.at(position)

    def effective_radius(self) -> float:
        """Push-offset radius: disc radius, or half-side for axis pushes."""
        if self.shape_class == "cube":
            # axis-aligned face contact
            return float(np.max(self.shape.vertices[:, 0]))
        return self.shape.radius


def cylinder_object(radius: float, mass: float = 1.0, friction_mu: float = 0.3) -> AgentModel:
    return AgentModel("cylinder", disc([0.0, 0.0], radius), mass, friction_mu)


def cube_object(side: float, mass: float = 1.0, friction_mu: float = 0.3) -> AgentModel:
    return AgentModel("cube", square([0.0, 0.0], side), mass, friction_mu)


class ContactFrame(NamedTuple):
    active: bool
    gap: float  # m, signed clearance robot-to-object
    point: np.ndarray  # (2,) on the robot boundary
    normal: np.ndarray  # (2,) unit, from the robot into the object


def detect_contact(robot_position, robot_radius: float, obj: AgentModel,
                   obj_position, gap_tol: float = GAP_TOL) -> ContactFrame:
    """Contact frame between the disc robot and one object."""
    p = np.asarray(robot_position, dtype=float)
    gap, grad_r, _ = signed_gap(disc(p, robot_radius), obj.shape_at(obj_position))
    normal = -grad_r  # gap increases away from the object
    point = p + robot_radius * normal
    return ContactFrame(bool(gap <= gap_tol), float(gap), point, normal)


def reconstruct_force(frame: ContactFrame, mass: float, obj_acc) -> np.ndarray:
    """Contact force from Newton balance, translation-only, no drag.

    Inactive frames carry no force; active frames must explain the whole
    object acceleration.
    """
    if not frame.active:
        return np.zeros(2)
    return mass * np.asarray(obj_acc, dtype=float)


def cone_violation(frame: ContactFrame, force, friction_mu: float,
                   shape_class: str, obj_vel) -> np.ndarray:
    """Diagnostic residuals [pushing-only, friction cone, cube axis alignment].

    All three are <= 0 when the contact is physically consistent. Exact
    norms (no smoothing), so the friction residual is positively
    homogeneous in the force.
    """
    f = np.asarray(force, dtype=float)
    v = np.asarray(obj_vel, dtype=float)
    fn = float(f @ frame.normal)
    pushing = -fn
    tangential = f - fn * frame.normal
    friction = float(np.linalg.norm(tangential)) - friction_mu * fn
    if shape_class == "cube":
        axis = float(min(abs(v[0]), abs(v[1])))
    else:
        axis = 0.0
    return np.array([pushing, friction, axis])


# ---------------------------------------------------------------------------
# quasi-static rollout


class RolloutResult(NamedTuple):
    object_paths: np.ndarray  # (N, T, 2)
    final_positions: np.ndarray  # (N, 2)
    wedged: bool
    reason: str
    max_static_penetration: float  # m, proxy via the distance field


_AXES = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def _resolve_push(robot_pos, robot_radius, obj: AgentModel, obj_pos):
    """Move one object out of overlap with the robot. Returns new position."""
    pos = np.asarray(obj_pos, dtype=float).copy()
    for _ in range(8):
        gap, grad_r, _ = signed_gap(disc(robot_pos, robot_radius), obj.shape_at(pos))
        if gap >= -1e-9:
            break
        n = -grad_r  # into the object
        if obj.shape_class == "cube":
            k = int(np.argmax(_AXES @ n))
            e = _AXES[k]
            rate = max(float(n @ e), 0.25)
            pos = pos + (-gap / rate) * e
        else:
            pos = pos + (-gap) * n
    return pos


def _static_penetration(obj: AgentModel, pos, esdf: Esdf) -> float:
    """How deep the object sits in static cells, measured via the field."""
    if obj.shape_class == "cube":
        half = obj.effective_radius()
        d, _, _ = esdf.query_one(pos)
        center_pen = half - d
        verts = obj.shape_at(pos).world_vertices()
        vd = esdf.query(verts).distance
        # a vertex right on occupied cells reads ~0 from the unsigned field
        vert_pen = float(np.max(esdf.resolution * 0.5 - vd))
        return max(center_pen, vert_pen, 0.0)
    d, _, _ = esdf.query_one(pos)
    return max(obj.shape.radius - d, 0.0)


def quasi_static_rollout(robot_positions: np.ndarray, robot_radius: float,
                         objects: list[AgentModel], starts: np.ndarray,
                         static_esdf: Optional[Esdf] = None,
                         penetration_tol: Optional[float] = None) -> RolloutResult:
    """Replay a robot path and push objects out of overlap step by step.

    Objects have no inertia: they move exactly as far as overlap resolution
    requires and stop instantly. An object forced into static cells deeper
    than the tolerance (default resolution/2) wedges the rollout, as does
    unresolvable robot-object or object-object overlap.
    """
    rp = np.atleast_2d(np.asarray(robot_positions, dtype=float))
    n = len(objects)
    t_steps = len(rp)
    paths = np.zeros((n, t_steps, 2))
    pos = np.asarray(starts, dtype=float).reshape(n, 2).copy()
    wedged = False
    reason = ""
    max_pen = 0.0
    if penetration_tol is None:
        penetration_tol = 0.5 * static_esdf.resolution if static_esdf is not None else 0.025

    for t in range(t_steps):
        p = rp[t]
        for _ in range(6):
            any_overlap = False
            for j, obj in enumerate(objects):
                gap, _, _ = signed_gap(disc(p, robot_radius), obj.shape_at(pos[j]))
                if gap < -1e-9:
                    any_overlap = True
                    pos[j] = _resolve_push(p, robot_radius, obj, pos[j])
            if not any_overlap:
                break
        else:
            wedged = True
            reason = f"unresolved robot-object overlap at step {t}"
        if static_esdf is not None and not wedged:
            for j, obj in enumerate(objects):
                pen = _static_penetration(obj, pos[j], static_esdf)
                max_pen = max(max_pen, pen)
                if pen > penetration_tol:
                    wedged = True
                    reason = f"object {j} wedged into static cells at step {t}"
                    break
        if not wedged:
            for a in range(n):
                for b in range(a + 1, n):
                    gap, _, _ = signed_gap(objects[a].shape_at(pos[a]),
                                           objects[b].shape_at(pos[b]))
                    if gap < -penetration_tol:
                        wedged = True
                        reason = f"objects {a} and {b} jammed together at step {t}"
        paths[:, t, :] = pos
        if wedged:
            paths[:, t:, :] = pos[:, None, :]
            break

    return RolloutResult(paths, pos.copy(), wedged, reason, max_pen)
