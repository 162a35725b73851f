"""Minimum-jerk piecewise-quintic trajectories over shared knot times.

A trajectory couples every agent dimension to one segmentation: waypoints
``q`` (one column per knot) and log-durations ``tau`` (exponentiated so
durations stay positive). Coefficients come from one banded linear system
per solve (shared across dimensions, since all agents use the same knot
times), and gradients of any downstream scalar flow back to ``(q, tau)``
through the factorization adjoint rather than dense inverses.

The construction interpolates the waypoints, meets velocity/acceleration
boundary stacks at both ends, and keeps derivatives continuous up to order
4 at interior knots, which is exactly the minimizer of the integrated
squared jerk over piecewise quintics with those interpolation constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

DEGREE = 5  # quintic segments, minimum squared jerk
NCOEF = DEGREE + 1

# falling factorials: FF[j, d] = j! / (j - d)! for u^j differentiated d times
_FF = np.zeros((NCOEF, NCOEF))
for _j in range(NCOEF):
    _FF[_j, 0] = 1.0
    for _d in range(1, _j + 1):
        _FF[_j, _d] = _FF[_j, _d - 1] * (_j - _d + 1)


def basis_row(u: float, order: int) -> np.ndarray:
    """Row vector b with p^(order)(u) = b @ coeffs for ascending-power coeffs."""
    out = np.zeros(NCOEF)
    for j in range(order, NCOEF):
        out[j] = _FF[j, order] * u ** (j - order)
    return out


def basis_rows(us: np.ndarray, order: int) -> np.ndarray:
    """Vectorized :func:`basis_row`: (n,) times -> (n, 6)."""
    us = np.asarray(us, dtype=float)
    out = np.zeros(us.shape + (NCOEF,))
    for j in range(order, NCOEF):
        out[..., j] = _FF[j, order] * us ** (j - order)
    return out


@dataclass(eq=False)
class DecisionVariables:
    """Waypoints and log-durations, the free parameters of one plan.

    q has one row per agent dimension (robot x, robot y, then each object)
    and one column per knot; column 0 is the scenario start state. tau holds
    log segment durations, so durations exp(tau) are positive by build.
    """

    q: np.ndarray  # (s, M + 1) waypoints, m
    tau: np.ndarray  # (M,) log durations

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        if self.q.ndim != 2 or self.tau.ndim != 1 or self.q.shape[1] != len(self.tau) + 1:
            raise ValueError("q must be (s, M+1) with tau of length M")

    @property
    def durations(self) -> np.ndarray:
        return np.exp(self.tau)

    @property
    def num_segments(self) -> int:
        return len(self.tau)

    @property
    def num_dims(self) -> int:
        return self.q.shape[0]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.q.ravel(), self.tau])

    @classmethod
    def unpack(cls, vec: np.ndarray, s: int, m: int) -> "DecisionVariables":
        q = vec[: s * (m + 1)].reshape(s, m + 1)
        return cls(q, vec[s * (m + 1):])


@dataclass(eq=False)
class BoundaryCondition:
    """Velocity and acceleration stacks at the two trajectory ends.

    Endpoint positions always come from the waypoint matrix itself
    (columns 0 and M), so only derivative orders 1..2 live here.
    Shapes are (2, s): row 0 velocity, row 1 acceleration.
    """

    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.end = np.asarray(self.end, dtype=float)
        if self.start.shape != self.end.shape or self.start.shape[0] != 2:
            raise ValueError("boundary stacks must both be (2, s)")

    @classmethod
    def rest(cls, s: int) -> "BoundaryCondition":
        return cls(np.zeros((2, s)), np.zeros((2, s)))


@dataclass(eq=False)
class PiecewiseTrajectory:
    """Piecewise polynomial over all agent dimensions with shared knots."""

    coeffs: np.ndarray  # (s, M, 6) ascending powers of local time
    durations: np.ndarray  # (M,) s
    knots: np.ndarray  # (M + 1,) cumulative times, knots[0] = 0

    _lu: object = field(default=None, repr=False)
    _q_rows: list = field(default=None, repr=False)  # per knot: system rows fed by q
    _end_eval_rows: list = field(default=None, repr=False)  # per segment: (row, order) at u = D

    @property
    def total_time(self) -> float:
        return float(self.knots[-1])

    @property
    def num_segments(self) -> int:
        return len(self.durations)

    def segment_of(self, t: float) -> tuple[int, float]:
        """Segment index and local time for a global time."""
        total = self.total_time
        if t < -1e-9 or t > total + 1e-9:
            raise ValueError(f"time {t} outside [0, {total}]")
        t = min(max(t, 0.0), total)
        i = int(np.searchsorted(self.knots, t, side="right") - 1)
        i = min(max(i, 0), self.num_segments - 1)
        return i, t - self.knots[i]

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        """Derivative of the given order at global time t, over all dims."""
        i, u = self.segment_of(t)
        return self.coeffs[:, i, :] @ basis_row(u, order)

    def eval_many(self, ts: np.ndarray, order: int = 0) -> np.ndarray:
        """(n,) times -> (s, n) values."""
        ts = np.asarray(ts, dtype=float)
        out = np.empty((self.coeffs.shape[0], len(ts)))
        for k, t in enumerate(ts):
            out[:, k] = self.eval(float(t), order)
        return out


def _system_layout(m: int):
    """Row bookkeeping for the 6M x 6M interpolation system."""
    q_rows = [[] for _ in range(m + 1)]
    end_eval_rows = [[] for _ in range(m)]
    q_rows[0].append(0)
    row = 3
    for j in range(1, m):
        q_rows[j].append(row)  # segment j-1 evaluated at its end
        end_eval_rows[j - 1].append((row, 0))
        for d in range(1, 5):
            end_eval_rows[j - 1].append((row + d, d))
        q_rows[j].append(row + 5)  # segment j starts at the waypoint
        row += 6
    q_rows[m].append(row)
    for d in range(3):
        end_eval_rows[m - 1].append((row + d, d))
    return q_rows, end_eval_rows


def minco_solve(x: DecisionVariables, bc: BoundaryCondition) -> PiecewiseTrajectory:
    """Coefficients of the minimum-jerk interpolant of (q, tau).

    One banded factorization serves every dimension; the factorization is
    kept on the result for adjoint gradient propagation.
    """
    m = x.num_segments
    s = x.num_dims
    if m < 1:
        raise ValueError("need at least one segment")
    if bc.start.shape[1] != s:
        raise ValueError("boundary condition dimension mismatch")
    dur = x.durations
    n = 6 * m

    rows, cols, vals = [], [], []

    def put(r, seg, vec):
        base = 6 * seg
        for j, v in enumerate(vec):
            if v != 0.0:
                rows.append(r)
                cols.append(base + j)
                vals.append(v)

    b = np.zeros((n, s))
    # start block: position, velocity, acceleration of segment 0 at u=0
    for d in range(3):
        put(d, 0, basis_row(0.0, d))
    b[0] = x.q[:, 0]
    b[1] = bc.start[0]
    b[2] = bc.start[1]
    row = 3
    for j in range(1, m):
        D = dur[j - 1]
        put(row, j - 1, basis_row(D, 0))
        b[row] = x.q[:, j]
        for d in range(1, 5):
            put(row + d, j - 1, basis_row(D, d))
            put(row + d, j, -basis_row(0.0, d))
        put(row + 5, j, basis_row(0.0, 0))
        b[row + 5] = x.q[:, j]
        row += 6
    D = dur[m - 1]
    for d in range(3):
        put(row + d, m - 1, basis_row(D, d))
    b[row] = x.q[:, m]
    b[row + 1] = bc.end[0]
    b[row + 2] = bc.end[1]

    a = csc_matrix((vals, (rows, cols)), shape=(n, n))
    lu = splu(a, permc_spec="NATURAL")
    c = lu.solve(b)  # (6M, s)
    coeffs = np.ascontiguousarray(c.reshape(m, 6, s).transpose(2, 0, 1))
    knots = np.concatenate([[0.0], np.cumsum(dur)])
    q_rows, end_eval_rows = _system_layout(m)
    return PiecewiseTrajectory(coeffs, dur, knots, lu, q_rows, end_eval_rows)


def propagate_gradient(
    traj: PiecewiseTrajectory,
    dphi_dcoeffs: np.ndarray,
    dphi_ddur_direct: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Back out d(phi)/dq and d(phi)/dtau from coefficient-space gradients.

    dphi_dcoeffs is (s, M, 6); dphi_ddur_direct collects any explicit
    dependence of phi on the durations (integration limits, node spacing)
    before the chain through the interpolation system is added.
    """
    s, m, _ = traj.coeffs.shape
    rhs = np.ascontiguousarray(dphi_dcoeffs.transpose(1, 2, 0).reshape(6 * m, s))
    nu = traj._lu.solve(rhs, trans="T")  # (6M, s)

    dq = np.zeros((s, m + 1))
    for j, rws in enumerate(traj._q_rows):
        for r in rws:
            dq[:, j] += nu[r]

    ddur = np.zeros(m) if dphi_ddur_direct is None else np.array(dphi_ddur_direct, dtype=float)
    for i in range(m):
        D = traj.durations[i]
        for r, d in traj._end_eval_rows[i]:
            # d/dD of row (eval order d at u=D) applied to c is p^(d+1)(D)
            ddur[i] -= float(nu[r] @ (traj.coeffs[:, i, :] @ basis_row(D, d + 1)))
    dtau = ddur * traj.durations
    return dq, dtau


def energy_cost(traj: PiecewiseTrajectory, weights: Optional[np.ndarray] = None):
    """Integrated squared jerk, weighted per dimension.

    Returns (value, d/dcoeffs, d/ddurations_direct); the duration term is
    the Leibniz boundary contribution p'''(D)^2 only, ready for
    :func:`propagate_gradient`.
    """
    s, m, _ = traj.coeffs.shape
    w = np.ones(s) if weights is None else np.asarray(weights, dtype=float)
    c3 = 6.0 * traj.coeffs[:, :, 3]
    c4 = 24.0 * traj.coeffs[:, :, 4]
    c5 = 60.0 * traj.coeffs[:, :, 5]
    D = traj.durations[None, :]
    d2, d3, d4, d5 = D * D, D**3, D**4, D**5
    seg = (
        c3 * c3 * D
        + c3 * c4 * d2
        + (c4 * c4 + 2.0 * c3 * c5) * d3 / 3.0
        + c4 * c5 * d4 / 2.0
        + c5 * c5 * d5 / 5.0
    )
    value = float(np.sum(w[:, None] * seg))

    dcoeffs = np.zeros_like(traj.coeffs)
    da = 2.0 * c3 * D + c4 * d2 + 2.0 * c5 * d3 / 3.0
    db = c3 * d2 + 2.0 * c4 * d3 / 3.0 + c5 * d4 / 2.0
    dc = 2.0 * c3 * d3 / 3.0 + c4 * d4 / 2.0 + 2.0 * c5 * d5 / 5.0
    dcoeffs[:, :, 3] = 6.0 * w[:, None] * da
    dcoeffs[:, :, 4] = 24.0 * w[:, None] * db
    dcoeffs[:, :, 5] = 60.0 * w[:, None] * dc

    jerk_end = c3 + c4 * D + c5 * d2  # p'''(D) per dim per segment
    ddur = np.sum(w[:, None] * jerk_end * jerk_end, axis=0)
    return value, dcoeffs, ddur
