"""Trajectory construction checks.

Oracles used here:
  * a dense KKT solve of the jerk-energy QP (interpolation + C2 continuity
    constraints only) whose optimum must match the banded construction,
  * Gauss-Legendre quadrature for the energy integral (exact for the
    degree-4 squared-jerk integrand),
  * central finite differences through the whole solve for the adjoint.
"""

import numpy as np
import pytest

from camp.trajgen import (
    BoundaryCondition,
    DecisionVariables,
    basis_row,
    basis_rows,
    energy_cost,
    minco_solve,
    propagate_gradient,
)


def random_instance(rng, s=None, m=None, rest=True, tame=False):
    s = s or int(rng.integers(1, 9))
    m = m or int(rng.integers(1, 11))
    span, dmin = (3.0, 0.5) if tame else (5.0, 0.3)
    q = rng.uniform(-span, span, size=(s, m + 1))
    tau = rng.uniform(np.log(dmin), np.log(3.0), size=m)
    if rest:
        bc = BoundaryCondition.rest(s)
    else:
        bc = BoundaryCondition(rng.uniform(-1, 1, (2, s)), rng.uniform(-1, 1, (2, s)))
    return DecisionVariables(q, tau), bc


class TestConstruction:
    def test_rest_to_rest_quintic(self):
        x = DecisionVariables(np.array([[0.0, 1.0]]), np.array([0.0]))
        traj = minco_solve(x, BoundaryCondition.rest(1))
        # unit-time rest-to-rest minimum-jerk polynomial: 10 u^3 - 15 u^4 + 6 u^5
        assert np.allclose(traj.coeffs[0, 0], [0, 0, 0, 10, -15, 6], atol=1e-9)
        assert traj.eval(0.5)[0] == pytest.approx(0.5, abs=1e-12)
        assert traj.eval(0.0, 1)[0] == pytest.approx(0.0, abs=1e-12)
        assert traj.eval(1.0, 2)[0] == pytest.approx(0.0, abs=1e-10)

    def test_stationary_trajectory(self):
        x = DecisionVariables(np.full((3, 4), 2.5), np.zeros(3))
        traj = minco_solve(x, BoundaryCondition.rest(3))
        ts = np.linspace(0, traj.total_time, 17)
        assert np.allclose(traj.eval_many(ts, 0), 2.5, atol=1e-10)
        assert np.allclose(traj.eval_many(ts, 1), 0.0, atol=1e-10)
        assert energy_cost(traj)[0] == pytest.approx(0.0, abs=1e-12)

    def test_interpolation_and_smoothness(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            x, bc = random_instance(rng, rest=False)
            traj = minco_solve(x, bc)
            m = x.num_segments
            for j in range(m + 1):
                t = traj.knots[j]
                i = min(j, m - 1)
                u = t - traj.knots[i]
                val = traj.coeffs[:, i, :] @ basis_row(u, 0)
                assert np.max(np.abs(val - x.q[:, j])) < 1e-8
            # derivative jumps at interior knots, orders 1..4
            for j in range(1, m):
                dl = traj.durations[j - 1]
                for d in range(1, 5):
                    left = traj.coeffs[:, j - 1, :] @ basis_row(dl, d)
                    right = traj.coeffs[:, j, :] @ basis_row(0.0, d)
                    assert np.max(np.abs(left - right)) < 1e-8
            # boundary derivative stacks
            assert np.allclose(traj.eval(0.0, 1), bc.start[0], atol=1e-8)
            assert np.allclose(traj.eval(0.0, 2), bc.start[1], atol=1e-8)
            assert np.allclose(traj.eval(traj.total_time, 1), bc.end[0], atol=1e-8)
            assert np.allclose(traj.eval(traj.total_time, 2), bc.end[1], atol=1e-8)

    def test_matches_dense_qp_oracle(self):
        """Two segments, 12 unknowns, 10 equality constraints, 2 free DOF.

        The oracle minimizes the jerk energy subject to interpolation and
        C0..C2 continuity only; the optimum must coincide with the banded
        construction (which additionally produces C3/C4 continuity as the
        natural optimality conditions).
        """
        rng = np.random.default_rng(9)
        for _ in range(10):
            x, bc = random_instance(rng, s=1, m=2, rest=False)
            traj = minco_solve(x, bc)
            d0, d1 = traj.durations

            def hess_block(D):
                qb = np.zeros((6, 6))
                for j in range(3, 6):
                    for k in range(3, 6):
                        p = j + k - 6
                        qb[j, k] = basis_row(1.0, 3)[j] * basis_row(1.0, 3)[k] * D ** (p + 1) / (p + 1)
                return qb

            Q = np.zeros((12, 12))
            Q[:6, :6] = hess_block(d0)
            Q[6:, 6:] = hess_block(d1)
            rows = []
            rhs = []

            def con(seg, u, order, value):
                r = np.zeros(12)
                r[6 * seg: 6 * seg + 6] = basis_row(u, order)
                rows.append(r)
                rhs.append(value)

            con(0, 0.0, 0, x.q[0, 0])
            con(0, 0.0, 1, bc.start[0, 0])
            con(0, 0.0, 2, bc.start[1, 0])
            con(0, d0, 0, x.q[0, 1])
            con(1, 0.0, 0, x.q[0, 1])
            for d in (1, 2):
                r = np.zeros(12)
                r[:6] = basis_row(d0, d)
                r[6:] = -basis_row(0.0, d)
                rows.append(r)
                rhs.append(0.0)
            con(1, d1, 0, x.q[0, 2])
            con(1, d1, 1, bc.end[0, 0])
            con(1, d1, 2, bc.end[1, 0])

            G = np.asarray(rows)
            h = np.asarray(rhs)
            kkt = np.block([[Q, G.T], [G, np.zeros((10, 10))]])
            sol = np.linalg.solve(kkt, np.concatenate([np.zeros(12), h]))
            c_oracle = sol[:12].reshape(2, 6)
            assert np.max(np.abs(traj.coeffs[0] - c_oracle)) < 1e-6


class TestEnergy:
    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(3)
        x, bc = random_instance(rng, s=4, m=3, rest=False)
        traj = minco_solve(x, bc)
        w = rng.uniform(0.2, 2.0, size=4)
        value, _, _ = energy_cost(traj, w)
        # Gauss-Legendre with 8 points is exact for the degree-4 integrand
        nodes, wts = np.polynomial.legendre.leggauss(8)
        total = 0.0
        for i, D in enumerate(traj.durations):
            u = 0.5 * D * (nodes + 1.0)
            jerk = traj.coeffs[:, i, :] @ basis_rows(u, 3).T  # (s, 8)
            total += 0.5 * D * np.sum(w[:, None] * jerk**2 @ np.diag(wts)).item()
        assert value == pytest.approx(total, rel=1e-10)

    def test_weight_linearity(self):
        rng = np.random.default_rng(5)
        x, bc = random_instance(rng, s=3, m=2)
        traj = minco_solve(x, bc)
        parts = [energy_cost(traj, np.eye(3)[d])[0] for d in range(3)]
        w = np.array([0.5, 2.0, 1.3])
        assert energy_cost(traj, w)[0] == pytest.approx(float(w @ parts), rel=1e-12)

    def test_time_scaling_power(self):
        """Scaling all durations by a scales the rest-to-rest energy by a^-5."""
        rng = np.random.default_rng(8)
        x, bc = random_instance(rng, s=2, m=4, rest=True)
        e1 = energy_cost(minco_solve(x, bc))[0]
        for a in (0.5, 2.0, 3.7):
            xs = DecisionVariables(x.q, x.tau + np.log(a))
            e2 = energy_cost(minco_solve(xs, bc))[0]
            assert e2 == pytest.approx(a ** (-5) * e1, rel=1e-9)


class TestGradients:
    @staticmethod
    def phi_and_grad(x, bc, w_samples, rel_pos, order_mix):
        """Scalar functional: energy plus random linear samples of the stack."""
        traj = minco_solve(x, bc)
        e, dcoef, ddur = energy_cost(traj)
        value = e
        m = x.num_segments
        for i in range(m):
            D = traj.durations[i]
            for r, d, w in zip(rel_pos, order_mix, w_samples[i]):
                u = r * D
                bvec = basis_row(u, d)
                sample = traj.coeffs[:, i, :] @ bvec  # (s,)
                value += float(w @ sample)
                dcoef[:, i, :] += np.outer(w, bvec)
                # node position u = r*D moves with the duration
                nxt = traj.coeffs[:, i, :] @ basis_row(u, d + 1)
                ddur[i] += float(w @ nxt) * r
        return value, traj, dcoef, ddur

    def test_propagate_gradient_finite_difference(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            # tame scales keep the FD oracle's cancellation noise below tol
            x, bc = random_instance(rng, rest=False, tame=True)
            s, m = x.num_dims, x.num_segments
            rel_pos = rng.uniform(0.05, 0.95, size=3)
            order_mix = rng.integers(0, 3, size=3)
            w_samples = rng.uniform(-1, 1, size=(m, 3, s))

            value, traj, dcoef, ddur = self.phi_and_grad(x, bc, w_samples, rel_pos, order_mix)
            dq, dtau = propagate_gradient(traj, dcoef, ddur)

            # h balances truncation against cancellation: values reach ~1e5
            h = 1e-5

            def phi_of(q, tau):
                xi = DecisionVariables(q, tau)
                return self.phi_and_grad(xi, bc, w_samples, rel_pos, order_mix)[0]

            err = 0.0
            for d in range(s):
                for j in range(m + 1):
                    qp, qm = x.q.copy(), x.q.copy()
                    qp[d, j] += h
                    qm[d, j] -= h
                    fd = (phi_of(qp, x.tau) - phi_of(qm, x.tau)) / (2 * h)
                    err = max(err, abs(fd - dq[d, j]) / max(1.0, abs(fd), abs(dq[d, j])))
            for i in range(m):
                tp, tm = x.tau.copy(), x.tau.copy()
                tp[i] += h
                tm[i] -= h
                fd = (phi_of(x.q, tp) - phi_of(x.q, tm)) / (2 * h)
                err = max(err, abs(fd - dtau[i]) / max(1.0, abs(fd), abs(dtau[i])))
            assert err < 1e-5


class TestEval:
    def test_domain_error(self):
        x = DecisionVariables(np.array([[0.0, 1.0]]), np.array([0.0]))
        traj = minco_solve(x, BoundaryCondition.rest(1))
        with pytest.raises(ValueError):
            traj.eval(1.5)
        with pytest.raises(ValueError):
            traj.eval(-0.5)
        traj.eval(1.0 + 1e-10)  # slack is fine

    def test_derivative_consistency(self):
        rng = np.random.default_rng(2)
        x, bc = random_instance(rng, s=2, m=3, rest=False)
        traj = minco_solve(x, bc)
        h = 1e-6
        for t in np.linspace(0.1, traj.total_time - 0.1, 7):
            v = traj.eval(t, 1)
            fd = (traj.eval(t + h) - traj.eval(t - h)) / (2 * h)
            assert np.allclose(v, fd, atol=1e-4)
