"""Geometry checks: GJK vs a boundary-sampling oracle, signed gaps vs finite
differences, distance fields vs a brute-force nearest-occupied-cell scan."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from camp.geometry import (
    GridMap,
    build_esdf,
    disc,
    disc_disc_gap_batch,
    disc_polygon_gap_batch,
    empty_grid,
    gjk_distance,
    point_polygon_signed_distance,
    polygon,
    signed_gap,
    square,
)


def random_shape(rng, allow_polygon=True):
    center = rng.uniform(-3.0, 3.0, size=2)
    if allow_polygon and rng.random() < 0.5:
        k = rng.integers(3, 8)
        pts = rng.uniform(-1.0, 1.0, size=(k + 4, 2))
        hull = _convex_hull(pts)
        if len(hull) < 3:
            return disc(center, rng.uniform(0.2, 1.0))
        return polygon(center, hull)
    return disc(center, rng.uniform(0.2, 1.0))


def _convex_hull(pts):
    """Andrew's monotone chain, CCW output."""
    pts = sorted(map(tuple, pts))
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def boundary_points(shape, spacing=0.01):
    """Dense boundary sampling, the independent distance oracle."""
    if shape.kind == "disc":
        n = max(int(np.ceil(2 * np.pi * max(shape.radius, 1e-6) / spacing)), 16)
        ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return shape.position + shape.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    verts = shape.world_vertices()
    out = []
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        n = max(int(np.ceil(np.linalg.norm(b - a) / spacing)), 2)
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out, axis=0)


def oracle_distance(a, b, spacing=0.01):
    pa = boundary_points(a, spacing)
    pb = boundary_points(b, spacing)
    d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.min()))


class TestGjk:
    def test_two_unit_discs(self):
        res = gjk_distance(disc([0.0, 0.0], 1.0), disc([3.0, 0.0], 1.0))
        assert res.distance == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(res.witness_a, [1.0, 0.0], atol=1e-9)
        assert np.allclose(res.witness_b, [2.0, 0.0], atol=1e-9)
        assert np.allclose(res.normal, [-1.0, 0.0], atol=1e-9)

    def test_disc_vs_square(self):
        res = gjk_distance(disc([0.0, 0.0], 0.5), square([2.0, 0.0], 1.0))
        assert res.distance == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(res.witness_a, [0.5, 0.0], atol=1e-8)
        assert np.allclose(res.witness_b, [1.5, 0.0], atol=1e-8)

    def test_overlap_reports_zero(self):
        res = gjk_distance(disc([0.0, 0.0], 1.0), disc([0.5, 0.0], 1.0))
        assert res.distance == 0.0
        res = gjk_distance(square([0.0, 0.0], 2.0), square([0.5, 0.3], 2.0))
        assert res.distance == 0.0

    def test_square_corner_to_corner(self):
        # diagonal separation: closest points are the facing corners
        res = gjk_distance(square([0.0, 0.0], 1.0), square([2.0, 2.0], 1.0))
        expect = np.hypot(1.0, 1.0)
        assert res.distance == pytest.approx(expect, abs=1e-9)

    def test_boundary_sampling_oracle(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 100:
            a = random_shape(rng)
            b = random_shape(rng)
            res = gjk_distance(a, b)
            if res.distance <= 1e-6:
                continue  # oracle needs separation
            assert res.distance == pytest.approx(oracle_distance(a, b), abs=1e-3)
            checked += 1

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, b = random_shape(rng), random_shape(rng)
            assert gjk_distance(a, b).distance == pytest.approx(
                gjk_distance(b, a).distance, abs=1e-9
            )

    @settings(max_examples=40, deadline=None)
    @given(
        tx=st.floats(-50, 50, allow_nan=False),
        ty=st.floats(-50, 50, allow_nan=False),
        seed=st.integers(0, 10_000),
    )
    def test_translation_invariance(self, tx, ty, seed):
        rng = np.random.default_rng(seed)
        a, b = random_shape(rng), random_shape(rng)
        t = np.array([tx, ty])
        d0 = gjk_distance(a, b).distance
        d1 = gjk_distance(a.at(a.position + t), b.at(b.position + t)).distance
        assert d1 == pytest.approx(d0, abs=1e-8, rel=1e-8)


class TestSignedGap:
    def test_disc_disc_values(self):
        gap, ga, gb = signed_gap(disc([0.0, 0.0], 0.5), disc([2.0, 0.0], 0.5))
        assert gap == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(ga, [-1.0, 0.0])
        assert np.allclose(gb, [1.0, 0.0])
        gap, _, _ = signed_gap(disc([0.0, 0.0], 1.0), disc([1.0, 0.0], 1.0))
        assert gap == pytest.approx(-1.0, abs=1e-12)

    def test_disc_inside_polygon(self):
        # disc center at the middle of a 2x2 square: boundary is 1.0 away
        gap, _, _ = signed_gap(disc([0.0, 0.0], 0.25), square([0.0, 0.0], 2.0))
        assert gap == pytest.approx(-1.25, abs=1e-12)

    def test_matches_gjk_when_separated(self):
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 80:
            a = disc(rng.uniform(-3, 3, 2), rng.uniform(0.1, 0.8))
            b = random_shape(rng)
            gap, _, _ = signed_gap(a, b)
            if gap <= 1e-6:
                continue
            assert gap == pytest.approx(gjk_distance(a, b).distance, abs=1e-9)
            checked += 1

    def test_gradients_by_finite_difference(self):
        rng = np.random.default_rng(23)
        h = 1e-6
        checked = 0
        while checked < 60:
            a = disc(rng.uniform(-2, 2, 2), rng.uniform(0.1, 0.6))
            b = random_shape(rng)
            gap, ga, gb = signed_gap(a, b)
            if abs(gap) < 1e-3:  # keep away from the touching kink
                continue
            for shape_idx, grad in ((0, ga), (1, gb)):
                for k in range(2):
                    e = np.zeros(2)
                    e[k] = h
                    if shape_idx == 0:
                        gp = signed_gap(a.at(a.position + e), b)[0]
                        gm = signed_gap(a.at(a.position - e), b)[0]
                    else:
                        gp = signed_gap(a, b.at(b.position + e))[0]
                        gm = signed_gap(a, b.at(b.position - e))[0]
                    assert (gp - gm) / (2 * h) == pytest.approx(grad[k], abs=2e-5)
            checked += 1

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        sq = square([0.0, 0.0], 1.2)
        pd = rng.uniform(-3, 3, size=(200, 2))
        pp = rng.uniform(-3, 3, size=(200, 2))
        gap, grad, _ = disc_polygon_gap_batch(pd, 0.3, pp, sq.vertices)
        for i in range(0, 200, 7):
            g, gd, _ = signed_gap(disc(pd[i], 0.3), sq.at(pp[i]))
            assert gap[i] == pytest.approx(g, abs=1e-12)
            assert np.allclose(grad[i], gd, atol=1e-12)
        gap2, grad2 = disc_disc_gap_batch(pd, 0.3, pp, 0.5)
        for i in range(0, 200, 7):
            g, gd, _ = signed_gap(disc(pd[i], 0.3), disc(pp[i], 0.5))
            assert gap2[i] == pytest.approx(g, abs=1e-12)
            assert np.allclose(grad2[i], gd, atol=1e-12)


class TestPointPolygon:
    def test_signed_distance_square(self):
        phi, grad = point_polygon_signed_distance(np.array([2.0, 0.0]), square([0, 0], 2.0).vertices)
        assert phi == pytest.approx(1.0)
        assert np.allclose(grad, [1.0, 0.0])
        phi, grad = point_polygon_signed_distance(np.array([0.2, 0.0]), square([0, 0], 2.0).vertices)
        assert phi == pytest.approx(-0.8)
        assert np.allclose(grad, [1.0, 0.0])


def brute_force_edt(cells, resolution):
    """Independent O(cells x occupied) scan: the distance-field oracle."""
    occ = np.argwhere(cells)
    h, w = cells.shape
    out = np.full((h, w), np.hypot(w * resolution, h * resolution))
    if len(occ) == 0:
        return out
    ys, xs = np.mgrid[0:h, 0:w]
    for oy, ox in occ:
        d = np.hypot((xs - ox) * resolution, (ys - oy) * resolution)
        out = np.minimum(out, d)
    return out


class TestEsdf:
    def test_single_occupied_cell(self):
        g = empty_grid(1.0, [0.0, 0.0], 11, 11)
        g.cells[5, 5] = 1
        e = build_esdf(g)
        assert e.distance[5, 5] == 0.0
        assert e.distance[0, 0] == pytest.approx(np.hypot(5.0, 5.0), abs=1e-9)
        assert e.distance[5, 0] == pytest.approx(5.0, abs=1e-9)

    def test_free_map_capped_at_diagonal(self):
        g = empty_grid(0.5, [0.0, 0.0], 8, 6)
        e = build_esdf(g)
        assert np.all(e.distance == np.hypot(4.0, 3.0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            g = empty_grid(0.1, [0.0, 0.0], 32, 32)
            g.cells[rng.random((32, 32)) < 0.07] = 1
            e = build_esdf(g)
            oracle = brute_force_edt(g.cells == 1, 0.1)
            occ_free_cap = np.minimum(oracle, np.hypot(3.2, 3.2))
            assert np.max(np.abs(e.distance - occ_free_cap)) < 1e-9

    def test_movable_treatment(self):
        g = empty_grid(1.0, [0.0, 0.0], 5, 5)
        g.cells[2, 2] = 2  # movable object 0
        free = build_esdf(g, treat_movable_as="free")
        occ = build_esdf(g, treat_movable_as="occupied")
        assert np.all(free.distance == np.hypot(5.0, 5.0))
        assert occ.distance[2, 2] == 0.0

    def test_query_interpolation(self):
        g = empty_grid(1.0, [0.0, 0.0], 4, 4)
        g.cells[0, 0] = 1
        e = build_esdf(g)
        # at a cell center the interpolation returns the stored value
        d, _, oob = e.query_one([2.5, 0.5])
        assert d == pytest.approx(e.distance[0, 2])
        assert not oob
        # halfway between two centers: the average of the two stored values
        d, _, _ = e.query_one([2.0, 0.5])
        assert d == pytest.approx(0.5 * (e.distance[0, 1] + e.distance[0, 2]))

    def test_query_gradient_finite_difference(self):
        rng = np.random.default_rng(2)
        g = empty_grid(0.25, [-1.0, -1.0], 16, 16)
        g.cells[rng.random((16, 16)) < 0.1] = 1
        e = build_esdf(g)
        h = 1e-7
        for _ in range(40):
            p = rng.uniform(-0.8, 2.8, size=2)
            # stay away from interpolation cell edges where the gradient jumps
            gcoord = (p - e.origin) / e.resolution - 0.5
            if np.any(np.abs(gcoord - np.round(gcoord)) < 1e-3):
                continue
            _, grad, _ = e.query_one(p)
            for k in range(2):
                step = np.zeros(2)
                step[k] = h
                dp = e.query_one(p + step)[0]
                dm = e.query_one(p - step)[0]
                assert (dp - dm) / (2 * h) == pytest.approx(grad[k], abs=1e-5)

    def test_out_of_bounds_flagged(self):
        g = empty_grid(1.0, [0.0, 0.0], 4, 4)
        g.cells[1, 1] = 1
        e = build_esdf(g)
        _, grad, oob = e.query_one([10.0, 2.0])
        assert oob
        _, _, oob = e.query_one([2.0, 2.0])
        assert not oob

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1_000))
    def test_lipschitz_with_interpolation_slack(self, seed):
        rng = np.random.default_rng(seed)
        g = empty_grid(0.2, [0.0, 0.0], 20, 20)
        g.cells[rng.random((20, 20)) < 0.1] = 1
        e = build_esdf(g)
        p = rng.uniform(0.1, 3.9, size=(30, 2))
        q = rng.uniform(0.1, 3.9, size=(30, 2))
        dp = e.query(p).distance
        dq = e.query(q).distance
        slack = 2 * g.resolution
        assert np.all(np.abs(dp - dq) <= np.linalg.norm(p - q, axis=1) + slack)


class TestGridMap:
    def test_row_codec_round_trip(self):
        rng = np.random.default_rng(4)
        g = empty_grid(0.05, [-1.0, -3.0], 30, 20)
        g.cells[rng.random((20, 30)) < 0.2] = 1
        g.cells[3, 4] = 2
        g.cells[10, 22] = 3
        rows = g.to_rows()
        g2 = GridMap.from_rows(g.resolution, g.origin, rows)
        assert np.array_equal(g.cells, g2.cells)
        assert rows == g2.to_rows()

    def test_row_characters(self):
        g = empty_grid(1.0, [0.0, 0.0], 3, 1)
        g.cells[0, 0] = 1
        g.cells[0, 2] = 2
        assert g.to_rows() == ["#.1"]

    def test_fill_disc_and_polygon(self):
        g = empty_grid(0.1, [0.0, 0.0], 20, 20)
        g.fill_disc(np.array([1.0, 1.0]), 0.3, 1)
        cx, cy = g.world_to_cell([1.0, 1.0])
        assert g.cells[cy, cx] == 1
        assert g.cells[0, 0] == 0
        g2 = empty_grid(0.1, [0.0, 0.0], 20, 20)
        g2.fill_shape(square([1.0, 1.0], 0.5), 1)
        assert g2.cells[g2.world_to_cell([1.0, 1.0])[1], g2.world_to_cell([1.0, 1.0])[0]] == 1
        assert g2.cells[g2.world_to_cell([1.4, 1.0])[1], g2.world_to_cell([1.4, 1.0])[0]] == 0

    def test_world_cell_round_trip(self):
        g = empty_grid(0.05, [-1.0, -3.0], 160, 120)
        ix, iy = g.world_to_cell([0.0, 0.0])
        c = g.cell_center(ix, iy)
        assert np.all(np.abs(c - 0.025) <= 0.025 + 1e-12)
