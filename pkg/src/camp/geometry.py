"""Convex shapes, pairwise distance queries, occupancy grids and distance fields.

Everything is 2-D and stays in numpy. Shapes are discs or convex polygons;
distance queries return enough to build collision residuals (value, witness
points, gradients w.r.t. the shape positions). Grids hold static cells and
labelled movable cells; an unsigned Euclidean distance field built on the
grid answers clearance queries with bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

# Cell codes inside GridMap.cells.
FREE = 0
STATIC = 1
MOVABLE_BASE = 2  # cells >= MOVABLE_BASE hold movable object index + MOVABLE_BASE

# Row codec: movable object i is written as MOVABLE_IDS[i].
MOVABLE_IDS = "123456789abcdefghijklmnopqrstuvwxyz"


# ---------------------------------------------------------------------------
# shapes


@dataclass(frozen=True, eq=False)
class ConvexShape:
    """A disc or a convex polygon at a world position.

    Polygons store vertices in their local frame, counter-clockwise;
    ``heading`` rotates them. Discs ignore ``vertices`` and ``heading``.
    Instances are immutable; ``at`` returns a moved copy.
    """

    kind: str  # "disc" | "polygon"
    position: np.ndarray  # (2,) world frame, m
    radius: float = 0.0  # disc only, m
    vertices: Optional[np.ndarray] = None  # (V, 2) local frame, CCW
    heading: float = 0.0  # rad

    def at(self, position) -> "ConvexShape":
        return replace(self, position=np.asarray(position, dtype=float))

    def world_vertices(self) -> np.ndarray:
        """Polygon vertices in the world frame, (V, 2)."""
        if self.kind != "polygon":
            raise ValueError("world_vertices is polygon-only")
        return self.position + self.rotated_vertices()

    def rotated_vertices(self) -> np.ndarray:
        """Polygon vertices rotated by heading but not translated."""
        c, s = np.cos(self.heading), np.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        return self.vertices @ rot.T

    def support(self, direction: np.ndarray) -> np.ndarray:
        """Farthest point of the shape in the given direction (world frame)."""
        d = np.asarray(direction, dtype=float)
        if self.kind == "disc":
            n = np.linalg.norm(d)
            if n == 0.0:
                return self.position + np.array([self.radius, 0.0])
            return self.position + self.radius * d / n
        w = self.world_vertices()
        return w[np.argmax(w @ d)]

    def bounding_radius(self) -> float:
        if self.kind == "disc":
            return self.radius
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))


def disc(position, radius: float) -> ConvexShape:
    return ConvexShape("disc", np.asarray(position, dtype=float), radius=float(radius))


def polygon(position, vertices, heading: float = 0.0) -> ConvexShape:
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("polygon needs (V, 2) vertices with V >= 3")
    if _polygon_area(verts) <= 0.0:
        raise ValueError("polygon vertices must be counter-clockwise")
    return ConvexShape(
        "polygon", np.asarray(position, dtype=float), vertices=verts, heading=heading
    )


def square(position, side: float) -> ConvexShape:
    h = 0.5 * float(side)
    verts = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
    return polygon(position, verts)


def _polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------------------
# GJK distance between convex shapes


class GjkResult(NamedTuple):
    distance: float  # m, 0 when touching or overlapping
    witness_a: np.ndarray  # closest point on a (2,)
    witness_b: np.ndarray  # closest point on b (2,)
    normal: np.ndarray  # unit vector from witness_b toward witness_a


def _core_points(shape: ConvexShape):
    """Point set of the shape with its disc radius stripped off."""
    if shape.kind == "disc":
        return shape.position.reshape(1, 2), shape.radius
    return shape.world_vertices(), 0.0


def _closest_on_segment(a: np.ndarray, b: np.ndarray):
    """Closest point to the origin on segment ab with weights and kept indices."""
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip(-(a @ ab) / denom, 0.0, 1.0))
    if t <= 0.0:
        return a, np.array([1.0]), [0]
    if t >= 1.0:
        return b, np.array([1.0]), [1]
    return a + t * ab, np.array([1.0 - t, t]), [0, 1]


def _closest_on_simplex(simplex: np.ndarray):
    """Closest point to the origin on a 1/2/3-point simplex.

    Returns (point, barycentric weights, kept vertex indices). Triangles
    that contain the origin report the origin with all three kept.
    """
    if len(simplex) == 1:
        return simplex[0], np.array([1.0]), [0]
    if len(simplex) == 2:
        return _closest_on_segment(simplex[0], simplex[1])
    a, b, c = simplex
    d1, d2 = b - a, c - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) > 1e-14:
        v = -a
        l1 = (v[0] * d2[1] - v[1] * d2[0]) / denom
        l2 = (d1[0] * v[1] - d1[1] * v[0]) / denom
        if l1 >= -1e-12 and l2 >= -1e-12 and l1 + l2 <= 1.0 + 1e-12:
            return np.zeros(2), np.array([1.0 - l1 - l2, l1, l2]), [0, 1, 2]
    best = None
    for i, j in ((0, 1), (0, 2), (1, 2)):
        p, w, kept = _closest_on_segment(simplex[i], simplex[j])
        d = float(p @ p)
        if best is None or d < best[0] - 1e-15:
            best = (d, p, w, [(i, j)[k] for k in kept])
    return best[1], best[2], best[3]


def gjk_distance(a: ConvexShape, b: ConvexShape, max_iter: int = 64) -> GjkResult:
    """Distance between two convex shapes with witness points.

    Runs GJK on the disc-reduced cores and re-inflates the radii, so disc
    pairs and disc-polygon pairs stay exact. Overlapping cores give
    distance 0 with a center-to-center fallback normal.
    """
    pts_a, ra = _core_points(a)
    pts_b, rb = _core_points(b)

    def support(d):
        ia = int(np.argmax(pts_a @ d))
        ib = int(np.argmax(pts_b @ (-d)))
        return pts_a[ia] - pts_b[ib], pts_a[ia], pts_b[ib]

    d0 = a.position - b.position
    if np.linalg.norm(d0) < 1e-12:
        d0 = np.array([1.0, 0.0])
    m, sa, sb = support(d0)
    simplex, sup_a, sup_b = [m], [sa], [sb]
    closest, weights = m, np.array([1.0])
    contained = False
    for _ in range(max_iter):
        closest, weights, kept = _closest_on_simplex(np.asarray(simplex))
        simplex = [simplex[k] for k in kept]
        sup_a = [sup_a[k] for k in kept]
        sup_b = [sup_b[k] for k in kept]
        dist = float(np.linalg.norm(closest))
        if dist < 1e-12 or len(simplex) == 3:
            contained = True
            break
        w, sa, sb = support(-closest)
        # no more progress toward the origin: converged
        if float(closest @ closest) - float(closest @ w) <= 1e-12 * max(1.0, dist):
            break
        simplex.append(w)
        sup_a.append(sa)
        sup_b.append(sb)

    if contained:
        delta = a.position - b.position
        n = np.linalg.norm(delta)
        normal = delta / n if n > 1e-12 else np.array([1.0, 0.0])
        mid = 0.5 * (a.position + b.position)
        return GjkResult(0.0, mid.copy(), mid.copy(), normal)

    core_dist = float(np.linalg.norm(closest))
    wa = np.zeros(2)
    wb = np.zeros(2)
    for w, pa, pb in zip(weights, sup_a, sup_b):
        wa += w * pa
        wb += w * pb
    normal = closest / core_dist  # from b's core toward a's core
    witness_a = wa - ra * normal
    witness_b = wb + rb * normal
    distance = core_dist - ra - rb
    if distance <= 0.0:
        mid = 0.5 * (witness_a + witness_b)
        return GjkResult(0.0, mid, mid.copy(), normal)
    return GjkResult(distance, witness_a, witness_b, normal)


# ---------------------------------------------------------------------------
# signed gaps with gradients


def points_polygon_signed_distance(pts: np.ndarray, verts: np.ndarray):
    """Signed distance of points to a CCW convex polygon, negative inside.

    Parameters
    ----------
    pts : (n, 2) query points.
    verts : (V, 2) polygon vertices, counter-clockwise.

    Returns
    -------
    phi : (n,) signed distances.
    grad : (n, 2) outward unit gradients d(phi)/d(pts).
    closest_edge : (n,) index of the nearest boundary feature, usable as a
        nonsmoothness signature.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = len(pts)
    v0 = verts
    v1 = np.roll(verts, -1, axis=0)
    e = v1 - v0  # (V, 2)
    elen2 = np.maximum(np.sum(e * e, axis=1), 1e-18)
    rel = pts[:, None, :] - v0[None, :, :]  # (n, V, 2)
    t = np.clip(np.einsum("nvk,vk->nv", rel, e) / elen2, 0.0, 1.0)
    cp = v0[None, :, :] + t[:, :, None] * e[None, :, :]  # (n, V, 2)
    diff = pts[:, None, :] - cp
    d = np.sqrt(np.sum(diff * diff, axis=2))  # (n, V)
    # cross(e, rel) >= 0 on every edge means left of every CCW edge: inside
    cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
    inside = np.all(cross >= 0.0, axis=1)
    imin = np.argmin(d, axis=1)
    rows = np.arange(n)
    dmin = d[rows, imin]
    dirs = diff[rows, imin]  # p - closest point, points away from boundary
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = dirs / dmin[:, None]
    # on-boundary fallback: use the edge's outward normal
    degenerate = dmin < 1e-12
    if np.any(degenerate):
        nrm = np.stack([e[:, 1], -e[:, 0]], axis=1)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        unit[degenerate] = nrm[imin[degenerate]]
    sign = np.where(inside, -1.0, 1.0)
    phi = sign * dmin
    grad = sign[:, None] * unit
    grad[degenerate] = unit[degenerate]
    return phi, grad, imin


def point_polygon_signed_distance(p: np.ndarray, verts: np.ndarray):
    """Scalar wrapper around :func:`points_polygon_signed_distance`."""
    phi, grad, _ = points_polygon_signed_distance(np.asarray(p, float).reshape(1, 2), verts)
    return float(phi[0]), grad[0]


def signed_gap(a: ConvexShape, b: ConvexShape):
    """Signed clearance between two shapes and its position gradients.

    Positive means separated, negative penetration depth. At least one
    shape should be a disc; polygon-polygon falls back to the unsigned
    GJK distance with zero gradients inside overlap.

    Returns (gap, grad_a, grad_b), gradients w.r.t. the shape positions.
    """
    if a.kind == "disc" and b.kind == "disc":
        delta = a.position - b.position
        dist = float(np.linalg.norm(delta))
        g = delta / dist if dist > 1e-12 else np.array([1.0, 0.0])
        return dist - a.radius - b.radius, g, -g
    if a.kind == "disc" and b.kind == "polygon":
        gap, gb, ga = signed_gap(b, a)
        return gap, ga, gb
    if a.kind == "polygon" and b.kind == "disc":
        phi, grad_p = point_polygon_signed_distance(
            b.position - a.position, a.rotated_vertices()
        )
        return phi - b.radius, -grad_p, grad_p
    res = gjk_distance(a, b)
    if res.distance <= 0.0:
        return 0.0, np.zeros(2), np.zeros(2)
    return res.distance, res.normal.copy(), -res.normal.copy()


def disc_disc_gap_batch(pa: np.ndarray, ra: float, pb: np.ndarray, rb: float):
    """Batched disc-disc signed gap. pa, pb are (n, 2).

    Returns (gap, grad_a) with grad_b = -grad_a implied.
    """
    delta = pa - pb
    dist = np.linalg.norm(delta, axis=1)
    safe = np.maximum(dist, 1e-12)
    grad = delta / safe[:, None]
    grad[dist < 1e-12] = np.array([1.0, 0.0])
    return dist - (ra + rb), grad


def disc_polygon_gap_batch(p_disc: np.ndarray, r_disc: float, p_poly: np.ndarray,
                           local_verts: np.ndarray):
    """Batched disc-vs-translating-polygon signed gap.

    p_disc, p_poly are (n, 2); local_verts already carries the heading.
    Returns (gap, grad_disc, feature) with grad_poly = -grad_disc implied.
    """
    phi, grad, feature = points_polygon_signed_distance(p_disc - p_poly, local_verts)
    return phi - r_disc, grad, feature


# ---------------------------------------------------------------------------
# occupancy grid


@dataclass(eq=False)
class GridMap:
    """Axis-aligned occupancy grid.

    ``cells[iy, ix]`` covers the square whose center is
    ``origin + ((ix + 0.5), (iy + 0.5)) * resolution``; row 0 is the
    bottom of the map. Codes: 0 free, 1 static, >= 2 movable object
    ``code - 2``.
    """

    resolution: float  # m per cell
    origin: np.ndarray  # (2,) world coords of the lower-left map corner, m
    cells: np.ndarray  # (H, W) int8

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.cells = np.asarray(self.cells)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def copy(self) -> "GridMap":
        return GridMap(self.resolution, self.origin.copy(), self.cells.copy())

    def cell_center(self, ix, iy) -> np.ndarray:
        return self.origin + (np.stack([np.asarray(ix), np.asarray(iy)], axis=-1) + 0.5) * self.resolution

    def world_to_cell(self, point) -> tuple[int, int]:
        p = (np.asarray(point, dtype=float) - self.origin) / self.resolution
        return int(np.floor(p[0])), int(np.floor(p[1]))

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    # -- rasterization ---------------------------------------------------

    def _center_grid(self):
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return xs, ys

    def fill_disc(self, center, radius: float, code: int) -> None:
        """Mark every cell whose center lies inside the disc."""
        xs, ys = self._center_grid()
        dx = xs[None, :] - center[0]
        dy = ys[:, None] - center[1]
        mask = dx * dx + dy * dy <= radius * radius + 1e-12
        self.cells[mask] = code

    def fill_polygon(self, shape: ConvexShape, code: int) -> None:
        """Mark every cell whose center lies inside the convex polygon."""
        verts = shape.world_vertices()
        xs, ys = self._center_grid()
        lo = np.maximum(((verts.min(axis=0) - self.origin) / self.resolution).astype(int) - 1, 0)
        hi = np.minimum(
            ((verts.max(axis=0) - self.origin) / self.resolution).astype(int) + 2,
            [self.width, self.height],
        )
        if np.any(lo >= hi):
            return
        px, py = np.meshgrid(xs[lo[0]:hi[0]], ys[lo[1]:hi[1]])
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        v0 = verts
        v1 = np.roll(verts, -1, axis=0)
        e = v1 - v0
        rel = pts[:, None, :] - v0[None, :, :]
        cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
        inside = np.all(cross >= -1e-12, axis=1).reshape(px.shape)
        sub = self.cells[lo[1]:hi[1], lo[0]:hi[0]]
        sub[inside] = code

    def fill_shape(self, shape: ConvexShape, code: int) -> None:
        if shape.kind == "disc":
            self.fill_disc(shape.position, shape.radius, code)
        else:
            self.fill_polygon(shape, code)

    # -- row codec (lossless) --------------------------------------------

    def to_rows(self) -> list[str]:
        """Encode cells as strings, row 0 first (bottom of the map)."""
        lut = {FREE: ".", STATIC: "#"}
        rows = []
        for iy in range(self.height):
            chars = []
            for code in self.cells[iy]:
                code = int(code)
                if code in lut:
                    chars.append(lut[code])
                else:
                    chars.append(MOVABLE_IDS[code - MOVABLE_BASE])
            rows.append("".join(chars))
        return rows

    @staticmethod
    def from_rows(resolution: float, origin, rows: list[str]) -> "GridMap":
        height = len(rows)
        width = len(rows[0]) if rows else 0
        cells = np.zeros((height, width), dtype=np.int8)
        for iy, row in enumerate(rows):
            if len(row) != width:
                raise ValueError("ragged rows in grid map")
            for ix, ch in enumerate(row):
                if ch == ".":
                    code = FREE
                elif ch == "#":
                    code = STATIC
                else:
                    idx = MOVABLE_IDS.find(ch)
                    if idx < 0:
                        raise ValueError(f"unknown map cell character {ch!r}")
                    code = MOVABLE_BASE + idx
                cells[iy, ix] = code
        return GridMap(float(resolution), np.asarray(origin, dtype=float), cells)


def empty_grid(resolution: float, origin, width: int, height: int) -> GridMap:
    return GridMap(float(resolution), np.asarray(origin, dtype=float),
                   np.zeros((height, width), dtype=np.int8))


# ---------------------------------------------------------------------------
# Euclidean distance field


class EsdfSample(NamedTuple):
    distance: np.ndarray  # (n,) m
    gradient: np.ndarray  # (n, 2) d(distance)/d(point), 1/1
    out_of_bounds: np.ndarray  # (n,) bool, query was clamped to the map
    cell_index: np.ndarray  # (n,) int, interpolation cell id (nonsmoothness signature)


@dataclass(eq=False)
class Esdf:
    """Unsigned distance to the nearest occupied cell center, on cell centers.

    Queries interpolate bilinearly between centers and clamp outside the
    map, flagging the clamp. A map with no occupied cells holds the map
    diagonal everywhere.
    """

    distance: np.ndarray  # (H, W), m
    resolution: float
    origin: np.ndarray  # (2,)

    def query(self, points) -> EsdfSample:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h, w = self.distance.shape
        g = (pts - self.origin) / self.resolution - 0.5  # continuous center coords
        gx = np.clip(g[:, 0], 0.0, w - 1.0)
        gy = np.clip(g[:, 1], 0.0, h - 1.0)
        oob = (np.abs(g[:, 0] - gx) > 1e-12) | (np.abs(g[:, 1] - gy) > 1e-12)
        ix = np.minimum(gx.astype(int), w - 2) if w > 1 else np.zeros(len(pts), int)
        iy = np.minimum(gy.astype(int), h - 2) if h > 1 else np.zeros(len(pts), int)
        fx = gx - ix
        fy = gy - iy
        d00 = self.distance[iy, ix]
        d10 = self.distance[iy, np.minimum(ix + 1, w - 1)]
        d01 = self.distance[np.minimum(iy + 1, h - 1), ix]
        d11 = self.distance[np.minimum(iy + 1, h - 1), np.minimum(ix + 1, w - 1)]
        val = (1 - fy) * ((1 - fx) * d00 + fx * d10) + fy * ((1 - fx) * d01 + fx * d11)
        ddx = ((1 - fy) * (d10 - d00) + fy * (d11 - d01)) / self.resolution
        ddy = ((1 - fx) * (d01 - d00) + fx * (d11 - d10)) / self.resolution
        grad = np.stack([ddx, ddy], axis=1)
        grad[oob] = 0.0  # clamped queries are flat against the border
        return EsdfSample(val, grad, oob, iy * w + ix)

    def query_one(self, point):
        s = self.query(np.asarray(point, dtype=float).reshape(1, 2))
        return float(s.distance[0]), s.gradient[0], bool(s.out_of_bounds[0])

    def query_c1(self, points) -> EsdfSample:
        """Catmull-Rom bicubic sampling: same lattice values, C1 across cells.

        The bilinear query's gradient jumps at every cell line, which turns a
        trajectory optimizer's landscape into a minefield of kinks; this
        variant interpolates the identical cell-center distances with a C1
        kernel (still exact at cell centers) so descent methods see a smooth
        field. Out-of-bounds handling matches query().
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h, w = self.distance.shape
        g = (pts - self.origin) / self.resolution - 0.5
        gx = np.clip(g[:, 0], 0.0, w - 1.0)
        gy = np.clip(g[:, 1], 0.0, h - 1.0)
        oob = (np.abs(g[:, 0] - gx) > 1e-12) | (np.abs(g[:, 1] - gy) > 1e-12)
        ix = np.minimum(gx.astype(int), w - 2) if w > 1 else np.zeros(len(pts), int)
        iy = np.minimum(gy.astype(int), h - 2) if h > 1 else np.zeros(len(pts), int)
        fx = gx - ix
        fy = gy - iy

        def kernel(f):
            # Catmull-Rom weights for samples at offsets -1, 0, 1, 2 and their
            # derivatives in f; exact at f = 0 and C1 at integer crossings
            f2 = f * f
            f3 = f2 * f
            wts = np.stack([
                0.5 * (-f3 + 2.0 * f2 - f),
                0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
                0.5 * (-3.0 * f3 + 4.0 * f2 + f),
                0.5 * (f3 - f2),
            ])
            dwts = np.stack([
                0.5 * (-3.0 * f2 + 4.0 * f - 1.0),
                0.5 * (9.0 * f2 - 10.0 * f),
                0.5 * (-9.0 * f2 + 8.0 * f + 1.0),
                0.5 * (3.0 * f2 - 2.0 * f),
            ])
            return wts, dwts

        wx, dwx = kernel(fx)
        wy, dwy = kernel(fy)
        cols = np.clip(ix[None, :] + np.arange(-1, 3)[:, None], 0, w - 1)
        rows = np.clip(iy[None, :] + np.arange(-1, 3)[:, None], 0, h - 1)
        # patch[j, i, n] = distance[rows[j], cols[i]] per query n
        patch = self.distance[rows[:, None, :], cols[None, :, :]]
        val = np.einsum("jin,jn,in->n", patch, wy, wx)
        ddx = np.einsum("jin,jn,in->n", patch, wy, dwx) / self.resolution
        ddy = np.einsum("jin,jn,in->n", patch, dwy, wx) / self.resolution
        grad = np.stack([ddx, ddy], axis=1)
        grad[oob] = 0.0
        return EsdfSample(val, grad, oob, iy * w + ix)


def build_esdf(grid: GridMap, treat_movable_as: str = "occupied") -> Esdf:
    """Distance field over the grid's cell centers.

    treat_movable_as selects whether movable cells count as obstacles
    ("occupied") or as free space ("free"); static cells always count.
    """
    if treat_movable_as not in ("occupied", "free"):
        raise ValueError("treat_movable_as must be 'occupied' or 'free'")
    occ = grid.cells == STATIC
    if treat_movable_as == "occupied":
        occ = occ | (grid.cells >= MOVABLE_BASE)
    diag = float(np.hypot(grid.width * grid.resolution, grid.height * grid.resolution))
    if not occ.any():
        d = np.full(grid.cells.shape, diag, dtype=float)
    else:
        d = ndimage.distance_transform_edt(~occ, sampling=grid.resolution)
        d = np.minimum(d, diag)
    return Esdf(d, grid.resolution, grid.origin.copy())
