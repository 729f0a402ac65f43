"""Structured triangulations, particle geometry, and contour quadrature.

Domains are either squares (-L, L)^2 or polygonal discs; particles are
circles or ellipses described by reference boundary data over the contour
parameter t in [0, 2*pi).  The normal stored with contour samples points
*into* the particle (outward with respect to the membrane region), which is
the opposite of the usual figure convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ellipe

from .errors import ContourOutsideDomainError, PointOutsideMeshError

ContourData = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]

BARY_TOL = 1e-10


@dataclass(frozen=True)
class DomainSpec:
    """Reference domain: 'rectangle' (-L, L)^2 or polygonal 'disc' of given radius."""

    shape: str = "rectangle"
    size: float = 3.0   # half-width L for rectangle, radius for disc
    bc: str = "dirichlet"  # dirichlet | navier | periodic

    def __post_init__(self):
        if self.shape not in ("rectangle", "disc"):
            raise ValueError(f"unknown domain shape {self.shape!r}")
        if self.size <= 0:
            raise ValueError("domain size must be positive")
        if self.bc not in ("dirichlet", "navier", "periodic"):
            raise ValueError(f"unknown boundary condition {self.bc!r}")
        if self.bc == "periodic" and self.shape != "rectangle":
            raise ValueError("periodic boundary conditions require a rectangle")

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.shape == "rectangle":
            return np.max(np.abs(pts), axis=1) <= self.size
        return np.hypot(pts[:, 0], pts[:, 1]) <= self.size

    def boundary_distance_point(self, point: np.ndarray) -> float:
        """Distance from a point to the domain boundary (negative outside)."""
        x, y = point
        if self.shape == "rectangle":
            return float(min(self.size - abs(x), self.size - abs(y)))
        return float(self.size - np.hypot(x, y))


@dataclass(frozen=True)
class ParticleShape:
    """Rigid particle cross-section with reference boundary data h0, s0.

    kind 'circle' uses radius r; kind 'ellipse' uses half-axes a >= b and a
    rotation theta of the major axis against the x-axis.  h0 and s0 may be
    constants, uniformly sampled arrays over t in [0, 2*pi), or callables.
    """

    kind: str = "circle"
    r: float = 0.1
    a: float = 0.14
    b: float = 0.06
    theta: float = 0.0
    h0: ContourData = 0.0
    s0: ContourData = 1.0

    def __post_init__(self):
        if self.kind == "circle":
            if self.r <= 0:
                raise ValueError("circle radius must be positive")
        elif self.kind == "ellipse":
            if not (self.a >= self.b > 0):
                raise ValueError("ellipse requires a >= b > 0")
        else:
            raise ValueError(f"unknown particle kind {self.kind!r}")

    @property
    def half_axes(self) -> tuple[float, float]:
        if self.kind == "circle":
            return self.r, self.r
        return self.a, self.b

    def rotation_matrix(self) -> np.ndarray:
        if self.kind == "circle":
            return np.eye(2)
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def area(self) -> float:
        a, b = self.half_axes
        return np.pi * a * b

    def perimeter(self) -> float:
        a, b = self.half_axes
        if a == b:
            return 2.0 * np.pi * a
        return 4.0 * a * float(ellipe(1.0 - (b / a) ** 2))

    def rotated(self, theta: float) -> "ParticleShape":
        return ParticleShape(kind=self.kind, r=self.r, a=self.a, b=self.b,
                             theta=theta, h0=self.h0, s0=self.s0)


@dataclass(frozen=True)
class ParticleState:
    """Placement of one particle: shape index, location, height, and tilt."""

    shape: int
    X: tuple[float, float]
    gamma: float = 0.0
    tilt: tuple[float, float] = (0.0, 0.0)
    free_height: bool = False
    free_tilt: bool = False

    @property
    def location(self) -> np.ndarray:
        return np.asarray(self.X, dtype=float)

    def moved_to(self, X) -> "ParticleState":
        return ParticleState(self.shape, (float(X[0]), float(X[1])), self.gamma,
                             self.tilt, self.free_height, self.free_tilt)


@dataclass
class ContourQuadrature:
    """Midpoint-rule samples along a particle contour."""

    t: np.ndarray        # contour parameters
    points: np.ndarray   # (n, 2) sample locations
    normals: np.ndarray  # (n, 2) unit normals, pointing into the particle
    weights: np.ndarray  # arclength weights, sum = |Gamma|
    h: np.ndarray        # displacement data at the samples
    s: np.ndarray        # normal-derivative data at the samples


class TriMesh:
    """Conforming triangulation with edge data and point location.

    Edges are stored as sorted vertex pairs with a fixed global unit normal
    (right-handed rotation of the p1->p2 tangent), midpoints, and a boundary
    flag.  ``elem_edges[k, i]`` is the edge opposite local vertex i of
    element k, ``elem_edge_signs[k, i]`` its outward-normal sign.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)

        # enforce positive orientation
        p = vertices[triangles]
        det = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        flip = det < 0
        if np.any(flip):
            triangles = triangles.copy()
            triangles[flip, 1], triangles[flip, 2] = \
                triangles[flip, 2].copy(), triangles[flip, 1].copy()
            p = vertices[triangles]
            det = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if np.any(det <= 0):
            raise ValueError("mesh contains degenerate triangles")

        self.vertices = vertices
        self.triangles = triangles
        self.areas = 0.5 * det

        # unique edges, element->edge incidence
        pairs = triangles[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        pairs_sorted = np.sort(pairs, axis=1)
        edges, inverse, counts = np.unique(
            pairs_sorted, axis=0, return_inverse=True, return_counts=True)
        self.edges = edges
        self.elem_edges = inverse.reshape(-1, 3)
        self.boundary_edge = counts == 1

        tangents = vertices[edges[:, 1]] - vertices[edges[:, 0]]
        lengths = np.hypot(tangents[:, 0], tangents[:, 1])
        self.edge_lengths = lengths
        self.edge_tangents = tangents / lengths[:, None]
        # global normal: tangent rotated clockwise
        self.edge_normals = np.column_stack(
            [self.edge_tangents[:, 1], -self.edge_tangents[:, 0]])
        self.edge_midpoints = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])

        # sign of the global edge normal against each element's outward normal
        centroids = p.mean(axis=1)
        signs = np.empty((len(triangles), 3))
        for i in range(3):
            mids = self.edge_midpoints[self.elem_edges[:, i]]
            nrml = self.edge_normals[self.elem_edges[:, i]]
            outward = np.sign(np.einsum("ij,ij->i", mids - centroids, nrml))
            signs[:, i] = outward
        self.elem_edge_signs = signs

        self.boundary_vertex = np.zeros(len(vertices), dtype=bool)
        self.boundary_vertex[edges[self.boundary_edge].ravel()] = True

        self._grid = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @property
    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    def _build_grid(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        span = np.maximum(hi - lo, 1e-300)
        g = max(1, int(np.sqrt(self.n_triangles / 2.0)))
        cells = [[] for _ in range(g * g)]
        p = self.vertices[self.triangles]
        tlo = ((p.min(axis=1) - lo) / span * g).astype(int).clip(0, g - 1)
        thi = ((p.max(axis=1) - lo) / span * g).astype(int).clip(0, g - 1)
        for k in range(self.n_triangles):
            for ix in range(tlo[k, 0], thi[k, 0] + 1):
                for iy in range(tlo[k, 1], thi[k, 1] + 1):
                    cells[ix * g + iy].append(k)
        self._grid = (lo, span, g, [np.array(c, dtype=np.int64) for c in cells])

    def _candidates(self, x: np.ndarray) -> np.ndarray:
        if self._grid is None:
            self._build_grid()
        lo, span, g, cells = self._grid
        ix = int((x[0] - lo[0]) / span[0] * g)
        iy = int((x[1] - lo[1]) / span[1] * g)
        if not (0 <= ix < g and 0 <= iy < g):
            ix = min(max(ix, 0), g - 1)
            iy = min(max(iy, 0), g - 1)
        return cells[ix * g + iy]

    def barycentric(self, elems: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of x in the given elements, shape (m, 3)."""
        p = self.vertices[self.triangles[elems]]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        d = x - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / det
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def locate(self, x) -> tuple[int, np.ndarray]:
        """Element containing x plus barycentric coordinates.

        Among all containing elements the lowest index wins, which makes
        evaluation on edges and vertices deterministic.
        """
        x = np.asarray(x, dtype=float)
        cand = self._candidates(x)
        if len(cand):
            lam = self.barycentric(cand, x)
            ok = np.all(lam >= -BARY_TOL, axis=1)
            if np.any(ok):
                hits = cand[ok]
                best = np.argmin(hits)
                return int(hits[best]), lam[ok][best]
        # fallback: full scan (points exactly on grid-cell seams)
        all_elems = np.arange(self.n_triangles)
        lam = self.barycentric(all_elems, x)
        ok = np.all(lam >= -BARY_TOL, axis=1)
        if not np.any(ok):
            raise PointOutsideMeshError(f"point {x.tolist()} is outside the mesh")
        k = int(np.argmax(ok))
        return k, lam[k]


def build_mesh(spec: DomainSpec, n: int) -> TriMesh:
    """Structured triangulation: 2n x 2n split squares on (-L, L)^2, or a
    ring-patterned polygonal disc with n boundary segments."""
    if n < 1:
        raise ValueError("subdivision count must be >= 1")
    if spec.shape == "rectangle":
        return _square_mesh(spec.size, n)
    return _disc_mesh(spec.size, n)


def _square_mesh(L: float, n: int) -> TriMesh:
    m = 2 * n
    coords = np.linspace(-L, L, m + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return i * (m + 1) + j

    tris = []
    for i in range(m):
        for j in range(m):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            if (i + j) % 2 == 0:   # alternate diagonals: mirror-symmetric mesh
                tris.append([v00, v10, v11])
                tris.append([v00, v11, v01])
            else:
                tris.append([v00, v10, v01])
                tris.append([v10, v11, v01])
    return TriMesh(vertices, np.array(tris))


def _disc_mesh(radius: float, n: int) -> TriMesh:
    if n < 3:
        raise ValueError("disc mesh needs at least 3 boundary segments")
    rings = max(1, int(round(n / (2.0 * np.pi))))
    angles = 2.0 * np.pi * np.arange(n) / n
    vertices = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        rk = radius * k / rings
        vertices.append(np.column_stack([rk * np.cos(angles), rk * np.sin(angles)]))
    vertices = np.vstack(vertices)

    def rid(k, j):
        return 1 + (k - 1) * n + (j % n)

    tris = []
    for j in range(n):  # innermost fan
        tris.append([0, rid(1, j), rid(1, j + 1)])
    for k in range(1, rings):
        for j in range(n):
            v00, v01 = rid(k, j), rid(k, j + 1)
            v10, v11 = rid(k + 1, j), rid(k + 1, j + 1)
            if j % 2 == 0:
                tris.append([v00, v10, v11])
                tris.append([v00, v11, v01])
            else:
                tris.append([v00, v10, v01])
                tris.append([v10, v11, v01])
    return TriMesh(vertices, np.array(tris))


def _eval_data(data: ContourData, t: np.ndarray) -> np.ndarray:
    if callable(data):
        return np.asarray(data(t), dtype=float) * np.ones_like(t)
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        return np.full_like(t, float(arr))
    grid = 2.0 * np.pi * np.arange(len(arr) + 1) / len(arr)
    return np.interp(np.mod(t, 2.0 * np.pi), grid, np.append(arr, arr[0]))


def _contour_point(shape: ParticleShape, t: np.ndarray) -> np.ndarray:
    a, b = shape.half_axes
    Q = shape.rotation_matrix()
    return np.column_stack([a * np.cos(t), b * np.sin(t)]) @ Q.T


def _contour_speed(shape: ParticleShape, t: np.ndarray) -> np.ndarray:
    a, b = shape.half_axes
    return np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)


def _inward_normal(shape: ParticleShape, t: np.ndarray) -> np.ndarray:
    a, b = shape.half_axes
    Q = shape.rotation_matrix()
    raw = np.column_stack([b * np.cos(t), a * np.sin(t)])
    raw /= np.hypot(raw[:, 0], raw[:, 1])[:, None]
    return -(raw @ Q.T)


def _equal_arclength_params(shape: ParticleShape, n_q: int) -> tuple[np.ndarray, float]:
    a, b = shape.half_axes
    if a == b:
        return 2.0 * np.pi * (np.arange(n_q) + 0.5) / n_q, 2.0 * np.pi * a
    m = max(2048, 32 * n_q)
    tg = np.linspace(0.0, 2.0 * np.pi, m + 1)
    sp = _contour_speed(shape, tg)
    ds = 0.5 * (sp[1:] + sp[:-1]) * (tg[1] - tg[0])
    s = np.concatenate([[0.0], np.cumsum(ds)])
    total = s[-1]
    targets = total * (np.arange(n_q) + 0.5) / n_q
    return np.interp(targets, s, tg), float(total)


def sample_contour(shape: ParticleShape, state: ParticleState, n_q: int = 128,
                   spec: DomainSpec | None = None) -> ContourQuadrature:
    """Composite-midpoint contour quadrature plus boundary data samples.

    Samples are equally spaced in arclength; weights sum to the contour
    length.  Data include the height/tilt contributions of the state:
    h = h0 + gamma + alpha.(x - X) and s = s0 + alpha.n.
    """
    if n_q < 8:
        raise ValueError("need at least 8 quadrature points per contour")
    t, length = _equal_arclength_params(shape, n_q)
    X = state.location
    points = X + _contour_point(shape, t)
    normals = _inward_normal(shape, t)
    weights = np.full(n_q, length / n_q)
    if spec is not None:
        dist = np.array([spec.boundary_distance_point(p) for p in points])
        if np.any(dist <= 0):
            raise ContourOutsideDomainError(
                f"contour of particle at {X.tolist()} leaves the domain")
    alpha = np.asarray(state.tilt, dtype=float)
    h = _eval_data(shape.h0, t) + state.gamma + (points - X) @ alpha
    s = _eval_data(shape.s0, t) + normals @ alpha
    return ContourQuadrature(t=t, points=points, normals=normals,
                             weights=weights, h=h, s=s)


def _point_in_shape(shape: ParticleShape, X: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b = shape.half_axes
    local = (np.atleast_2d(pts) - X) @ shape.rotation_matrix()
    return (local[:, 0] / a) ** 2 + (local[:, 1] / b) ** 2 < 1.0


def _project_to_contour(shape: ParticleShape, X: np.ndarray, q: np.ndarray,
                        t0: float) -> tuple[float, float]:
    """Closest contour parameter to point q, refined near t0."""
    def dist(t):
        p = X + _contour_point(shape, np.array([t]))[0]
        return float(np.hypot(*(p - q)))
    res = minimize_scalar(dist, bracket=(t0 - 0.5, t0, t0 + 0.5),
                          options={"xtol": 1e-12, "maxiter": 100})
    return float(res.x), float(res.fun)


def particle_distance(shape1: ParticleShape, state1: ParticleState,
                      shape2: ParticleShape, state2: ParticleState) -> float:
    """Distance between particle boundaries; negative signals overlap.

    Circles use |X1 - X2| - (r1 + r2); other pairs use alternating
    closest-point refinement seeded from a dense contour sampling.
    """
    X1, X2 = state1.location, state2.location
    if shape1.kind == "circle" and shape2.kind == "circle":
        return float(np.hypot(*(X1 - X2)) - shape1.r - shape2.r)

    m = 720
    t = 2.0 * np.pi * np.arange(m) / m
    c1 = X1 + _contour_point(shape1, t)
    c2 = X2 + _contour_point(shape2, t)
    d2 = ((c1[:, None, :] - c2[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmin(d2), d2.shape)
    t1, t2 = t[i], t[j]
    gap = np.sqrt(d2[i, j])
    for _ in range(100):
        p2 = X2 + _contour_point(shape2, np.array([t2]))[0]
        t1, _ = _project_to_contour(shape1, X1, p2, t1)
        p1 = X1 + _contour_point(shape1, np.array([t1]))[0]
        t2, new_gap = _project_to_contour(shape2, X2, p1, t2)
        if abs(new_gap - gap) < 1e-10:
            gap = new_gap
            break
        gap = new_gap

    overlap1 = _point_in_shape(shape2, X2, c1)
    overlap2 = _point_in_shape(shape1, X1, c2)
    if np.any(overlap1) or np.any(overlap2):
        depth = gap
        for shape, X, pts in ((shape2, X2, c1[overlap1]), (shape1, X1, c2[overlap2])):
            for q in pts:
                tq = float(np.arctan2(*(np.linalg.solve(shape.rotation_matrix(),
                                                        q - X)[::-1])))
                _, dq = _project_to_contour(shape, X, q, tq)
                depth = max(depth, dq)
        return -float(depth)
    return float(gap)


def boundary_distance(shape: ParticleShape, state: ParticleState,
                      spec: DomainSpec) -> float:
    """Distance from the particle to the domain boundary; negative outside."""
    X = state.location
    if spec.shape == "rectangle":
        L = spec.size
        if shape.kind == "circle":
            return float(min(L - abs(X[0]), L - abs(X[1])) - shape.r)
        dmin = np.inf
        for u in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
            a, b = shape.half_axes
            lu = shape.rotation_matrix().T @ u
            support = np.hypot(a * lu[0], b * lu[1])
            dmin = min(dmin, L - abs(X @ u) - support)
        return float(dmin)
    R = spec.size
    if shape.kind == "circle":
        return float(R - np.hypot(*X) - shape.r)
    t = 2.0 * np.pi * np.arange(720) / 720
    radii = np.hypot(*(X + _contour_point(shape, t)).T)
    t0 = t[np.argmax(radii)]
    res = minimize_scalar(
        lambda tt: -float(np.hypot(*(X + _contour_point(shape, np.array([tt]))[0]))),
        bracket=(t0 - 0.2, t0, t0 + 0.2), options={"xtol": 1e-12, "maxiter": 100})
    return float(R + res.fun)  # res.fun = -max radius


def check_disjoint(shapes: Sequence[ParticleShape], states: Sequence[ParticleState],
                   spec: DomainSpec | None = None) -> None:
    """Raise if particles overlap or touch the domain boundary."""
    from .errors import OverlappingParticlesError

    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            d = particle_distance(shapes[states[i].shape], states[i],
                                  shapes[states[j].shape], states[j])
            if d <= 0:
                raise OverlappingParticlesError(
                    f"particles {i} and {j} overlap (distance {d:.3e})")
        if spec is not None:
            d = boundary_distance(shapes[states[i].shape], states[i], spec)
            if d <= 0:
                raise ContourOutsideDomainError(
                    f"particle {i} touches the domain boundary (distance {d:.3e})")
