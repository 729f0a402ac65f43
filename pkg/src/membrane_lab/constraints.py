"""Discrete linear-functional rows for every constraint family.

A ConstraintBlock stacks functional rows into a sparse matrix R over the
FE dofs together with targets b and quadrature weights w, so the penalized
energy reads 1/(2 eps) * sum_r w_r (R_r u - b_r)^2.  Parametrized
(free-height / free-tilt) constraints carry kernel mode vectors in row
space; the residual is projected against their weighted span and the
height/tilt coefficients are recovered from the same mode inner products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (CoincidentPointsError, DegenerateModesError,
                     InfeasibleScenarioError)
from .fem import FeSpace
from .mesh import (DomainSpec, ParticleShape, ParticleState, check_disjoint,
                   sample_contour)


@dataclass
class FunctionalRow:
    """One bounded linear functional: sparse coefficients, target, weight."""

    indices: np.ndarray
    values: np.ndarray
    target: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if len(self.indices) == 0 or not np.any(self.values):
            raise ValueError("functional row must be nonzero")
        if not np.all(np.isfinite(self.values)) or not np.isfinite(self.target):
            raise ValueError("functional row carries non-finite data")
        if self.weight <= 0:
            raise ValueError("row weight must be positive")


@dataclass
class ConstraintBlock:
    """Stacked functional rows with targets, weights, and kernel modes."""

    matrix: sp.csr_matrix          # (n_rows, n_dofs)
    targets: np.ndarray
    weights: np.ndarray
    mode: str = "lagrange"         # lagrange | penalty
    eps: float = 1e-8
    kernel_modes: list = field(default_factory=list)   # row-space vectors
    groups: dict = field(default_factory=dict)         # name -> row slice

    def __post_init__(self):
        if self.mode not in ("lagrange", "penalty"):
            raise ValueError(f"unknown constraint mode {self.mode!r}")
        if self.mode == "penalty" and self.eps <= 0:
            raise ValueError("penalty mode requires eps > 0")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_rows(cls, rows: Sequence[FunctionalRow], n_dofs: int, **kw):
        data, ri, ci, b, w = [], [], [], [], []
        for i, r in enumerate(rows):
            data.extend(r.values)
            ri.extend([i] * len(r.indices))
            ci.extend(r.indices)
            b.append(r.target)
            w.append(r.weight)
        mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n_dofs))
        return cls(mat, np.asarray(b, float), np.asarray(w, float), **kw)

    def reduce(self, space: FeSpace) -> "ConstraintBlock":
        """Re-express the rows over the reduced (masked) dof vector."""
        return ConstraintBlock((self.matrix @ space.R).tocsr(), self.targets,
                               self.weights, self.mode, self.eps,
                               list(self.kernel_modes), dict(self.groups))

    def with_mode(self, mode: str, eps: float | None = None) -> "ConstraintBlock":
        return ConstraintBlock(self.matrix, self.targets, self.weights, mode,
                               self.eps if eps is None else eps,
                               list(self.kernel_modes), dict(self.groups))

    # -- kernel projection ---------------------------------------------------

    def orthonormal_modes(self) -> np.ndarray | None:
        """Kernel modes, orthonormalized in the weighted row inner product."""
        if not self.kernel_modes:
            return None
        M = np.column_stack(self.kernel_modes)
        gram = M.T @ (self.weights[:, None] * M)
        try:
            L = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise DegenerateModesError(
                "kernel mode vectors are numerically dependent") from exc
        cond = np.max(np.diag(L)) / np.min(np.diag(L))
        if cond > 1e8:
            raise DegenerateModesError(
                f"kernel mode Gram matrix is ill-conditioned ({cond:.2e})")
        return np.linalg.solve(L, M.T).T   # M @ inv(L).T

    def residual(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u - self.targets

    def projected_residual(self, u: np.ndarray) -> np.ndarray:
        r = self.residual(u)
        M = self.orthonormal_modes()
        if M is None:
            return r
        return r - M @ (M.T @ (self.weights * r))

    def weighted_norm(self, r: np.ndarray, group: str | None = None) -> float:
        if group is not None:
            sl = self.groups[group]
            return float(np.sqrt(np.sum(self.weights[sl] * r[sl] ** 2)))
        return float(np.sqrt(np.sum(self.weights * r ** 2)))

    def recover_coefficients(self, u: np.ndarray) -> dict:
        """Per-group kernel coefficients from mode inner products.

        For curve blocks with free height/tilt these are gamma (and the two
        tilt slopes); gamma reproduces the contour-mean formula
        (1/|Gamma|) int (u - h) ds exactly.
        """
        if not self.kernel_modes:
            return {}
        r = self.residual(u)
        M = np.column_stack(self.kernel_modes)
        gram = M.T @ (self.weights[:, None] * M)
        rhs = M.T @ (self.weights * r)
        coeffs = np.linalg.solve(gram, rhs)
        out = {}
        for g, idx in getattr(self, "_mode_groups", {}).items():
            out[g] = coeffs[idx]
        return out if out else {"all": coeffs}


def curve_rows(space: FeSpace, shapes: Sequence[ParticleShape],
               states: Sequence[ParticleState], n_q: int = 128,
               eps: float = 1e-8) -> ConstraintBlock:
    """Value and normal-derivative trace rows along each particle contour.

    Per particle the rows come in two contiguous runs: n_q value rows with
    the h samples as targets, then n_q angle rows with the s samples.  Row
    weights are the contour quadrature weights, so the penalty energy
    discretizes 1/(2 eps) sum_i ||T_i u - (h_i, s_i)||^2 over the contours.
    """
    spec = space.spec
    check_disjoint(shapes, states, spec)
    rows: list[FunctionalRow] = []
    groups = {}
    for ip, st in enumerate(states):
        quad = sample_contour(shapes[st.shape], st, n_q, spec=spec)
        start = len(rows)
        for p, w, h in zip(quad.points, quad.weights, quad.h):
            idx, vals = space.value_row(p)
            rows.append(FunctionalRow(idx, vals, target=h, weight=w))
        for p, nrm, w, s in zip(quad.points, quad.normals, quad.weights, quad.s):
            idx, g = space.gradient_row(p)
            rows.append(FunctionalRow(idx, g @ nrm, target=s, weight=w))
        groups[f"particle{ip}"] = slice(start, len(rows))
    block = ConstraintBlock.from_rows(rows, space.n_dofs, mode="penalty",
                                      eps=eps, groups=groups)
    block._contours = [sample_contour(shapes[st.shape], st, n_q, spec=spec)
                       for st in states]
    return block


def project_kernel(block: ConstraintBlock, modes: str,
                   shapes: Sequence[ParticleShape],
                   states: Sequence[ParticleState]) -> ConstraintBlock:
    """Attach height (and tilt) kernel modes to a curve block.

    The height mode is the sampled pair (1, 0) on a particle's rows; the
    tilt modes sample ((x - X)_k, n_k) for k = 1, 2.  Projection removes
    their weighted span from the residual; modes='height' or
    'height_and_tilt' applies to every particle whose state marks the
    corresponding parameter free (or to all when none are marked).
    """
    if modes not in ("height", "height_and_tilt"):
        raise ValueError(f"unknown kernel mode set {modes!r}")
    contours = getattr(block, "_contours", None)
    if contours is None:
        raise ValueError("project_kernel expects a block built by curve_rows")
    any_free = any(st.free_height or st.free_tilt for st in states)
    new = ConstraintBlock(block.matrix, block.targets, block.weights,
                          block.mode, block.eps, [], dict(block.groups))
    new._contours = contours
    mode_groups = {}
    n = block.n_rows
    for ip, (st, quad) in enumerate(zip(states, contours)):
        sl = block.groups[f"particle{ip}"]
        n_q = (sl.stop - sl.start) // 2
        val_rows = np.arange(sl.start, sl.start + n_q)
        der_rows = val_rows + n_q
        want_height = modes in ("height", "height_and_tilt")
        want_tilt = modes == "height_and_tilt"
        if any_free:
            want_height = want_height and st.free_height
            want_tilt = want_tilt and st.free_tilt
        idx = []
        if want_height:
            m = np.zeros(n)
            m[val_rows] = 1.0
            idx.append(len(new.kernel_modes))
            new.kernel_modes.append(m)
        if want_tilt:
            rel = quad.points - st.location
            for k in range(2):
                m = np.zeros(n)
                m[val_rows] = rel[:, k]
                m[der_rows] = quad.normals[:, k]
                idx.append(len(new.kernel_modes))
                new.kernel_modes.append(m)
        if idx:
            mode_groups[f"particle{ip}"] = np.asarray(idx)
    new._mode_groups = mode_groups
    new.orthonormal_modes()   # fail fast on degenerate modes
    return new


def mean_value_rows(space: FeSpace, shapes: Sequence[ParticleShape],
                    states: Sequence[ParticleState],
                    n_q: int = 128) -> tuple[sp.csr_matrix, np.ndarray]:
    """Contour-mean value functionals f_i and the means of the h data."""
    rows, h_bar = [], []
    for st in states:
        quad = sample_contour(shapes[st.shape], st, n_q, spec=space.spec)
        acc = np.zeros(space.n_dofs)
        for p, w in zip(quad.points, quad.weights):
            idx, vals = space.value_row(p)
            acc[idx] += w * vals
        total = quad.weights.sum()
        rows.append(acc / total)
        h_bar.append(float(np.sum(quad.weights * quad.h) / total))
    return sp.csr_matrix(np.vstack(rows)), np.asarray(h_bar)


def averaged_rows(space: FeSpace, shapes: Sequence[ParticleShape],
                  states: Sequence[ParticleState], n_q: int = 128,
                  subdivisions: int = 2, eps: float = 1e-8) -> ConstraintBlock:
    """Averaged mean-curvature functionals g_i as an area form.

    g_i(v) = -(1/|Gamma_i|) * int_{B_i} Laplacian(v) dx, evaluated from the
    element-constant Morley Laplacians weighted by the element area covered
    by the particle.  Coverage uses `subdivisions` levels of uniform
    triangle refinement with centroid membership tests.  Targets are the
    contour means of the s data.
    """
    if space.kind != "morley":
        raise ValueError("averaged rows require the Morley space")
    mesh, b = space.mesh, space.basis
    lap = b.hxx + b.hyy
    rows = []
    groups = {}
    for ip, st in enumerate(states):
        shape = shapes[st.shape]
        covered = _covered_areas(mesh, shape, st, subdivisions)
        if not covered:
            raise InfeasibleScenarioError(
                f"particle {ip} covers no quadrature mass on this mesh")
        acc = np.zeros(space.n_dofs)
        for k, area in covered.items():
            acc[space.elem_dofs[k]] += area * lap[k]
        acc /= -shape.perimeter()
        quad = sample_contour(shape, st, n_q, spec=space.spec)
        s_bar = float(np.sum(quad.weights * quad.s) / quad.weights.sum())
        idx = np.flatnonzero(acc)
        rows.append(FunctionalRow(idx, acc[idx], target=s_bar))
        groups[f"particle{ip}"] = slice(ip, ip + 1)
    return ConstraintBlock.from_rows(rows, space.n_dofs, mode="penalty",
                                     eps=eps, groups=groups)


def _covered_areas(mesh, shape: ParticleShape, state: ParticleState,
                   levels: int) -> dict[int, float]:
    from .mesh import _point_in_shape

    a = max(shape.half_axes)
    X = state.location
    lo, hi = X - a, X + a
    p = mesh.vertices[mesh.triangles]
    cand = np.flatnonzero(
        np.all(p.max(axis=1) >= lo, axis=1) & np.all(p.min(axis=1) <= hi, axis=1))
    bary = _subtriangle_centroids(levels)
    out = {}
    for k in cand:
        cent = bary @ p[k]
        inside = _point_in_shape(shape, X, cent)
        if np.any(inside):
            out[int(k)] = float(mesh.areas[k] * inside.sum() / len(bary))
    return out


def _subtriangle_centroids(levels: int) -> np.ndarray:
    """Barycentric centroids of 4^levels uniform subtriangles."""
    tris = [np.eye(3)]
    for _ in range(levels):
        nxt = []
        for t in tris:
            m01, m12, m20 = (t[0] + t[1]) / 2, (t[1] + t[2]) / 2, (t[2] + t[0]) / 2
            nxt += [np.array([t[0], m01, m20]), np.array([m01, t[1], m12]),
                    np.array([m20, m12, t[2]]), np.array([m01, m12, m20])]
        tris = nxt
    return np.array([t.mean(axis=0) for t in tris])


def mean_curvature_target(shape: ParticleShape, s_bar: float) -> float:
    """Point mean-curvature target replacing an averaged constraint.

    The angle average s_bar corresponds to a Laplacian point value of
    -(|Gamma|/|B|) * s_bar; for a circle of radius 0.1 and s_bar = +-1 the
    magnitude is 20.
    """
    return -(shape.perimeter() / shape.area()) * s_bar


def _check_distinct(points: np.ndarray, scale: float) -> None:
    tol = 1e-9 * scale
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if np.hypot(*(points[i] - points[j])) < tol:
                raise CoincidentPointsError(
                    f"constraint points {i} and {j} coincide")


def point_value_rows(space: FeSpace, points, targets=None,
                     eps: float = 1e-8) -> ConstraintBlock:
    """Dirac evaluation rows delta_X u = target on the displacement space."""
    points = np.atleast_2d(np.asarray(points, float))
    _check_distinct(points, space.spec.size)
    targets = np.zeros(len(points)) if targets is None else np.asarray(targets, float)
    rows = []
    for p, t in zip(points, targets):
        idx, vals = space.value_row(p)
        rows.append(FunctionalRow(idx, vals, target=float(t)))
    return ConstraintBlock.from_rows(rows, space.n_dofs, mode="lagrange", eps=eps)


def point_curvature_rows(space: FeSpace, points, targets,
                         eps: float = 1e-8) -> ConstraintBlock:
    """Point mean-curvature rows.

    On a Morley space these are the element-constant Laplacian functionals
    delta_X(Lap u); on a P1 space they are evaluation rows meant to act on
    the auxiliary field w = Lap u of the mixed splitting.
    """
    points = np.atleast_2d(np.asarray(points, float))
    _check_distinct(points, space.spec.size)
    targets = np.asarray(targets, float)
    rows = []
    for p, t in zip(points, targets):
        if space.kind == "morley":
            idx, hess = space.hessian_rows(p)
            rows.append(FunctionalRow(idx, hess[0] + hess[2], target=float(t)))
        else:
            idx, vals = space.value_row(p)
            rows.append(FunctionalRow(idx, vals, target=float(t)))
    return ConstraintBlock.from_rows(rows, space.n_dofs, mode="penalty", eps=eps)


def aniso_curvature_rows(space: FeSpace, point, targets,
                         eps: float = 1e-8) -> ConstraintBlock:
    """Hessian-entry rows (xx, xy, yy) at one point (Morley space)."""
    targets = np.asarray(targets, float)
    if targets.shape != (3,):
        raise ValueError("anisotropic constraint needs three targets")
    idx, hess = space.hessian_rows(point)
    rows = [FunctionalRow(idx, hess[j], target=float(targets[j])) for j in range(3)]
    return ConstraintBlock.from_rows(rows, space.n_dofs, mode="penalty", eps=eps)


def point_force_load(space: FeSpace, points, betas) -> np.ndarray:
    """Load vector of point forces sum_i beta_i * delta_{X_i} (full dofs)."""
    points = np.atleast_2d(np.asarray(points, float))
    load = np.zeros(space.n_dofs)
    for p, beta in zip(points, np.asarray(betas, float)):
        idx, vals = space.value_row(p)
        load[idx] += beta * vals
    return load
