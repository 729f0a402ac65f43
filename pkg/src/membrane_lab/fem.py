"""Morley and P1 finite elements for the linearized bending energy.

The Morley element carries vertex values plus edge-midpoint normal
derivatives (taken against a fixed global normal per edge).  Its basis is
built per element by inverting the 6x6 dof matrix in scaled local
coordinates, so quadratics are reproduced exactly and second derivatives
are element constants.

The bending form is assembled in the reformulated way: elementwise
(kappa - c) * Laplacian product + c * full Hessian contraction, plus the
tangential/normal dual-pairing terms on boundary edges.  The boundary terms
involve only boundary dof columns and are symmetrized, so they drop out
under a clamped-boundary mask and are active for Navier conditions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import PointOutsideMeshError
from .mesh import DomainSpec, TriMesh


@dataclass(frozen=True)
class MembraneParams:
    """Material parameters: bending rigidity, tension, regularization, and
    the Morley reformulation parameter c (defaults to kappa)."""

    kappa: float = 1.0
    sigma: float = 0.0
    kappa6: float = 0.0
    kappa8: float = 0.0
    c: float | None = None

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.sigma < 0 or self.kappa6 < 0 or self.kappa8 < 0:
            raise ValueError("sigma, kappa6, kappa8 must be nonnegative")
        if self.c is not None and not (0.0 < self.c <= self.kappa):
            raise ValueError("c must lie in (0, kappa]")

    @property
    def c_value(self) -> float:
        return self.kappa if self.c is None else self.c


class _MorleyBasis:
    """Per-element quadratic basis in centroid-scaled coordinates."""

    def __init__(self, mesh: TriMesh):
        nt = mesh.n_triangles
        p = mesh.vertices[mesh.triangles]            # (nt, 3, 2)
        self.centroid = p.mean(axis=1)
        self.scale = np.sqrt(mesh.areas)

        xi = (p - self.centroid[:, None, :]) / self.scale[:, None, None]
        mid = mesh.edge_midpoints[mesh.elem_edges]   # (nt, 3, 2)
        xim = (mid - self.centroid[:, None, :]) / self.scale[:, None, None]
        nrm = mesh.edge_normals[mesh.elem_edges]     # (nt, 3, 2)

        M = np.empty((nt, 6, 6))
        M[:, :3, :] = _monomials(xi)
        gx, gy = _monomial_gradients(xim)
        M[:, 3:, :] = (nrm[:, :, 0:1] * gx + nrm[:, :, 1:2] * gy) \
            / self.scale[:, None, None]
        self.coeff = np.linalg.inv(M)                # (nt, monomial, dof)

        # element-constant second derivatives of each basis function
        s2 = self.scale[:, None] ** 2
        self.hxx = 2.0 * self.coeff[:, 3, :] / s2
        self.hxy = self.coeff[:, 4, :] / s2
        self.hyy = 2.0 * self.coeff[:, 5, :] / s2

    def values(self, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
        xi = (pts - self.centroid[elems]) / self.scale[elems, None]
        return np.einsum("pm,pmd->pd", _monomials(xi[:, None, :])[:, 0], self.coeff[elems])

    def gradients(self, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
        xi = (pts - self.centroid[elems]) / self.scale[elems, None]
        gx, gy = _monomial_gradients(xi[:, None, :])
        gx, gy = gx[:, 0], gy[:, 0]
        out = np.empty((len(elems), 6, 2))
        out[:, :, 0] = np.einsum("pm,pmd->pd", gx, self.coeff[elems])
        out[:, :, 1] = np.einsum("pm,pmd->pd", gy, self.coeff[elems])
        return out / self.scale[elems, None, None]


def _monomials(xi: np.ndarray) -> np.ndarray:
    """[1, x, y, x^2, xy, y^2] for points of shape (..., 2)."""
    x, y = xi[..., 0], xi[..., 1]
    return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)


def _monomial_gradients(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = xi[..., 0], xi[..., 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    gx = np.stack([zero, one, zero, 2 * x, y, zero], axis=-1)
    gy = np.stack([zero, zero, one, zero, x, 2 * y], axis=-1)
    return gx, gy


class FeSpace:
    """Morley or P1 space on a mesh, with the boundary-condition mask.

    Solves work on reduced coefficient vectors u_red with u = R u_red; the
    reduction R drops constrained dofs (Dirichlet, Navier) or identifies
    periodic partners.  Periodic spaces additionally carry one mean
    constraint row that solvers append as a Lagrange condition.
    """

    def __init__(self, mesh: TriMesh, kind: str = "morley",
                 spec: DomainSpec | None = None):
        if kind not in ("morley", "p1"):
            raise ValueError(f"unknown element kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        self.spec = spec or DomainSpec("rectangle", float(np.abs(mesh.vertices).max()))

        nv, ne = mesh.n_vertices, mesh.n_edges
        if kind == "morley":
            self.n_dofs = nv + ne
            self.elem_dofs = np.hstack([mesh.triangles, nv + mesh.elem_edges])
            self.basis = _MorleyBasis(mesh)
        else:
            self.n_dofs = nv
            self.elem_dofs = mesh.triangles
            self.basis = None

        self._build_reduction()

    # -- boundary handling ------------------------------------------------

    def _build_reduction(self):
        mesh, spec = self.mesh, self.spec
        nv = mesh.n_vertices
        if spec.bc == "periodic":
            self._build_periodic()
            return
        constrained = np.zeros(self.n_dofs, dtype=bool)
        if spec.bc == "dirichlet":
            constrained[:nv] = mesh.boundary_vertex
            if self.kind == "morley":
                constrained[nv:] = mesh.boundary_edge
        elif spec.bc == "navier":
            constrained[:nv] = mesh.boundary_vertex
        self.free = ~constrained
        free_idx = np.flatnonzero(self.free)
        self.n_free = len(free_idx)
        self.R = sp.csr_matrix(
            (np.ones(self.n_free), (free_idx, np.arange(self.n_free))),
            shape=(self.n_dofs, self.n_free))
        self.mean_row = None

    def _build_periodic(self):
        mesh = self.mesh
        L = self.spec.size
        tol = 1e-9 * L
        nv = mesh.n_vertices
        parent = np.arange(self.n_dofs)
        signs = np.ones(self.n_dofs)

        def find(i):
            while parent[i] != i:
                i = parent[i]
            return i

        coords = mesh.vertices
        bverts = np.flatnonzero(mesh.boundary_vertex)
        key = {}
        for v in bverts:
            x, y = coords[v]
            kx = 0.0 if abs(abs(x) - L) < tol else x
            ky = 0.0 if abs(abs(y) - L) < tol else y
            k = (round(kx / tol), round(ky / tol))
            if k in key:
                parent[v] = find(key[k])
            else:
                key[k] = v

        if self.kind == "morley":
            bedges = np.flatnonzero(mesh.boundary_edge)
            ekey = {}
            for e in bedges:
                mx, my = mesh.edge_midpoints[e]
                kx = 0.0 if abs(abs(mx) - L) < tol else mx
                ky = 0.0 if abs(abs(my) - L) < tol else my
                k = (round(kx / tol), round(ky / tol))
                if k in ekey:
                    rep = ekey[k]
                    parent[nv + e] = nv + rep
                    signs[nv + e] = float(
                        np.dot(mesh.edge_normals[e], mesh.edge_normals[rep]))
                else:
                    ekey[k] = e

        reps = np.array([find(i) for i in range(self.n_dofs)])
        uniq, red = np.unique(reps, return_inverse=True)
        self.n_free = len(uniq)
        self.free = None
        vals = np.array([signs[i] for i in range(self.n_dofs)])
        self.R = sp.csr_matrix((vals, (np.arange(self.n_dofs), red)),
                               shape=(self.n_dofs, self.n_free))
        self.mean_row = self.reduce_vec(self._boundary_trace_row())

    def _boundary_trace_row(self) -> np.ndarray:
        """Row integrating the trace over the domain boundary (pins constants)."""
        mesh = self.mesh
        row = np.zeros(self.n_dofs)
        gauss = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        for e in np.flatnonzero(mesh.boundary_edge):
            pa, pb = mesh.vertices[mesh.edges[e]]
            le = mesh.edge_lengths[e]
            if self.kind == "p1":
                row[mesh.edges[e]] += 0.5 * le
                continue
            k = int(np.argmax(np.any(mesh.elem_edges == e, axis=1)))
            pts = pa[None, :] + gauss[:, None] * (pb - pa)[None, :]
            vals = self.basis.values(np.array([k, k]), pts)
            row[self.elem_dofs[k]] += 0.5 * le * vals.sum(axis=0)
        return row

    # -- reduction helpers -------------------------------------------------

    def reduce_matrix(self, A: sp.spmatrix) -> sp.csr_matrix:
        return (self.R.T @ A @ self.R).tocsr()

    def reduce_vec(self, b: np.ndarray) -> np.ndarray:
        return self.R.T @ b

    def expand(self, u_red: np.ndarray) -> np.ndarray:
        return self.R @ u_red

    # -- interpolation and evaluation ---------------------------------------

    def interpolate(self, f, grad=None) -> np.ndarray:
        """Dof vector of the canonical interpolant of a smooth function."""
        mesh = self.mesh
        vals = np.array([f(p) for p in mesh.vertices], dtype=float)
        if self.kind == "p1":
            return vals
        if grad is None:
            h = 1e-6 * max(self.spec.size, 1.0)

            def grad(p):
                return np.array([
                    (f(p + [h, 0]) - f(p - [h, 0])) / (2 * h),
                    (f(p + [0, h]) - f(p - [0, h])) / (2 * h)])
        edof = np.array([np.dot(grad(m), n) for m, n in
                         zip(mesh.edge_midpoints, mesh.edge_normals)])
        return np.concatenate([vals, edof])

    def value_row(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Point-evaluation functional as (dof indices, coefficients)."""
        k, lam = self.mesh.locate(x)
        if self.kind == "p1":
            return self.elem_dofs[k], lam
        vals = self.basis.values(np.array([k]), np.atleast_2d(np.asarray(x, float)))[0]
        return self.elem_dofs[k], vals

    def gradient_row(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Gradient functional: (dof indices, (6, 2) coefficients)."""
        k, lam = self.mesh.locate(x)
        if self.kind == "p1":
            g = _p1_gradients(self.mesh, np.array([k]))[0]
            return self.elem_dofs[k], g
        grads = self.basis.gradients(np.array([k]),
                                     np.atleast_2d(np.asarray(x, float)))[0]
        return self.elem_dofs[k], grads

    def hessian_rows(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Element-constant Hessian functionals (xx, xy, yy) at x (Morley only)."""
        if self.kind != "morley":
            raise ValueError("Hessian rows require the Morley space")
        k, _ = self.mesh.locate(x)
        b = self.basis
        rows = np.vstack([b.hxx[k], b.hxy[k], b.hyy[k]])
        return self.elem_dofs[k], rows

    def evaluate(self, u: np.ndarray, x, what: str = "value", n=None):
        """Evaluate a coefficient vector: value, gradient, or normal_deriv."""
        x = np.asarray(x, dtype=float)
        if what == "value":
            dofs, coeffs = self.value_row(x)
            return float(coeffs @ u[dofs])
        dofs, g = self.gradient_row(x)
        grad = g.T @ u[dofs]
        if what == "gradient":
            return grad
        if what == "normal_deriv":
            if n is None:
                raise ValueError("normal_deriv needs a direction n")
            return float(np.dot(grad, np.asarray(n, dtype=float)))
        raise ValueError(f"unknown evaluation kind {what!r}")


def _p1_gradients(mesh: TriMesh, elems: np.ndarray) -> np.ndarray:
    """Constant gradients of the three hat functions, shape (m, 3, 2)."""
    p = mesh.vertices[mesh.triangles[elems]]
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    twoA = (2.0 * mesh.areas[elems])[:, None]
    rot = lambda v: np.column_stack([-v[:, 1], v[:, 0]])
    return np.stack([rot(e0), rot(e1), rot(e2)], axis=1) / twoA[:, None]


def _accumulate(n_dofs: int, elem_dofs: np.ndarray, local: np.ndarray) -> sp.csr_matrix:
    nloc = elem_dofs.shape[1]
    rows = np.repeat(elem_dofs, nloc, axis=1).ravel()
    cols = np.tile(elem_dofs, (1, nloc)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n_dofs, n_dofs))
    return A.tocsr()


def assemble_morley(space: FeSpace, params: MembraneParams) -> sp.csr_matrix:
    """Full-dof stiffness matrix of the bending + tension form.

    Exact for the quadratics the element represents: the Hessian terms are
    element constants, the gradient term uses edge-midpoint quadrature
    (degree 2), and the boundary dual pairings are products of an element
    constant with a linear trace, integrated exactly.
    """
    if space.kind != "morley":
        raise ValueError("assemble_morley requires a Morley space")
    mesh, b = space.mesh, space.basis
    c = params.c_value
    kappa, sigma = params.kappa, params.sigma

    lap = b.hxx + b.hyy                                        # (nt, 6)
    local = (kappa - c) * np.einsum("ti,tj->tij", lap, lap)
    local += c * (np.einsum("ti,tj->tij", b.hxx, b.hxx)
                  + 2.0 * np.einsum("ti,tj->tij", b.hxy, b.hxy)
                  + np.einsum("ti,tj->tij", b.hyy, b.hyy))
    local *= mesh.areas[:, None, None]

    if sigma != 0.0:
        mids = mesh.edge_midpoints[mesh.elem_edges]            # (nt, 3, 2)
        grad = np.empty((mesh.n_triangles, 3, 6, 2))
        elems = np.arange(mesh.n_triangles)
        for q in range(3):
            grad[:, q] = b.gradients(elems, mids[:, q])
        gsum = np.einsum("tqia,tqja->tij", grad, grad)
        local += sigma * (mesh.areas[:, None, None] / 3.0) * gsum

    A = _accumulate(space.n_dofs, space.elem_dofs, local)

    B = _morley_boundary_terms(space)
    if B is not None:
        A = A + c * 0.5 * (B + B.T)
    A = 0.5 * (A + A.T)
    return A.tocsr()


def _morley_boundary_terms(space: FeSpace) -> sp.csr_matrix | None:
    """Dual-pairing terms <v_tt, w_n> - <v_tn, w_t> over boundary edges.

    Within the adjacent element both integrands are (element constant) x
    (linear trace), and the linear factors integrate to pure dof values:
    the edge normal-derivative dof and the endpoint value difference.
    """
    mesh, b = space.mesh, space.basis
    bnd = np.flatnonzero(mesh.boundary_edge)
    if len(bnd) == 0 or space.spec.bc == "periodic":
        return None
    nv = mesh.n_vertices
    rows, cols, vals = [], [], []
    elem_of_edge = np.full(mesh.n_edges, -1, dtype=np.int64)
    for k in range(mesh.n_triangles):
        for i in range(3):
            e = mesh.elem_edges[k, i]
            if mesh.boundary_edge[e]:
                elem_of_edge[e] = k if elem_of_edge[e] < 0 else elem_of_edge[e]
    for e in bnd:
        k = elem_of_edge[e]
        i_loc = int(np.argmax(mesh.elem_edges[k] == e))
        s_out = mesh.elem_edge_signs[k, i_loc]
        tau = mesh.edge_tangents[e]
        n_out = s_out * mesh.edge_normals[e]
        le = mesh.edge_lengths[e]
        dofs = space.elem_dofs[k]
        Ht = np.stack([b.hxx[k], b.hxy[k], b.hyy[k]], axis=1)   # (6, 3)
        v_tt = (Ht[:, 0] * tau[0] * tau[0] + 2 * Ht[:, 1] * tau[0] * tau[1]
                + Ht[:, 2] * tau[1] * tau[1])
        v_tn = (Ht[:, 0] * tau[0] * n_out[0]
                + Ht[:, 1] * (tau[0] * n_out[1] + tau[1] * n_out[0])
                + Ht[:, 2] * tau[1] * n_out[1])
        va, vb = mesh.edges[e]
        for a in range(6):
            rows += [dofs[a], dofs[a], dofs[a]]
            cols += [nv + e, vb, va]
            vals += [le * v_tt[a] * s_out, -v_tn[a], v_tn[a]]
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(space.n_dofs, space.n_dofs)).tocsr()


def assemble_p1(space: FeSpace, which: str = "stiffness") -> sp.csr_matrix:
    """P1 stiffness (grad-grad) or consistent mass matrix, full dofs."""
    if space.kind != "p1":
        raise ValueError("assemble_p1 requires a P1 space")
    mesh = space.mesh
    if which == "stiffness":
        g = _p1_gradients(mesh, np.arange(mesh.n_triangles))
        local = np.einsum("tia,tja->tij", g, g) * mesh.areas[:, None, None]
    elif which == "mass":
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = mesh.areas[:, None, None] * base[None, :, :]
    else:
        raise ValueError(f"unknown matrix kind {which!r}")
    return _accumulate(space.n_dofs, space.elem_dofs, local)
