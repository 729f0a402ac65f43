"""Quadratic-minimization machinery: SPD solves, KKT systems, penalty
solves, Green's bases, reduced energies, and the free-space kernel of the
regularized eighth-order operator.

All routines operate on reduced (mask-eliminated) dof vectors.  KKT systems
are solved through the Schur complement on the constraint block: the SPD
factor is computed once and reused for the Green's columns, which is also
exactly the representation u = phi_0 + sum_i U_i phi_i with
U = A_g^{-1}(b - T phi_0) behind greens_solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import quad
from scipy.special import jn_zeros, jv

from .constraints import ConstraintBlock
from .errors import (NoConvergenceError, NotPositiveDefiniteError,
                     RankDeficientError)

CG_THRESHOLD = 400_000


@dataclass
class SolveReport:
    """Bookkeeping attached to a solve: energy, residuals, solver stats."""

    energy: float = 0.0
    penalty_energy: float = 0.0
    residuals: dict = field(default_factory=dict)
    method: str = "direct"
    n_dofs: int = 0
    factor_nnz: int = 0
    iterations: int = 0


@dataclass
class GreensBasis:
    """Particular solution, Green's columns, Gramian, and T phi_0."""

    phi0: np.ndarray
    phi: np.ndarray          # (n_dofs, N) columns
    gram: np.ndarray         # (N, N), a(phi_i, phi_j)
    t_phi0: np.ndarray       # (N,)


class SpdFactor:
    """Reusable direct factorization of an SPD matrix (CG beyond 4e5 dofs)."""

    def __init__(self, A: sp.spmatrix, tol: float = 1e-10):
        self.A = A.tocsc()
        self.n = A.shape[0]
        self.tol = tol
        self.method = "direct" if self.n <= CG_THRESHOLD else "cg"
        self.nnz = 0
        if self.method == "direct":
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise NotPositiveDefiniteError(
                    f"direct factorization failed: {exc}") from exc
            self.nnz = self._lu.L.nnz + self._lu.U.nnz
        else:
            d = self.A.diagonal()
            if np.any(d <= 0):
                raise NotPositiveDefiniteError("nonpositive diagonal entry")
            self._precond = spla.LinearOperator(
                (self.n, self.n), matvec=lambda x: x / d)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 2:
            return np.column_stack([self.solve(rhs[:, j])
                                    for j in range(rhs.shape[1])])
        if self.method == "direct":
            x = self._lu.solve(rhs)
            x += self._lu.solve(rhs - self.A @ x)    # one refinement step
        else:
            x, info = spla.cg(self.A, rhs, rtol=self.tol * 1e-2, atol=0.0,
                              maxiter=20 * self.n, M=self._precond)
            if info != 0:
                raise NoConvergenceError(f"CG stopped with info={info}")
        scale = np.linalg.norm(rhs)
        if scale > 0:
            rel = np.linalg.norm(rhs - self.A @ x) / scale
            if not np.isfinite(rel) or rel > self.tol:
                raise NotPositiveDefiniteError(
                    f"solve residual {rel:.2e} exceeds tolerance; "
                    "matrix is singular or indefinite")
        return x


def solve_spd(A: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Deterministic SPD solve with relative residual <= tol."""
    return SpdFactor(A, tol=tol).solve(rhs)


def _schur_factor(gram: np.ndarray):
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("constraint rows are linearly dependent") from exc
    d = np.diag(L)
    if np.min(d) < 1e-10 * np.max(d):
        raise RankDeficientError("constraint rows are numerically dependent")
    return L


def solve_kkt(A: sp.spmatrix, block: ConstraintBlock, load: np.ndarray | None = None,
              factor: SpdFactor | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Minimize 1/2 u'Au - load'u subject to R u = b (Schur complement).

    Returns the minimizer and the Lagrange multipliers.
    """
    factor = factor or SpdFactor(A)
    R = block.matrix
    load = np.zeros(A.shape[0]) if load is None else load
    Z = factor.solve(np.asarray(R.T.todense()))
    if Z.ndim == 1:
        Z = Z[:, None]
    S = R @ Z
    S = 0.5 * (S + S.T)
    L = _schur_factor(np.asarray(S))
    u0 = factor.solve(load)
    rhs = R @ u0 - block.targets
    lam = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    u = u0 - Z @ lam
    return u, lam


def penalty_solve(A: sp.spmatrix, block: ConstraintBlock,
                  load: np.ndarray | None = None,
                  tol: float = 1e-10) -> tuple[np.ndarray, SolveReport]:
    """Minimize 1/2 u'Au - load'u + 1/(2 eps) ||P(Ru - b)||_W^2.

    P projects out the weighted span of the block's kernel modes (identity
    when there are none); the assembled system is
    (A + 1/eps R'W_P R) u = load + 1/eps R'W_P b.
    """
    if block.mode != "penalty":
        raise ValueError("penalty_solve needs a block in penalty mode")
    R, w, b = block.matrix, block.weights, block.targets
    eps = block.eps
    load = np.zeros(A.shape[0]) if load is None else load

    WR = sp.diags(w) @ R
    Apen = A + (WR.T @ R) / eps
    rhs = load + (R.T @ (w * b)) / eps
    M = block.orthonormal_modes()
    if M is not None:
        # (n_dofs, k), supported on the contour-adjacent dofs only
        Y = sp.csr_matrix(R.T @ sp.csr_matrix(w[:, None] * M))
        Apen = Apen - (Y @ Y.T) / eps
        rhs = rhs - Y @ (M.T @ (w * b)) / eps

    factor = SpdFactor(Apen, tol=tol)
    u = factor.solve(rhs)

    report = SolveReport(method=factor.method, n_dofs=A.shape[0],
                         factor_nnz=factor.nnz)
    r = block.projected_residual(u)
    report.penalty_energy = 0.5 / eps * float(np.sum(w * r * r))
    report.energy = 0.5 * float(u @ (A @ u)) - float(load @ u)
    for g in block.groups:
        report.residuals[g] = block.weighted_norm(r, g)
    report.residuals["total"] = block.weighted_norm(r)
    return u, report


def greens_solve(A: sp.spmatrix, block: ConstraintBlock,
                 load: np.ndarray | None = None,
                 targets: np.ndarray | None = None,
                 factor: SpdFactor | None = None
                 ) -> tuple[GreensBasis, np.ndarray, np.ndarray, float]:
    """Constrained minimizer through the Green's basis.

    Solves a(phi_i, v) = T_i v for each constraint row, forms the Gramian
    A_g = (T_i phi_j), and returns (basis, U, u, xi) with
    u = phi_0 + phi U,  U = A_g^{-1}(b - T phi_0), and the reduced energy
    xi = 1/2 (b - T phi_0)' A_g^{-1} (b - T phi_0) - 1/2 a(phi_0, phi_0),
    which equals the minimal value of J(u) = 1/2 a(u,u) - load'u.
    """
    factor = factor or SpdFactor(A)
    R = block.matrix
    b = block.targets if targets is None else np.asarray(targets, float)
    load = np.zeros(A.shape[0]) if load is None else load

    phi0 = factor.solve(load) if np.any(load) else np.zeros(A.shape[0])
    phi = factor.solve(np.asarray(R.T.todense()))
    if phi.ndim == 1:
        phi = phi[:, None]
    gram = np.asarray(R @ phi)
    gram = 0.5 * (gram + gram.T)
    L = _schur_factor(gram)
    t_phi0 = np.asarray(R @ phi0)
    resid = b - t_phi0
    U = np.linalg.solve(L.T, np.linalg.solve(L, resid))
    u = phi0 + phi @ U
    xi = 0.5 * float(resid @ U) - 0.5 * float(phi0 @ (A @ phi0))
    return GreensBasis(phi0, phi, gram, t_phi0), U, u, xi


# -- free-space kernel of the regularized operator ---------------------------


class FreeSpaceKernel:
    """Radial Green's function of a4*Lap^4 - a3*Lap^3 + a2*Lap^2 - a1*Lap + a0
    on the plane, via Hankel-type inverse Fourier transforms.

    The Fourier symbol is 1 / sum_k a_k (4 pi^2 |xi|^2)^k; kernel values and
    radial derivative transforms are computed by splitting the oscillatory
    integral at Bessel-function zeros and averaging the alternating tail.
    """

    def __init__(self, a0: float, a1: float = 0.0, a2: float = 0.0,
                 a3: float = 0.0, a4: float = 0.0, rtol: float = 1e-8,
                 n_segments: int = 40, n_tail: int = 24):
        if a0 <= 0 or a4 <= 0:
            raise ValueError("a0 and a4 must be positive")
        self.a = (a0, a1, a2, a3, a4)
        self.rtol = rtol
        self.n_segments = n_segments
        self.n_tail = n_tail
        # crossover wavenumber where the a4 term takes over
        self.rho_star = (a0 / a4) ** 0.125 / (2.0 * np.pi)
        self._cache: dict = {}

    def spectrum(self, rho):
        rho = np.asarray(rho, dtype=float)
        q = (2.0 * np.pi * rho) ** 2
        a0, a1, a2, a3, a4 = self.a
        return 1.0 / (a0 + q * (a1 + q * (a2 + q * (a3 + q * a4))))

    def _hankel(self, m: int, p: int, r: float) -> float:
        """2 pi * int_0^inf f(rho) (2 pi rho)^p J_m(2 pi rho r) rho d rho."""
        key = (m, p, round(float(r), 14))
        if key in self._cache:
            return self._cache[key]

        def integrand(rho):
            return (2.0 * np.pi * rho) ** p * self.spectrum(rho) * rho \
                * jv(m, 2.0 * np.pi * rho * r)

        if r == 0.0:
            if m != 0:
                return 0.0
            val = 2.0 * np.pi * self._smooth_quad(
                lambda rho: (2.0 * np.pi * rho) ** p * self.spectrum(rho) * rho)
            self._cache[key] = val
            return val

        zeros = jn_zeros(m, self.n_segments + self.n_tail) / (2.0 * np.pi * r)
        pts = np.concatenate([[0.0], zeros])
        segs = np.array([
            quad(integrand, pts[i], pts[i + 1], epsabs=0.0,
                 epsrel=self.rtol * 1e-2, limit=200)[0]
            for i in range(len(pts) - 1)])
        head = segs[:self.n_segments].sum()
        tail = _averaged_tail(segs[self.n_segments:])
        val = 2.0 * np.pi * (head + tail)
        self._cache[key] = val
        return val

    def _smooth_quad(self, g) -> float:
        scale = self.rho_star
        total, err = quad(g, 0.0, 10.0 * scale, epsabs=0.0,
                          epsrel=self.rtol * 1e-2, limit=200)
        tail, terr = quad(g, 10.0 * scale, np.inf, epsabs=0.0,
                          epsrel=self.rtol * 1e-2, limit=200)
        val = total + tail
        if val != 0 and (err + terr) / abs(val) > self.rtol:
            raise NoConvergenceError("kernel quadrature did not converge")
        return val

    def values(self, r) -> np.ndarray:
        """Kernel values G(r)."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.array([self._hankel(0, 0, abs(ri)) for ri in r])

    def second_derivatives(self, r) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(G_xx, G_xy, G_yy) along the positive x-axis at distances r."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        k0 = np.array([self._hankel(0, 2, abs(ri)) for ri in r])
        k2 = np.array([self._hankel(2, 2, abs(ri)) for ri in r])
        gxx = 0.5 * (-k0 + k2)
        gyy = 0.5 * (-k0 - k2)
        gxy = np.zeros_like(gxx)
        return gxx, gxy, gyy

    def d4_block(self, displacement) -> np.ndarray:
        """3x3 matrix of op_j op_l G at the displacement, with the operators
        (d_xx, d_xy, d_yy); this is one particle-pair block of the Gramian."""
        d = np.asarray(displacement, dtype=float)
        r = float(np.hypot(*d))
        i0 = self._hankel(0, 4, r)
        if r == 0.0:
            i2 = i4 = 0.0
            phi = 0.0
        else:
            i2 = self._hankel(2, 4, r)
            i4 = self._hankel(4, 4, r)
            phi = float(np.arctan2(d[1], d[0]))
        c2, s2 = np.cos(2 * phi), np.sin(2 * phi)
        c4, s4 = np.cos(4 * phi), np.sin(4 * phi)
        xxxx = 0.375 * i0 - 0.5 * i2 * c2 + 0.125 * i4 * c4
        yyyy = 0.375 * i0 + 0.5 * i2 * c2 + 0.125 * i4 * c4
        xxyy = 0.125 * i0 - 0.125 * i4 * c4
        xxxy = -0.25 * i2 * s2 + 0.125 * i4 * s4
        xyyy = -0.25 * i2 * s2 - 0.125 * i4 * s4
        return np.array([[xxxx, xxxy, xxyy],
                         [xxxy, xxyy, xyyy],
                         [xxyy, xyyy, yyyy]])


def _averaged_tail(segs: np.ndarray) -> float:
    """Sum an alternating, slowly decaying series by repeated averaging."""
    if len(segs) == 0:
        return 0.0
    s = np.cumsum(segs)
    while len(s) > 1:
        s = 0.5 * (s[:-1] + s[1:])
    return float(s[0])


def free_space_kernel(a0: float, a1: float = 0.0, a2: float = 0.0,
                      a3: float = 0.0, a4: float = 0.0,
                      r=None, rtol: float = 1e-8) -> dict:
    """Kernel values and second-derivative samples at the given radii."""
    kern = FreeSpaceKernel(a0, a1, a2, a3, a4, rtol=rtol)
    r = np.atleast_1d(np.asarray(r if r is not None else [0.0], dtype=float))
    gxx, gxy, gyy = kern.second_derivatives(r)
    return {"r": r, "G": kern.values(r), "Gxx": gxx, "Gxy": gxy, "Gyy": gyy,
            "kernel": kern}
