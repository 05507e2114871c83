"""Lagrange spaces, quadrature, assembly and CG solves for the parametric problems.

Every parametric problem shares one sparsity pattern per mesh: the system
matrix is  mass + c * stiffness  with c > 0 the diffusion coefficient, with
homogeneous Dirichlet rows/columns eliminated symmetrically.  Mass and
stiffness are assembled once per space and recombined per coefficient, which
keeps the per-index cost of a sweep at one vector add plus one CG solve.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .mesh import signed_areas

__all__ = [
    "QuadratureRule",
    "FeSpace",
    "SparseSystem",
    "ParametricOperator",
    "SolverError",
    "DegenerateCellError",
    "triangle_rule",
    "fe_space",
    "assemble_parametric",
    "solve_cg",
    "l2_norm",
    "l2_error",
    "interpolate",
]

_CHUNK = 1 << 16


class SolverError(RuntimeError):
    pass


class DegenerateCellError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle {x, y >= 0, x + y <= 1}.

    Points are barycentric (nq, 3); weights sum to the reference area 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def triangle_rule(degree=4):
    """Symmetric 6-point rule, exact for polynomials up to degree 4."""
    if degree > 4:
        raise ValueError(f"no built-in rule of degree {degree}")
    a1, b1, w1 = 0.8168475729804585, 0.0915762135097707, 0.1099517436553219
    a2, b2, w2 = 0.1081030181680702, 0.4459484909159649, 0.2233815896780115
    points = np.array(
        [
            [a1, b1, b1],
            [b1, a1, b1],
            [b1, b1, a1],
            [a2, b2, b2],
            [b2, a2, b2],
            [b2, b2, a2],
        ]
    )
    weights = 0.5 * np.array([w1, w1, w1, w2, w2, w2])
    return QuadratureRule(points=points, weights=weights, degree=4)


def _basis_values(degree, bary):
    """Shape function values at barycentric points, shape (npts, nb)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    if degree == 1:
        return np.stack([l0, l1, l2], axis=1)
    if degree == 2:
        return np.stack(
            [
                l0 * (2 * l0 - 1),
                l1 * (2 * l1 - 1),
                l2 * (2 * l2 - 1),
                4 * l1 * l2,
                4 * l2 * l0,
                4 * l0 * l1,
            ],
            axis=1,
        )
    raise ValueError(f"unsupported degree {degree}")


def _basis_grads(degree, bary):
    """Reference gradients w.r.t. (xi, eta) at barycentric points, (npts, nb, 2)."""
    # Barycentric gradients: grad l0 = (-1,-1), grad l1 = (1,0), grad l2 = (0,1).
    g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    npts = bary.shape[0]
    if degree == 1:
        return np.broadcast_to(g, (npts, 3, 2)).copy()
    if degree == 2:
        l = bary
        out = np.empty((npts, 6, 2))
        for i in range(3):
            out[:, i] = (4 * l[:, i, None] - 1) * g[i]
        for e in range(3):
            a, b = (e + 1) % 3, (e + 2) % 3
            out[:, 3 + e] = 4 * (l[:, a, None] * g[b] + l[:, b, None] * g[a])
        return out
    raise ValueError(f"unsupported degree {degree}")


@dataclass(frozen=True)
class FeSpace:
    """Continuous Lagrange space of degree p with Dirichlet dof bookkeeping."""

    mesh: object
    degree: int
    dof_coords: np.ndarray = field(repr=False)
    cell_dofs: np.ndarray = field(repr=False)
    boundary_dofs: np.ndarray = field(repr=False)

    @property
    def num_dofs(self):
        return self.dof_coords.shape[0]


def fe_space(mesh, degree=1):
    if degree == 1:
        dof_coords = mesh.vertices
        cell_dofs = mesh.cells.astype(np.int32)
        bvertices = np.unique(mesh.facets[mesh.boundary_facet_flags].ravel())
        boundary_dofs = bvertices.astype(np.int32)
    elif degree == 2:
        nv = mesh.num_vertices
        midpoints = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
        dof_coords = np.vstack([mesh.vertices, midpoints])
        cell_dofs = np.hstack([mesh.cells, nv + mesh.cell_facets]).astype(np.int32)
        bvertices = np.unique(mesh.facets[mesh.boundary_facet_flags].ravel())
        bmid = nv + np.flatnonzero(mesh.boundary_facet_flags)
        boundary_dofs = np.sort(np.concatenate([bvertices, bmid])).astype(np.int32)
    else:
        raise ValueError(f"unsupported degree {degree}")
    return FeSpace(
        mesh=mesh,
        degree=degree,
        dof_coords=dof_coords,
        cell_dofs=cell_dofs,
        boundary_dofs=boundary_dofs,
    )


@dataclass(frozen=True)
class SparseSystem:
    """Symmetric CSR system with the Dirichlet set already eliminated."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray


def _cell_geometry(mesh):
    """Jacobian determinants (= 2*area) and inverse transposes per cell."""
    det = 2.0 * signed_areas(mesh.vertices, mesh.cells)
    if np.any(det <= 0.0):
        raise DegenerateCellError("cell with nonpositive Jacobian determinant")
    pts = mesh.cell_coordinates()
    d1 = pts[:, 1] - pts[:, 0]
    d2 = pts[:, 2] - pts[:, 0]
    # Jacobian columns are d1, d2; inverse = adj/det.
    jinv = np.empty((mesh.num_cells, 2, 2))
    jinv[:, 0, 0] = d2[:, 1]
    jinv[:, 0, 1] = -d2[:, 0]
    jinv[:, 1, 0] = -d1[:, 1]
    jinv[:, 1, 1] = d1[:, 0]
    jinv /= det[:, None, None]
    return det, jinv


def _quad_points_physical(mesh, rule, cells=slice(None)):
    """Map reference quadrature points into the given cells, (ncells, nq, 2)."""
    pts = mesh.cell_coordinates()[cells]
    return np.einsum("qv,cvd->cqd", rule.points, pts)


def _data_values(space, f, rule, cells=slice(None)):
    """Data field at the rule's points of the given cells, (ncells, nq).

    ``f`` is either a callable (x, y) -> values, evaluated pointwise, or a
    coefficient vector of the space itself (a projected data field).
    """
    if isinstance(f, np.ndarray):
        V = _basis_values(space.degree, rule.points)
        return np.einsum("cv,qv->cq", f[space.cell_dofs[cells]], V)
    xq = _quad_points_physical(space.mesh, rule, cells)
    return np.asarray(f(xq[..., 0], xq[..., 1]), dtype=np.float64)


class ParametricOperator:
    """Assembled mass/stiffness pair plus load vector for one space and data field.

    ``system(c)`` returns the eliminated system  mass + c*stiffness  without
    reassembly.  The eliminated mass carries unit diagonal entries on the
    Dirichlet set and the eliminated stiffness zero ones, so the combination
    has exactly unit constrained diagonals for every c.
    """

    def __init__(self, space, f, rule=None, eliminate=True):
        self.space = space
        self.rule = rule or triangle_rule()
        mesh = space.mesh
        nb = space.cell_dofs.shape[1]
        ndofs = space.num_dofs
        det, jinv = _cell_geometry(mesh)

        V = _basis_values(space.degree, self.rule.points)
        Gr = _basis_grads(space.degree, self.rule.points)
        w = self.rule.weights
        mass_ref = np.einsum("q,qi,qj->ij", w, V, V)

        rows = np.repeat(space.cell_dofs, nb, axis=1).ravel()
        cols = np.tile(space.cell_dofs, (1, nb)).ravel()
        keys = rows.astype(np.int64) * ndofs + cols
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        nnz = len(unique_keys)
        indices = (unique_keys % ndofs).astype(np.int32)
        row_of_nnz = (unique_keys // ndofs).astype(np.int32)
        indptr = np.zeros(ndofs + 1, dtype=np.int32)
        np.cumsum(np.bincount(row_of_nnz, minlength=ndofs), out=indptr[1:])

        mass_data = np.zeros(nnz)
        stiff_data = np.zeros(nnz)
        load = np.zeros(ndofs)
        nc = mesh.num_cells
        for start in range(0, nc, _CHUNK):
            cells = slice(start, min(start + _CHUNK, nc))
            det_c = det[cells]
            gp = np.einsum("qid,cde->cqie", Gr, jinv[cells])
            ke = det_c[:, None, None] * np.einsum("q,cqid,cqjd->cij", w, gp, gp)
            me = det_c[:, None, None] * mass_ref
            fq = _data_values(space, f, self.rule, cells)
            be = det_c[:, None] * np.einsum("q,cq,qi->ci", w, fq, V)
            sl = inverse[start * nb * nb : (start + ke.shape[0]) * nb * nb]
            mass_data += np.bincount(sl, weights=me.ravel(), minlength=nnz)
            stiff_data += np.bincount(sl, weights=ke.ravel(), minlength=nnz)
            load += np.bincount(space.cell_dofs[cells].ravel(), weights=be.ravel(), minlength=ndofs)

        # Symmetric elimination: zero every entry touching a Dirichlet dof,
        # put 1 on the mass diagonal there, zero the rhs.
        if eliminate:
            constrained = np.zeros(ndofs, dtype=bool)
            constrained[space.boundary_dofs] = True
            touched = constrained[row_of_nnz] | constrained[indices]
            mass_data[touched] = 0.0
            stiff_data[touched] = 0.0
            diag_nnz = np.flatnonzero((row_of_nnz == indices) & constrained[row_of_nnz])
            mass_data[diag_nnz] = 1.0
            load[space.boundary_dofs] = 0.0

        self.indptr = indptr
        self.indices = indices
        self.mass_data = mass_data
        self.stiff_data = stiff_data
        self.load = load
        self._diag_nnz_all = self._diagonal_positions(ndofs)

    def _diagonal_positions(self, ndofs):
        pos = np.empty(ndofs, dtype=np.int64)
        for i in range(ndofs):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            pos[i] = lo + np.searchsorted(self.indices[lo:hi], i)
        return pos

    def matrix_data(self, c):
        return self.mass_data + c * self.stiff_data

    def diagonal(self, c):
        return self.matrix_data(c)[self._diag_nnz_all]

    def system(self, c):
        if c <= 0.0:
            raise ValueError(f"diffusion coefficient must be positive, got {c}")
        ndofs = self.space.num_dofs
        matrix = sp.csr_matrix(
            (self.matrix_data(c), self.indices, self.indptr), shape=(ndofs, ndofs)
        )
        return SparseSystem(
            matrix=matrix, rhs=self.load.copy(), dirichlet_dofs=self.space.boundary_dofs
        )


def assemble_parametric(space, c, f):
    """System matrix mass + c*stiffness with load from f, Dirichlet-eliminated."""
    return ParametricOperator(space, f).system(c)


@njit(cache=True, nogil=True)
def _pcg(indptr, indices, data, b, x, dinv, rel_tol, max_iter):
    """Jacobi-preconditioned CG; returns (iterations, relative residual, converged)."""
    n = b.shape[0]
    bnorm2 = 0.0
    for i in range(n):
        bnorm2 += b[i] * b[i]
    if bnorm2 == 0.0:
        for i in range(n):
            x[i] = 0.0
        return 0, 0.0, True
    bnorm = np.sqrt(bnorm2)

    r = np.empty(n)
    z = np.empty(n)
    p = np.empty(n)
    ap = np.empty(n)
    rr = 0.0
    rz = 0.0
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        r[i] = b[i] - acc
        z[i] = dinv[i] * r[i]
        p[i] = z[i]
        rr += r[i] * r[i]
        rz += r[i] * z[i]
    if np.sqrt(rr) <= rel_tol * bnorm:
        return 0, np.sqrt(rr) / bnorm, True

    for it in range(1, max_iter + 1):
        pap = 0.0
        for i in range(n):
            acc = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                acc += data[k] * p[indices[k]]
            ap[i] = acc
            pap += p[i] * acc
        alpha = rz / pap
        rr = 0.0
        rz_new = 0.0
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
            zi = dinv[i] * r[i]
            z[i] = zi
            rr += r[i] * r[i]
            rz_new += r[i] * zi
        if np.sqrt(rr) <= rel_tol * bnorm:
            return it, np.sqrt(rr) / bnorm, True
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
    return max_iter, np.sqrt(rr) / bnorm, False


def solve_cg(system, rel_tol=1e-12, max_iter=20000, x0=None):
    """CG with Jacobi preconditioning down to ||r|| <= rel_tol * ||rhs||.

    Dirichlet dofs are held at exactly zero.  Raises SolverError on
    non-convergence, reporting the final relative residual.
    """
    A = system.matrix
    x = np.zeros(A.shape[0]) if x0 is None else np.array(x0, dtype=np.float64)
    x[system.dirichlet_dofs] = 0.0
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise SolverError("system diagonal not positive; matrix is not SPD")
    iters, rel_res, converged = _pcg(
        A.indptr, A.indices, A.data, system.rhs, x, 1.0 / diag, rel_tol, max_iter
    )
    if not converged:
        raise SolverError(
            f"CG did not converge in {max_iter} iterations; relative residual {rel_res:.3e}"
        )
    return x


def _cell_values(space, coeffs, V, cells=slice(None)):
    """u_h at the rule's points of the given cells, (ncells, nq)."""
    return np.einsum("cv,qv->cq", coeffs[space.cell_dofs[cells]], V)


def l2_norm(space, coeffs, rule=None):
    """Quadrature L2 norm of a finite element function given by its coefficients."""
    return l2_error(space, coeffs, None, rule)


def l2_error(space, coeffs, exact, rule=None):
    """Quadrature L2 distance between a finite element function and a field.

    ``exact`` is a callable (x, y) -> values, a coefficient vector of the
    same space, or None for the plain norm.
    """
    rule = rule or triangle_rule()
    mesh = space.mesh
    det = 2.0 * signed_areas(mesh.vertices, mesh.cells)
    V = _basis_values(space.degree, rule.points)
    total = 0.0
    nc = mesh.num_cells
    for start in range(0, nc, _CHUNK):
        cells = slice(start, min(start + _CHUNK, nc))
        diff = _cell_values(space, coeffs, V, cells)
        if exact is not None:
            diff = diff - _data_values(space, exact, rule, cells)
        total += float(np.einsum("c,q,cq->", det[cells], rule.weights, diff**2))
    return float(np.sqrt(total))


def interpolate(space, ffield):
    """Nodal interpolation: coefficient at each dof = field value at its node."""
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    return np.asarray(ffield(x, y), dtype=np.float64)
