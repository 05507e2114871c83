"""Cell-local Bank-Weiser error problems and their fractional accumulation.

For each parametric solve u_c (reaction coefficient 1, diffusion coefficient
c) the local error problem on a cell T is posed in the span of the quadratic
edge bubbles that survive the Dirichlet boundary (one bubble per non-boundary
facet):

    (e, v)_T + c (grad e, grad v)_T
        = (r, v)_T + 1/2 sum_{interior facets E} (J, v)_E

with interior residual  r = f - u_c + c * lap(u_c)  (the Laplacian term
vanishes identically for degree-1 trial functions) and flux jump
J = c * [[du_c/dn]], computed once per facet with the normal oriented from
the lower- to the higher-indexed incident cell; the value is independent of
that orientation.  Boundary facets carry no jump and their bubbles are
removed from the local space.

The fractional error field is the weighted sum of the local solutions over
the quadrature indices; its cell L2 norms are the refinement indicators.
"""

from dataclasses import dataclass, field

import numpy as np

from .fem import _basis_grads, _cell_geometry, _data_values, triangle_rule

__all__ = [
    "BwConfig",
    "ErrorField",
    "CellResidual",
    "BwWorkspace",
    "local_residual_data",
    "solve_local_bw",
    "accumulate_fractional",
]


@dataclass(frozen=True)
class BwConfig:
    """Bank-Weiser space choice: degree p_plus functions with vanishing
    degree p_minus interpolant.  Only the classical (2, 1) pair, whose local
    space is spanned by the quadratic edge bubbles, is implemented."""

    p_plus: int = 2
    p_minus: int = 1

    def __post_init__(self):
        if (self.p_plus, self.p_minus) != (2, 1):
            raise NotImplementedError("only the (p_plus, p_minus) = (2, 1) space is supported")


@dataclass(frozen=True)
class ErrorField:
    """Accumulated fractional error solutions and their indicators."""

    e_coeffs: np.ndarray = field(repr=False)  # (nc, 3) bubble coefficients
    eta_local: np.ndarray = field(repr=False)  # (nc,) cell indicators
    eta_global: float


@dataclass(frozen=True)
class CellResidual:
    """Residual data of one cell: interior residual at the quadrature points
    and one flux-jump value per local facet (zero on boundary facets)."""

    r_qp: np.ndarray
    jumps: np.ndarray
    facet_lengths: np.ndarray
    boundary_facets: np.ndarray
    det: float
    bubble_mass: np.ndarray
    bubble_stiffness: np.ndarray


def _bubble_values(bary):
    """Edge bubble e = 4*l_{e+1}*l_{e+2} at barycentric points, (npts, 3)."""
    out = np.empty((bary.shape[0], 3))
    for e in range(3):
        out[:, e] = 4.0 * bary[:, (e + 1) % 3] * bary[:, (e + 2) % 3]
    return out


def _bubble_grads(bary):
    """Reference gradients of the edge bubbles, (npts, 3, 2)."""
    g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    out = np.empty((bary.shape[0], 3, 2))
    for e in range(3):
        a, b = (e + 1) % 3, (e + 2) % 3
        out[:, e] = 4.0 * (bary[:, b, None] * g[a] + bary[:, a, None] * g[b])
    return out


class BwWorkspace:
    """Per-mesh precomputation for the batch of cell-local error problems.

    Only degree-1 trial spaces are supported (the local space pair is (2, 1)
    and the interior residual drops its Laplacian term).
    """

    def __init__(self, space, f, cfg=None, rule=None):
        if space.degree != 1:
            raise ValueError("Bank-Weiser estimation is implemented for degree-1 spaces")
        self.space = space
        self.cfg = cfg or BwConfig()
        self.rule = rule or triangle_rule()
        mesh = space.mesh
        self.mesh = mesh
        nc = mesh.num_cells

        det, jinv = _cell_geometry(mesh)
        self.det = det
        w = self.rule.weights
        B = _bubble_values(self.rule.points)
        self.bubble_at_qp = B
        L = self.rule.points  # barycentric = P1 hat values
        Gb = _bubble_grads(self.rule.points)

        # Reference mass of the bubbles and their moments against the hats;
        # both are exact under the degree-4 rule.
        self.mass_ref = np.einsum("q,qi,qj->ij", w, B, B)
        self.hat_moments_ref = np.einsum("q,qi,qj->ij", w, B, L)

        gb_phys = np.einsum("qid,cde->cqie", Gb, jinv)
        self.stiff_cells = det[:, None, None] * np.einsum("q,cqid,cqjd->cij", w, gb_phys, gb_phys)

        # P1 gradients for flux jumps.
        g1 = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        self.hat_grads = np.einsum("vd,cde->cve", g1, jinv)

        # Data moments int_T f b_i.
        fq = _data_values(space, f, self.rule)
        self.f_qp = fq
        self.f_moments = det[:, None] * np.einsum("q,cq,qi->ci", w, fq, B)

        # Facet geometry: unit normal oriented low cell -> high cell.
        fverts = mesh.vertices[mesh.facets]
        tang = fverts[:, 1] - fverts[:, 0]
        self.facet_lengths = np.hypot(tang[:, 0], tang[:, 1])
        normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / self.facet_lengths[:, None]
        centroids = mesh.cell_coordinates().mean(axis=1)
        interior = ~mesh.boundary_facet_flags
        lo = mesh.facet_cells[:, 0]
        hi = np.where(interior, mesh.facet_cells[:, 1], lo)
        toward = centroids[hi] - centroids[lo]
        flip = (normals * toward).sum(axis=1) < 0.0
        normals[flip] *= -1.0
        self.facet_normals = normals
        self.interior_facets = interior

        self.cell_facet_lengths = self.facet_lengths[mesh.cell_facets]
        self.boundary_bubble = mesh.boundary_facet_flags[mesh.cell_facets]
        self._lo = lo
        self._hi = hi

    def gradient_jumps(self, u):
        """Geometric normal-derivative jump per facet: (grad_hi - grad_lo).n, 0 on the boundary."""
        ucell = u[self.space.cell_dofs]
        grads = np.einsum("cv,cvd->cd", ucell, self.hat_grads)
        jmp = ((grads[self._hi] - grads[self._lo]) * self.facet_normals).sum(axis=1)
        return np.where(self.interior_facets, jmp, 0.0)

    def residual_moments(self, u):
        """int_T (f - u) b_i for all cells, (nc, 3)."""
        ucell = u[self.space.cell_dofs]
        return self.f_moments - self.det[:, None] * np.einsum(
            "ij,cj->ci", self.hat_moments_ref, ucell
        )

    def local_rhs(self, u, c):
        """Right-hand sides of the local problems for one parametric solve."""
        jmp = self.gradient_jumps(u)
        jmp_cf = np.where(self.boundary_bubble, 0.0, jmp[self.mesh.cell_facets])
        # 1/2 * int_E J b = (|E|/3) * J on the bubble's own facet.
        return self.residual_moments(u) + (c / 3.0) * self.cell_facet_lengths * jmp_cf

    def local_matrices(self, c):
        return self.det[:, None, None] * self.mass_ref + c * self.stiff_cells

    def solve_parametric_bw(self, u, c):
        """Bubble coefficients of every cell's local error solution, (nc, 3)."""
        rhs = self.local_rhs(u, c)
        # Normalize so the 3x3 determinants stay in float64 range for huge c.
        sigma = max(1.0, c)
        A = self.local_matrices(c) / sigma
        b = rhs / sigma
        mask = self.boundary_bubble
        rows, locs = np.nonzero(mask)
        A[rows, locs, :] = 0.0
        A[rows, :, locs] = 0.0
        A[rows, locs, locs] = 1.0
        b[rows, locs] = 0.0
        return _solve3x3(A, b)

    def error_field(self, e_coeffs):
        """Wrap accumulated bubble coefficients with their L2 indicators."""
        mass = self.det[:, None, None] * self.mass_ref
        eta2 = np.einsum("ci,cij,cj->c", e_coeffs, mass, e_coeffs)
        eta2 = np.maximum(eta2, 0.0)
        eta = np.sqrt(eta2)
        return ErrorField(
            e_coeffs=e_coeffs, eta_local=eta, eta_global=float(np.sqrt(eta2.sum()))
        )


def _solve3x3(A, b):
    """Batched exact 3x3 solve via the adjugate; A is (n,3,3), b is (n,3)."""
    a00, a01, a02 = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    a10, a11, a12 = A[:, 1, 0], A[:, 1, 1], A[:, 1, 2]
    a20, a21, a22 = A[:, 2, 0], A[:, 2, 1], A[:, 2, 2]
    c00 = a11 * a22 - a12 * a21
    c01 = a12 * a20 - a10 * a22
    c02 = a10 * a21 - a11 * a20
    det = a00 * c00 + a01 * c01 + a02 * c02
    if np.any(det == 0.0):
        raise ArithmeticError("singular local Bank-Weiser matrix")
    c10 = a02 * a21 - a01 * a22
    c11 = a00 * a22 - a02 * a20
    c12 = a01 * a20 - a00 * a21
    c20 = a01 * a12 - a02 * a11
    c21 = a02 * a10 - a00 * a12
    c22 = a00 * a11 - a01 * a10
    x = np.empty_like(b)
    x[:, 0] = (c00 * b[:, 0] + c10 * b[:, 1] + c20 * b[:, 2]) / det
    x[:, 1] = (c01 * b[:, 0] + c11 * b[:, 1] + c21 * b[:, 2]) / det
    x[:, 2] = (c02 * b[:, 0] + c12 * b[:, 1] + c22 * b[:, 2]) / det
    return x


def local_residual_data(space, u, c, f, cell, workspace=None):
    """Residual data of one cell of a solved parametric problem.

    The interior residual is returned as its values at the cell's quadrature
    points; for degree-1 spaces the Laplacian contribution is identically
    zero.  Jumps already include the diffusion factor c.
    """
    ws = workspace or BwWorkspace(space, f)
    ucell = u[space.cell_dofs[cell]]
    u_qp = ws.rule.points @ ucell
    r_qp = ws.f_qp[cell] - u_qp
    jumps = c * np.where(
        ws.boundary_bubble[cell], 0.0, ws.gradient_jumps(u)[space.mesh.cell_facets[cell]]
    )
    return CellResidual(
        r_qp=r_qp,
        jumps=jumps,
        facet_lengths=ws.cell_facet_lengths[cell],
        boundary_facets=ws.boundary_bubble[cell].copy(),
        det=float(ws.det[cell]),
        bubble_mass=ws.det[cell] * ws.mass_ref,
        bubble_stiffness=ws.stiff_cells[cell].copy(),
    )


def solve_local_bw(data, c, cfg=None, rule=None):
    """Solve one cell's local error problem from its residual data.

    Returns the three bubble coefficients; bubbles of boundary facets are
    constrained to zero.  If all three facets lie on the boundary the local
    space is empty and the solution is identically zero.
    """
    cfg = cfg or BwConfig()
    rule = rule or triangle_rule()
    B = _bubble_values(rule.points)
    rhs = data.det * np.einsum("q,q,qi->i", rule.weights, data.r_qp, B)
    rhs = rhs + data.jumps * data.facet_lengths / 3.0
    sigma = max(1.0, c)
    A = (data.bubble_mass + c * data.bubble_stiffness) / sigma
    b = rhs / sigma
    for e in range(3):
        if data.boundary_facets[e]:
            A[e, :] = 0.0
            A[:, e] = 0.0
            A[e, e] = 1.0
            b[e] = 0.0
    return _solve3x3(A[None], b[None])[0]


def accumulate_fractional(workspace, scheme, local_solutions):
    """Weighted sum of per-index local solutions and the resulting indicators.

    ``local_solutions`` is a sequence of (nc, 3) coefficient arrays aligned
    with the scheme's ascending indices l = -M..N.
    """
    solutions = list(local_solutions)
    if len(solutions) != scheme.num_terms:
        raise ValueError(
            f"expected {scheme.num_terms} local solution arrays, got {len(solutions)}"
        )
    nc = workspace.mesh.num_cells
    acc = np.zeros((nc, 3))
    for w_l, e_l in zip(scheme.weights, solutions):
        if e_l.shape != (nc, 3):
            raise ValueError("local solutions drawn from a different mesh or basis")
        acc += w_l * e_l
    return workspace.error_field(acc)
