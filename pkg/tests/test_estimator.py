import math

import numpy as np
import pytest

from fracfem.driver import PROBLEMS
from fracfem.estimator import (
    BwConfig,
    BwWorkspace,
    accumulate_fractional,
    local_residual_data,
    solve_local_bw,
)
from fracfem.fem import assemble_parametric, fe_space, interpolate, solve_cg
from fracfem.mesh import _build_mesh, unit_square_mesh, uniform_refine
from fracfem.rational import truncated_scheme

from oracles import bubble_values, bw_global_estimate_dense, duffy_rule


def single_triangle_space():
    mesh = _build_mesh(
        np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]], dtype=np.int32)
    )
    return fe_space(mesh, 1)


def solved_setup(n=4, c=1.0, scale=np.pi, problem="sines2d", refined=0):
    prob = PROBLEMS[problem]
    mesh = unit_square_mesh(n, scale)
    for _ in range(refined):
        mesh = uniform_refine(mesh)
    space = fe_space(mesh, 1)
    u = solve_cg(assemble_parametric(space, c, prob.f))
    ws = BwWorkspace(space, prob.f)
    return prob, space, u, ws


class TestBwConfig:
    def test_default_pair(self):
        cfg = BwConfig()
        assert (cfg.p_plus, cfg.p_minus) == (2, 1)

    def test_other_pairs_rejected(self):
        with pytest.raises(NotImplementedError):
            BwConfig(p_plus=3, p_minus=1)

    def test_local_dimension_drops_per_boundary_facet(self):
        # interior cell keeps 3 bubbles, a cell with k boundary facets 3-k
        mesh = uniform_refine(unit_square_mesh(2, 1.0))
        ws = BwWorkspace(fe_space(mesh, 1), lambda x, y: 0.0 * x)
        k_boundary = ws.boundary_bubble.sum(axis=1)
        assert k_boundary.min() == 0
        assert k_boundary.max() >= 1
        # constrained bubbles solve to exactly zero
        u = np.zeros(mesh.num_vertices)
        e = ws.solve_parametric_bw(u, 1.0)
        assert np.all(e[ws.boundary_bubble] == 0.0)


class TestResidualData:
    def test_zero_everything(self):
        prob, space, _, ws = solved_setup(n=2, scale=1.0)
        u = np.zeros(space.num_dofs)
        zero_f = lambda x, y: 0.0 * x
        ws0 = BwWorkspace(space, zero_f)
        data = local_residual_data(space, u, 1.0, zero_f, cell=3, workspace=ws0)
        assert np.all(data.r_qp == 0.0)
        assert np.all(data.jumps == 0.0)

    def test_affine_solution_has_no_jumps(self):
        mesh = unit_square_mesh(2, 1.0)
        space = fe_space(mesh, 1)
        affine = lambda x, y: 2.0 * x - y + 0.5
        u = interpolate(space, affine)
        ws = BwWorkspace(space, affine)
        jumps = ws.gradient_jumps(u)
        assert np.abs(jumps).max() <= 1e-13

    def test_residual_matches_pointwise_field(self):
        # with u interpolating the data's parametric solution, r = f - u at
        # the quadrature points (the Laplacian term vanishes for degree 1)
        prob, space, _, ws = solved_setup(n=4)
        c = 2.0
        u = interpolate(space, prob.u_l(c))
        ws = BwWorkspace(space, prob.f)
        cell = 7
        data = local_residual_data(space, u, c, prob.f, cell, workspace=ws)
        assert np.allclose(data.r_qp, ws.f_qp[cell] - (ws.rule.points @ u[space.cell_dofs[cell]]),
                           rtol=0, atol=1e-14)


class TestLocalSolve:
    def test_zero_data_zero_solution(self):
        prob, space, u, ws = solved_setup(n=2, scale=1.0)
        zero = np.zeros(space.num_dofs)
        ws0 = BwWorkspace(space, lambda x, y: 0.0 * x)
        e = ws0.solve_parametric_bw(zero, 1.0)
        assert np.all(e == 0.0)

    def test_reference_cell_constant_residual(self):
        # r = 1, no jumps: rhs_i = int_T b_i; verify against a dense solve
        # assembled at doubled quadrature degree
        space = single_triangle_space()
        ws = BwWorkspace(space, lambda x, y: np.ones_like(x))
        u = np.zeros(3)
        data = local_residual_data(space, u, 1.0, lambda x, y: np.ones_like(x), 0, workspace=ws)
        # all three facets are on the boundary: empty local space
        assert np.all(solve_local_bw(data, 1.0) == 0.0)

        # embed the reference triangle with interior facets instead
        mesh = uniform_refine(unit_square_mesh(2, 1.0))
        space = fe_space(mesh, 1)
        one = lambda x, y: np.ones_like(x)
        ws = BwWorkspace(space, one)
        cell = int(np.flatnonzero(ws.boundary_bubble.sum(axis=1) == 0)[0])
        data = local_residual_data(space, np.zeros(space.num_dofs), 1.0, one, cell, workspace=ws)
        got = solve_local_bw(data, 1.0)

        pts, wts = duffy_rule(8)
        bub = bubble_values(pts)
        det = data.det
        A = np.zeros((3, 3))
        for q in range(len(wts)):
            A += wts[q] * det * np.outer(bub[q], bub[q])
        A += data.bubble_stiffness  # c = 1
        rhs = det * (wts[:, None] * bub).sum(axis=0)
        expected = np.linalg.solve(A, rhs)
        assert np.allclose(got, expected, rtol=1e-12)

    def test_batch_equals_percell(self):
        prob, space, u, ws = solved_setup(n=4, c=3.0)
        batch = ws.solve_parametric_bw(u, 3.0)
        for cell in range(space.mesh.num_cells):
            data = local_residual_data(space, u, 3.0, prob.f, cell, workspace=ws)
            single = solve_local_bw(data, 3.0)
            assert np.allclose(single, batch[cell], rtol=1e-11, atol=1e-15)

    def test_huge_coefficient_stays_finite(self):
        prob, space, u, ws = solved_setup(n=4)
        c = math.exp(2 * 366 * 0.26)  # deepest diffusion coefficient at kappa=0.26
        u2 = solve_cg(assemble_parametric(space, c, prob.f))
        e = ws.solve_parametric_bw(u2, c)
        assert np.all(np.isfinite(e))


class TestAccumulation:
    def test_all_zero(self):
        prob, space, u, ws = solved_setup(n=2, scale=1.0)
        scheme = truncated_scheme(0.5, 0.26, 2, 2)
        zeros = [np.zeros((space.mesh.num_cells, 3))] * scheme.num_terms
        field = accumulate_fractional(ws, scheme, zeros)
        assert field.eta_global == 0.0
        assert np.all(field.eta_local == 0.0)

    def test_single_term_linearity(self):
        prob, space, u, ws = solved_setup(n=4)
        scheme = truncated_scheme(0.5, 0.26, 0, 0)
        e0 = ws.solve_parametric_bw(u, 1.0)
        field = accumulate_fractional(ws, scheme, [e0])
        w0 = scheme.weights[0]
        single = ws.error_field(e0)
        assert np.allclose(field.eta_local, w0 * single.eta_local, rtol=1e-14)
        assert field.eta_global == pytest.approx(w0 * single.eta_global, rel=1e-14)

    def test_scaling_linearity(self):
        prob, space, u, ws = solved_setup(n=4)
        scheme = truncated_scheme(0.5, 0.26, 1, 1)
        sols = [ws.solve_parametric_bw(u, float(c)) for c in scheme.diffusion]
        base = accumulate_fractional(ws, scheme, sols)
        alpha = 3.5
        scaled = accumulate_fractional(ws, scheme, [alpha * e for e in sols])
        assert np.allclose(scaled.eta_local, alpha * base.eta_local, rtol=1e-13)
        assert scaled.eta_global == pytest.approx(alpha * base.eta_global, rel=1e-13)

    def test_count_mismatch_rejected(self):
        prob, space, u, ws = solved_setup(n=2, scale=1.0)
        scheme = truncated_scheme(0.5, 0.26, 2, 2)
        with pytest.raises(ValueError):
            accumulate_fractional(ws, scheme, [np.zeros((space.mesh.num_cells, 3))] * 2)

    def test_wrong_mesh_rejected(self):
        prob, space, u, ws = solved_setup(n=2, scale=1.0)
        scheme = truncated_scheme(0.5, 0.26, 0, 0)
        with pytest.raises(ValueError, match="different mesh"):
            accumulate_fractional(ws, scheme, [np.zeros((space.mesh.num_cells + 1, 3))])

    def test_pythagorean_identity(self):
        prob, space, u, ws = solved_setup(n=4, refined=1)
        scheme = truncated_scheme(0.5, 0.26, 3, 3)
        sols = [ws.solve_parametric_bw(u, float(c)) for c in scheme.diffusion]
        field = accumulate_fractional(ws, scheme, sols)
        assert field.eta_global**2 == pytest.approx((field.eta_local**2).sum(), rel=1e-12)


class TestEstimatorProperties:
    def test_locality_of_interior_residual(self):
        # bumping the data strictly inside one cell moves only that cell
        prob = PROBLEMS["sines2d"]
        mesh = unit_square_mesh(4, np.pi)
        space = fe_space(mesh, 1)
        u = solve_cg(assemble_parametric(space, 1.0, prob.f))
        target = 11
        tri = mesh.vertices[mesh.cells[target]]
        T = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)
        Tinv = np.linalg.inv(T)

        def bump(x, y):
            loc = np.stack([x - tri[0, 0], y - tri[0, 1]], axis=-1) @ Tinv.T
            lam = np.stack([1 - loc[..., 0] - loc[..., 1], loc[..., 0], loc[..., 1]], axis=-1)
            inside = (lam > 1e-9).all(axis=-1)
            return np.where(inside, 1.0, 0.0)

        ws_base = BwWorkspace(space, prob.f)
        ws_pert = BwWorkspace(space, lambda x, y: prob.f(x, y) + bump(x, y))
        e_base = ws_base.solve_parametric_bw(u, 1.0)
        e_pert = ws_pert.solve_parametric_bw(u, 1.0)
        eta_base = ws_base.error_field(e_base).eta_local
        eta_pert = ws_pert.error_field(e_pert).eta_local
        changed = ~np.isclose(eta_base, eta_pert, rtol=1e-14, atol=0.0)
        assert changed[target]
        assert not changed[np.arange(len(changed)) != target].any()

    def test_exactness_on_zero_residual(self):
        # data and solution both equal to one affine field: r = 0, J = 0
        mesh = uniform_refine(unit_square_mesh(2, 1.0))
        space = fe_space(mesh, 1)
        affine = lambda x, y: 1.0 + 2.0 * x - 3.0 * y
        u = interpolate(space, affine)
        ws = BwWorkspace(space, affine)
        # residual moments int (f - u) b vanish and jumps vanish
        e = ws.solve_parametric_bw(u, 1.0)
        # r = f - u + c lap(u) with c * lap(u) = 0 requires f = u - c lap u = u
        field = ws.error_field(e)
        assert field.eta_global <= 1e-14

    def test_dihedral_symmetry_of_indicators(self):
        prob = PROBLEMS["sines2d"]
        mesh = unit_square_mesh(4, np.pi)
        space = fe_space(mesh, 1)
        u = solve_cg(assemble_parametric(space, 1.0, prob.f))
        ws = BwWorkspace(space, prob.f)
        eta = ws.error_field(ws.solve_parametric_bw(u, 1.0)).eta_local
        centroids = mesh.cell_coordinates().mean(axis=1)
        key = {tuple(np.round(c, 9)): i for i, c in enumerate(centroids)}
        for sym in (
            lambda p: (np.pi - p[0], p[1]),
            lambda p: (p[0], np.pi - p[1]),
            lambda p: (p[1], p[0]),
        ):
            for i, cen in enumerate(centroids):
                j = key[tuple(np.round(sym(cen), 9))]
                assert eta[i] == pytest.approx(eta[j], rel=1e-10)

    def test_small_instance_dense_equivalence(self):
        # module-scale version of the brute-force oracle comparison
        prob = PROBLEMS["sines2d"]
        mesh = uniform_refine(unit_square_mesh(2, np.pi))
        space = fe_space(mesh, 1)
        data = interpolate(space, prob.f)
        scheme = truncated_scheme(0.5, 0.26, 2, 2)
        ws = BwWorkspace(space, data)
        solutions = {}
        acc = np.zeros((mesh.num_cells, 3))
        for l, w, c in zip(scheme.indices, scheme.weights, scheme.diffusion):
            u = solve_cg(assemble_parametric(space, float(c), data))
            solutions[int(l)] = u
            acc += w * ws.solve_parametric_bw(u, float(c))
        eta = ws.error_field(acc).eta_global
        eta_dense, _ = bw_global_estimate_dense(space, data, scheme, solutions)
        assert eta == pytest.approx(eta_dense, rel=1e-10)
