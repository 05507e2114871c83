import json
import math

import numpy as np
import pytest

from fracfem.driver import (
    PROBLEMS,
    IterationRecord,
    Problem,
    RunRecord,
    adaptive_loop,
    data_l2_norm,
    efficiency_index,
    fit_rate,
    fractional_solve,
    sweep_schemes,
    uniform_study,
)
from fracfem.fem import SolverError, assemble_parametric, fe_space, interpolate, solve_cg
from fracfem.mesh import unit_square_mesh
from fracfem.rational import build_scheme, truncated_scheme


def make_record(dofs, values):
    rec = RunRecord(problem="x", s=0.5, kappa=0.3, m_neg=1, n_pos=1, theta=0.5,
                    refinement="uniform")
    for i, (d, v) in enumerate(zip(dofs, values)):
        rec.iterations.append(IterationRecord(step=i, dofs=d, eta_global=v))
    return rec


class TestFitRate:
    def test_exact_power_law(self):
        dofs = [100, 400, 1600, 6400]
        rec = make_record(dofs, [1.0 / d for d in dofs])
        assert fit_rate(rec, 4, "estimator") == pytest.approx(-1.0, abs=1e-12)

    def test_constant_series(self):
        rec = make_record([10, 100, 1000], [2.0, 2.0, 2.0])
        assert fit_rate(rec, 3, "estimator") == pytest.approx(0.0, abs=1e-12)

    def test_insufficient_data(self):
        rec = make_record([10, 100], [1.0, 0.5])
        with pytest.raises(ValueError):
            fit_rate(rec, 5, "estimator")
        with pytest.raises(ValueError):
            fit_rate(rec, 1, "estimator")


class TestEfficiencyIndex:
    def test_equal_gives_one(self):
        entry = IterationRecord(step=0, dofs=10, eta_global=0.5, exact_error=0.5)
        assert efficiency_index(entry) == pytest.approx(1.0)

    def test_zero_or_missing_error(self):
        with pytest.raises(ValueError):
            efficiency_index(IterationRecord(step=0, dofs=10, eta_global=0.5, exact_error=0.0))
        with pytest.raises(ValueError):
            efficiency_index(IterationRecord(step=0, dofs=10, eta_global=0.5))


class TestProblems:
    def test_data_norms(self):
        assert data_l2_norm(PROBLEMS["sines2d"]) == 1.0
        assert data_l2_norm(PROBLEMS["checkerboard2d"]) == pytest.approx(math.sqrt(0.5))

    def test_quadrature_norm_agrees_with_analytic(self):
        mesh = unit_square_mesh(32, np.pi)
        prob = PROBLEMS["sines2d"]
        quad = data_l2_norm(Problem(name="q", scale=np.pi, f=prob.f), mesh)
        assert quad == pytest.approx(1.0, rel=1e-4)

    def test_analytic_solution_vanishes_on_boundary(self):
        prob = PROBLEMS["sines2d"]
        u = prob.u(0.5)
        t = np.linspace(0.0, np.pi, 17)
        for xs, ys in ((t, 0 * t), (t, np.pi + 0 * t), (0 * t, t), (np.pi + 0 * t, t)):
            assert np.abs(u(xs, ys)).max() <= 1e-15

    def test_parametric_solution_satisfies_pde(self):
        # finite-difference residual check of u_l at random interior points
        prob = PROBLEMS["sines2d"]
        rng = np.random.default_rng(11)
        c = 2.7
        u = prob.u_l(c)
        pts = rng.uniform(0.5, np.pi - 0.5, size=(20, 2))
        h = 1e-5
        x, y = pts[:, 0], pts[:, 1]
        lap = (
            u(x + h, y) + u(x - h, y) + u(x, y + h) + u(x, y - h) - 4 * u(x, y)
        ) / h**2
        residual = u(x, y) - c * lap - prob.f(x, y)
        assert np.abs(residual).max() <= 1e-5


class TestFractionalSolve:
    def test_zero_data(self):
        zero = Problem(name="zero", scale=1.0, f=lambda x, y: 0.0 * x)
        scheme = truncated_scheme(0.5, 0.4, 2, 2)
        mesh = unit_square_mesh(4, 1.0)
        result = fractional_solve(zero, scheme, mesh, threads=1)
        assert np.all(result.u == 0.0)
        assert result.error_field.eta_global == 0.0

    def test_single_term_equals_weighted_parametric(self):
        prob = PROBLEMS["sines2d"]
        scheme = truncated_scheme(0.5, 0.26, 0, 0)
        mesh = unit_square_mesh(4, np.pi)
        result = fractional_solve(prob, scheme, mesh, threads=1)
        space = fe_space(mesh, 1)
        data = interpolate(space, prob.f)
        u0 = solve_cg(assemble_parametric(space, 1.0, data))
        w0 = scheme.weights[0]
        assert np.allclose(result.u, w0 * u0, rtol=1e-13, atol=1e-17)

    def test_sum_consistency_with_dumps(self):
        prob = PROBLEMS["sines2d"]
        scheme = build_scheme(0.5, 0.4)
        mesh = unit_square_mesh(4, np.pi)
        result = fractional_solve(prob, scheme, mesh, threads=1, keep_parametric=True)
        assert len(result.parametric) == scheme.num_terms
        total = np.zeros_like(result.u)
        for (l, u_l, _), w in zip(result.parametric, scheme.weights):
            assert l == result.parametric[0][0] + (l - result.parametric[0][0])
            total += w * u_l
        scale = np.abs(result.u).max()
        assert np.abs(total - result.u).max() <= 1e-14 * scale

    def test_mixed_kappa_rejected(self):
        prob = PROBLEMS["sines2d"]
        mesh = unit_square_mesh(2, np.pi)
        space = fe_space(mesh, 1)
        with pytest.raises(ValueError, match="kappa"):
            sweep_schemes(prob, [build_scheme(0.5, 0.4), build_scheme(0.5, 0.3)], space)

    def test_nonconvergence_names_index(self):
        prob = PROBLEMS["checkerboard2d"]
        scheme = truncated_scheme(0.5, 0.26, 0, 3)
        mesh = unit_square_mesh(8, 1.0)
        with pytest.raises(SolverError, match=r"l=\d"):
            fractional_solve(prob, scheme, mesh, threads=1, max_iter=2)

    def test_thread_count_does_not_change_bits(self):
        prob = PROBLEMS["sines2d"]
        scheme = build_scheme(0.5, 0.4)
        mesh = unit_square_mesh(4, np.pi)
        serial = fractional_solve(prob, scheme, mesh, threads=1)
        parallel = fractional_solve(prob, scheme, mesh, threads=2)
        assert np.array_equal(serial.u, parallel.u)
        assert serial.error_field.eta_global == parallel.error_field.eta_global


class TestAdaptiveLoop:
    def test_tolerance_met_immediately(self):
        prob = PROBLEMS["checkerboard2d"]
        rec = adaptive_loop(prob, 0.5, eta_tol=1e3, kappa=0.4, initial_n=4, threads=1)
        assert rec.status == "tol"
        assert len(rec.iterations) == 1

    def test_budget_and_monotone_dofs(self):
        prob = PROBLEMS["checkerboard2d"]
        rec = adaptive_loop(
            prob, 0.5, theta=0.5, kappa=0.4, initial_n=4, max_dofs=400, threads=1
        )
        assert rec.status == "budget"
        dofs = rec.dofs()
        assert np.all(np.diff(dofs) > 0)
        assert dofs[-1] >= 400 or len(dofs) == 1

    def test_level_cap(self):
        prob = PROBLEMS["sines2d"]
        rec = adaptive_loop(
            prob, 0.5, refinement="uniform", kappa=0.4, initial_n=2,
            max_iterations=3, threads=1
        )
        assert len(rec.iterations) == 3
        # uniform refinement quadruples cell counts; vertex counts approach
        # 4x from below as the boundary share shrinks
        dofs = rec.dofs()
        assert dofs[2] / dofs[1] > 3.0

    def test_determinism_bitwise(self):
        prob = PROBLEMS["checkerboard2d"]
        kwargs = dict(theta=0.5, kappa=0.4, initial_n=4, max_iterations=3, threads=2)
        rec1 = adaptive_loop(prob, 0.5, **kwargs)
        rec2 = adaptive_loop(prob, 0.5, **kwargs)
        assert [it.dofs for it in rec1.iterations] == [it.dofs for it in rec2.iterations]
        eta1 = [it.eta_global for it in rec1.iterations]
        eta2 = [it.eta_global for it in rec2.iterations]
        assert eta1 == eta2  # bitwise: floats compare exactly

    def test_invalid_arguments(self):
        prob = PROBLEMS["sines2d"]
        with pytest.raises(ValueError):
            adaptive_loop(prob, 0.5, refinement="both", threads=1)
        with pytest.raises(ValueError):
            adaptive_loop(prob, 0.5, theta=0.0, threads=1)

    def test_uniform_study_matches_uniform_loop(self):
        prob = PROBLEMS["sines2d"]
        study = uniform_study(prob, [0.5], levels=3, initial_n=2, kappa=0.4, threads=1)[0.5]
        loop = adaptive_loop(
            prob, 0.5, refinement="uniform", kappa=0.4, initial_n=2,
            max_iterations=3, threads=1
        )
        assert [it.dofs for it in study.iterations] == [it.dofs for it in loop.iterations]
        assert [it.eta_global for it in study.iterations] == [
            it.eta_global for it in loop.iterations
        ]


class TestRunRecordSerialization:
    def test_csv_roundtrip(self, tmp_path):
        prob = PROBLEMS["sines2d"]
        rec = adaptive_loop(
            prob, 0.5, refinement="uniform", kappa=0.4, initial_n=2,
            max_iterations=2, threads=1
        )
        path = tmp_path / "history.csv"
        rec.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,dofs,eta_global,exact_error,efficiency"
        assert len(lines) == 1 + len(rec.iterations)
        for line, it in zip(lines[1:], rec.iterations):
            step, dofs, eta, err, eff = line.split(",")
            assert int(step) == it.step
            assert int(dofs) == it.dofs
            assert float(eta) == it.eta_global  # repr round-trips exactly
            assert float(err) == it.exact_error
            assert float(eff) == it.efficiency

    def test_json_roundtrip(self, tmp_path):
        prob = PROBLEMS["checkerboard2d"]
        rec = adaptive_loop(prob, 0.3, kappa=0.4, initial_n=2, max_iterations=2, threads=1)
        path = tmp_path / "history.json"
        rec.to_json(path)
        payload = json.loads(path.read_text())
        assert payload["problem"] == "checkerboard2d"
        assert payload["s"] == 0.3
        assert payload["num_terms"] == rec.m_neg + rec.n_pos + 1
        assert len(payload["iterations"]) == len(rec.iterations)
        assert payload["iterations"][0]["exact_error"] is None
