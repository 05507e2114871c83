"""Orchestration of the full method: parametric sweeps, error accumulation,
and the adaptive (or uniform) refinement loop on the built-in benchmarks.

The solve of one fractional problem is a sweep over the quadrature indices
l = -M..N.  Each index needs one reaction-diffusion solve and one batch of
cell-local error problems, and distinct indices are independent, so the
sweep runs as a parallel map over fixed-size consecutive index blocks.  The
block partition depends only on the index range, never on the worker count,
and block results are reduced in ascending order, which makes every run
bitwise reproducible.  Within a block the solves run in ascending order and
each CG solve starts from the (rescaled) previous solution; in the deep
diffusion-dominated tail consecutive solutions approach a common limit and
the warm start brings those solves down to a handful of iterations.

Several schemes sharing one kappa can ride the same sweep: the parametric
solution for index l depends only on exp(2*l*kappa), so a multi-power study
solves the union of the index ranges once and accumulates each power's
weighted sums separately.
"""

import json
import math
import os
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .estimator import BwWorkspace
from .fem import (
    ParametricOperator,
    SolverError,
    _pcg,
    fe_space,
    interpolate,
    l2_error,
    triangle_rule,
)
from .mesh import dorfler_mark, refine, unit_square_mesh, uniform_refine
from .rational import build_scheme, choose_kappa

__all__ = [
    "Problem",
    "PROBLEMS",
    "IterationRecord",
    "RunRecord",
    "FractionalSolveResult",
    "fractional_solve",
    "sweep_schemes",
    "adaptive_loop",
    "uniform_study",
    "parametric_errors",
    "efficiency_index",
    "fit_rate",
    "data_l2_norm",
]

_BLOCK = 16


@dataclass(frozen=True)
class Problem:
    """A benchmark: square side length, data field, optional analytic solutions.

    ``u`` maps the fractional power s to the solution field; ``u_l`` maps a
    diffusion coefficient c to the corresponding parametric solution field.
    """

    name: str
    scale: float
    f: object
    u: object = None
    u_l: object = None
    f_l2: float = None


def _sines_f(x, y):
    return (2.0 / np.pi) * np.sin(x) * np.sin(y)


def _make_sines2d():
    def u(s):
        return lambda x, y: 2.0 ** (-s) * _sines_f(x, y)

    def u_l(c):
        return lambda x, y: _sines_f(x, y) / (1.0 + 2.0 * c)

    return Problem(name="sines2d", scale=np.pi, f=_sines_f, u=u, u_l=u_l, f_l2=1.0)


def _checkerboard_f(x, y):
    return np.where((x - 0.5) * (y - 0.5) > 0.0, 1.0, 0.0)


def _make_checkerboard2d():
    # ||f||_L2 = sqrt(1/2): f is the indicator of two of the four quadrants.
    return Problem(
        name="checkerboard2d", scale=1.0, f=_checkerboard_f, f_l2=math.sqrt(0.5)
    )


PROBLEMS = {
    "sines2d": _make_sines2d(),
    "checkerboard2d": _make_checkerboard2d(),
}


def data_l2_norm(problem, mesh=None):
    """Analytic ||f|| when the problem provides it, else quadrature on the given mesh."""
    if problem.f_l2 is not None:
        return float(problem.f_l2)
    if mesh is None:
        raise ValueError("problem carries no analytic data norm; a mesh is required")
    rule = triangle_rule()
    from .mesh import signed_areas

    det = 2.0 * signed_areas(mesh.vertices, mesh.cells)
    pts = np.einsum("qv,cvd->cqd", rule.points, mesh.vertices[mesh.cells])
    fq = np.asarray(problem.f(pts[..., 0], pts[..., 1]), dtype=np.float64)
    return float(np.sqrt(np.einsum("c,q,cq->", det, rule.weights, fq**2)))


@dataclass(frozen=True)
class FractionalSolveResult:
    u: np.ndarray
    error_field: object
    parametric: list = None  # optional (l, u_l, iterations) dumps
    cg_iterations: int = 0


@dataclass
class IterationRecord:
    step: int
    dofs: int
    eta_global: float
    exact_error: float = None
    efficiency: float = None
    wall_time: float = 0.0


@dataclass
class RunRecord:
    """History of one refinement run plus the scheme parameters used."""

    problem: str
    s: float
    kappa: float
    m_neg: int
    n_pos: int
    theta: float
    refinement: str
    status: str = "running"
    iterations: list = field(default_factory=list)

    def dofs(self):
        return np.array([it.dofs for it in self.iterations], dtype=float)

    def series(self, which):
        if which == "estimator":
            return np.array([it.eta_global for it in self.iterations], dtype=float)
        if which == "exact":
            return np.array(
                [math.nan if it.exact_error is None else it.exact_error for it in self.iterations]
            )
        raise ValueError(f"unknown series {which!r}")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,dofs,eta_global,exact_error,efficiency\n")
            for it in self.iterations:
                err = "" if it.exact_error is None else repr(it.exact_error)
                eff = "" if it.efficiency is None else repr(it.efficiency)
                fh.write(f"{it.step},{it.dofs},{it.eta_global!r},{err},{eff}\n")

    def to_json(self, path):
        payload = {
            "problem": self.problem,
            "s": self.s,
            "kappa": self.kappa,
            "m_neg": self.m_neg,
            "n_pos": self.n_pos,
            "num_terms": self.m_neg + self.n_pos + 1,
            "theta": self.theta,
            "refinement": self.refinement,
            "status": self.status,
            "iterations": [
                {
                    "step": it.step,
                    "dofs": it.dofs,
                    "eta_global": it.eta_global,
                    "exact_error": it.exact_error,
                    "efficiency": it.efficiency,
                    "wall_time": it.wall_time,
                }
                for it in self.iterations
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def fit_rate(record, last_k, series="estimator"):
    """Least-squares slope of log10(value) against log10(dofs) on the last k entries."""
    dofs = record.dofs()
    vals = record.series(series)
    keep = np.isfinite(vals) & (vals > 0.0)
    dofs, vals = dofs[keep], vals[keep]
    if len(vals) < last_k or last_k < 2:
        raise ValueError(f"need at least {max(last_k, 2)} positive entries, have {len(vals)}")
    x = np.log10(dofs[-last_k:])
    y = np.log10(vals[-last_k:])
    return float(np.polyfit(x, y, 1)[0])


def efficiency_index(entry):
    """Ratio estimator / exact error of one iteration record."""
    if entry.exact_error is None or entry.exact_error == 0.0:
        raise ValueError("efficiency undefined: no positive exact error recorded")
    return entry.eta_global / entry.exact_error


# ---------------------------------------------------------------------------
# Parametric sweep machinery.

_SWEEP_STATE = None


@dataclass
class _SweepState:
    op: ParametricOperator
    ws: BwWorkspace
    kappa: float
    ranges: list  # per scheme: (m_neg, n_pos, weights)
    rel_tol: float
    max_iter: int
    keep_parametric: bool


def _run_block(task):
    """Solve one ascending block of quadrature indices; return partial sums."""
    block_idx, ls = task
    st = _SWEEP_STATE
    ndofs = st.op.space.num_dofs
    nc = st.ws.mesh.num_cells
    nschemes = len(st.ranges)
    acc_u = [None] * nschemes
    acc_e = [None] * nschemes
    dumps = []
    x = np.zeros(ndofs)
    cold = True
    c_prev = 0.0
    total_iters = 0
    for l in ls:
        c = math.exp(2.0 * l * st.kappa)
        data = st.op.matrix_data(c)
        dinv = 1.0 / data[st.op._diag_nnz_all]
        if cold:
            x[:] = 0.0
        elif c > 1.0:
            # Diffusion-dominated chain: u scales like 1/c between neighbors.
            x *= c_prev / c
        iters, rel_res, converged = _pcg(
            st.op.indptr, st.op.indices, data, st.op.load, x, dinv, st.rel_tol, st.max_iter
        )
        if not converged:
            raise SolverError(
                f"CG failed at quadrature index l={l} (c={c:.3e}): "
                f"relative residual {rel_res:.3e} after {st.max_iter} iterations"
            )
        total_iters += iters
        e_l = st.ws.solve_parametric_bw(x, c)
        for j, (m_neg, n_pos, weights) in enumerate(st.ranges):
            if -m_neg <= l <= n_pos:
                w = weights[l + m_neg]
                if acc_u[j] is None:
                    acc_u[j] = np.zeros(ndofs)
                    acc_e[j] = np.zeros((nc, 3))
                acc_u[j] += w * x
                acc_e[j] += w * e_l
        if st.keep_parametric:
            dumps.append((l, x.copy(), iters))
        cold = False
        c_prev = c
    return block_idx, acc_u, acc_e, dumps, total_iters


def _warmup_solver():
    from scipy.sparse import identity

    eye = identity(2, format="csr")
    _pcg(eye.indptr, eye.indices, eye.data, np.ones(2), np.zeros(2), np.ones(2), 1e-12, 10)


def sweep_schemes(
    problem,
    schemes,
    space,
    threads=None,
    rel_tol=1e-12,
    max_iter=20000,
    keep_parametric=False,
    workspace=None,
    operator=None,
    data=None,
):
    """Solve all parametric problems for schemes sharing one kappa.

    ``data`` is the field handed to assembly and estimation (defaults to the
    problem's f).  Returns a list of FractionalSolveResult aligned with
    ``schemes``.
    """
    global _SWEEP_STATE
    if not schemes:
        return []
    kappa = schemes[0].kappa
    for sch in schemes[1:]:
        if sch.kappa != kappa:
            raise ValueError("schemes in one sweep must share kappa")
    if data is None:
        data = problem.f
    op = operator or ParametricOperator(space, data)
    ws = workspace or BwWorkspace(space, data)
    ranges = [(sch.m_neg, sch.n_pos, sch.weights) for sch in schemes]
    lmin = -max(sch.m_neg for sch in schemes)
    lmax = max(sch.n_pos for sch in schemes)
    all_ls = list(range(lmin, lmax + 1))
    blocks = [
        (bi, all_ls[k : k + _BLOCK]) for bi, k in enumerate(range(0, len(all_ls), _BLOCK))
    ]

    state = _SweepState(
        op=op,
        ws=ws,
        kappa=kappa,
        ranges=ranges,
        rel_tol=rel_tol,
        max_iter=max_iter,
        keep_parametric=keep_parametric,
    )
    if threads is None:
        threads = min(4, os.cpu_count() or 1)

    results = {}
    prev_state = _SWEEP_STATE
    _SWEEP_STATE = state
    try:
        if threads <= 1 or len(blocks) == 1:
            for task in blocks:
                out = _run_block(task)
                results[out[0]] = out
        else:
            _warmup_solver()  # compile before fork so children reuse the JIT state
            ctx = get_context("fork")
            with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
                pending = {pool.submit(_run_block, task) for task in blocks}
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for fut in done:
                        out = fut.result()
                        results[out[0]] = out
    finally:
        _SWEEP_STATE = prev_state

    ndofs = space.num_dofs
    nc = space.mesh.num_cells
    nschemes = len(schemes)
    total_u = [np.zeros(ndofs) for _ in range(nschemes)]
    total_e = [np.zeros((nc, 3)) for _ in range(nschemes)]
    dumps = []
    total_iters = 0
    for bi in sorted(results):
        _, acc_u, acc_e, block_dumps, iters = results[bi]
        total_iters += iters
        for j in range(nschemes):
            if acc_u[j] is not None:
                total_u[j] += acc_u[j]
                total_e[j] += acc_e[j]
        dumps.extend(block_dumps)

    out = []
    for j in range(nschemes):
        parametric = None
        if keep_parametric:
            m, n = schemes[j].m_neg, schemes[j].n_pos
            parametric = [(l, u, it) for (l, u, it) in dumps if -m <= l <= n]
        out.append(
            FractionalSolveResult(
                u=total_u[j],
                error_field=ws.error_field(total_e[j]),
                parametric=parametric,
                cg_iterations=total_iters,
            )
        )
    return out


def fractional_solve(problem, scheme, mesh, p=1, project_data=True, **kwargs):
    """Weighted parametric sweep on one mesh: solution coefficients plus error field.

    By default the data field is first interpolated into the trial space and
    the interpolant drives both the solves and the error problems, exactly
    like the adaptive loop does.
    """
    space = fe_space(mesh, p)
    data = interpolate(space, problem.f) if project_data else problem.f
    return sweep_schemes(problem, [scheme], space, data=data, **kwargs)[0]


def _scheme_for(problem, s, kappa, tol_rational, lambda0, mesh):
    f_norm = data_l2_norm(problem, mesh)
    if kappa is None:
        kappa = choose_kappa(s, lambda0, f_norm, tol_rational * f_norm)
    return build_scheme(s, kappa, lambda0)


def adaptive_loop(
    problem,
    s,
    eta_tol=0.0,
    theta=0.5,
    refinement="adaptive",
    max_dofs=200000,
    max_iterations=None,
    p=1,
    initial_n=8,
    kappa=None,
    tol_rational=1e-8,
    lambda0=1.0,
    threads=None,
    rel_tol=1e-12,
    max_iter=20000,
    project_data=True,
    output_hook=None,
):
    """Solve -> estimate -> mark -> refine until the estimator meets eta_tol
    or a budget (dofs or iteration count) is exhausted.

    kappa is fixed before the loop (chosen from the rational tolerance unless
    given); ``uniform`` refinement marks every cell, twice per iteration, so
    dof counts quadruple per level.  The data field is interpolated into the
    trial space on every mesh and the interpolant drives both the solves and
    the error problems.  Budget exhaustion is a normal outcome, reported in
    the record's status.
    """
    if refinement not in ("adaptive", "uniform"):
        raise ValueError(f"unknown refinement mode {refinement!r}")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    mesh = unit_square_mesh(initial_n, problem.scale)
    scheme = _scheme_for(problem, s, kappa, tol_rational, lambda0, mesh)
    record = RunRecord(
        problem=problem.name,
        s=s,
        kappa=scheme.kappa,
        m_neg=scheme.m_neg,
        n_pos=scheme.n_pos,
        theta=theta,
        refinement=refinement,
    )
    exact = problem.u(s) if problem.u is not None else None

    step = 0
    while True:
        space = fe_space(mesh, p)
        data = interpolate(space, problem.f) if project_data else problem.f
        t0 = time.perf_counter()
        result = sweep_schemes(
            problem, [scheme], space, threads=threads, rel_tol=rel_tol, max_iter=max_iter, data=data
        )[0]
        wall = time.perf_counter() - t0
        eta = result.error_field.eta_global
        err = eff = None
        if exact is not None:
            err = l2_error(space, result.u, exact)
            if err > 0.0:
                eff = eta / err
        record.iterations.append(
            IterationRecord(
                step=step,
                dofs=space.num_dofs,
                eta_global=eta,
                exact_error=err,
                efficiency=eff,
                wall_time=wall,
            )
        )
        if output_hook is not None:
            output_hook(step, mesh, space, result.u, result.error_field)
        if eta <= eta_tol:
            record.status = "tol"
            break
        if space.num_dofs >= max_dofs:
            record.status = "budget"
            break
        if max_iterations is not None and step + 1 >= max_iterations:
            record.status = "budget"
            break
        if refinement == "uniform":
            mesh = uniform_refine(mesh)
        else:
            marked = dorfler_mark(result.error_field.eta_local, theta)
            mesh, _ = refine(mesh, marked)
        step += 1
    return record


def uniform_study(
    problem,
    s_values,
    levels,
    initial_n=8,
    kappa=0.26,
    lambda0=1.0,
    p=1,
    threads=None,
    rel_tol=1e-12,
    max_iter=20000,
    project_data=True,
):
    """Uniform-refinement histories for several fractional powers at shared kappa.

    All powers ride the same parametric solves on every level, which makes a
    five-power study barely more expensive than the widest single power.
    """
    schemes = [build_scheme(s, kappa, lambda0) for s in s_values]
    records = {
        s: RunRecord(
            problem=problem.name,
            s=s,
            kappa=kappa,
            m_neg=sch.m_neg,
            n_pos=sch.n_pos,
            theta=1.0,
            refinement="uniform",
            status="budget",
        )
        for s, sch in zip(s_values, schemes)
    }
    mesh = unit_square_mesh(initial_n, problem.scale)
    for level in range(levels):
        space = fe_space(mesh, p)
        data = interpolate(space, problem.f) if project_data else problem.f
        t0 = time.perf_counter()
        results = sweep_schemes(
            problem, schemes, space, threads=threads, rel_tol=rel_tol, max_iter=max_iter, data=data
        )
        wall = time.perf_counter() - t0
        for s, result in zip(s_values, results):
            err = eff = None
            if problem.u is not None:
                err = l2_error(space, result.u, problem.u(s))
                if err > 0.0:
                    eff = result.error_field.eta_global / err
            records[s].iterations.append(
                IterationRecord(
                    step=level,
                    dofs=space.num_dofs,
                    eta_global=result.error_field.eta_global,
                    exact_error=err,
                    efficiency=eff,
                    wall_time=wall,
                )
            )
        if level < levels - 1:
            mesh = uniform_refine(mesh)
    return records


def parametric_errors(
    problem, scheme, mesh, indices=None, p=1, rel_tol=1e-12, max_iter=20000, project_data=True
):
    """Exact L2 errors of individual parametric solves against the analytic u_l."""
    if problem.u_l is None:
        raise ValueError(f"problem {problem.name} has no analytic parametric solutions")
    space = fe_space(mesh, p)
    data = interpolate(space, problem.f) if project_data else problem.f
    op = ParametricOperator(space, data)
    if indices is None:
        indices = list(range(-scheme.m_neg, scheme.n_pos + 1))
    errors = []
    for l in indices:
        c = math.exp(2.0 * l * scheme.kappa)
        data = op.matrix_data(c)
        x = np.zeros(space.num_dofs)
        iters, rel_res, converged = _pcg(
            op.indptr, op.indices, data, op.load, x, 1.0 / data[op._diag_nnz_all], rel_tol, max_iter
        )
        if not converged:
            raise SolverError(f"CG failed at l={l}: relative residual {rel_res:.3e}")
        errors.append(l2_error(space, x, problem.u_l(c)))
    return np.array(errors)
