"""Command-line surface: solve runs, coefficient dumps, reference-table checks.

Exit codes: 0 success, 2 invalid configuration, 3 solver or validation
failure.  Failures print one machine-readable JSON line on stderr.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .driver import PROBLEMS, adaptive_loop, fit_rate, uniform_study
from .fem import SolverError
from .mesh import _build_mesh, validate, write_mesh_json, write_vtk
from .rational import build_scheme, term_counts

CONFIG_ERROR = 2
SOLVER_ERROR = 3

# Published reference values the reproduce tables compare against.
_S_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
_REF_PARAM_COUNTS = (408, 176, 149, 176, 408)
_REF_SINES_EST_SLOPES = (-0.92, -0.97, -0.99, -1.00, -1.00)
_REF_SINES_EXACT_SLOPES = (-1.00, -1.00, -1.00, -1.00, -0.94)
_REF_SINES_EFFICIENCY = (0.86, 1.16, 1.08, 0.96, 0.78)
_REF_CHECKER_UNIF_SLOPES = (-0.35, -0.55, -0.76, -0.95, -1.00)

TABLES = ("param-counts", "sines2d-slopes", "sines2d-efficiency", "checkerboard2d-slopes")


@dataclass
class RunConfig:
    """Validated configuration of one solve run."""

    problem: str
    s: float
    kappa: float = None
    tol_rational: float = 1e-8
    theta: float = 0.5
    refinement: str = "adaptive"
    max_dofs: int = 200000
    levels: int = None
    eta_tol: float = 0.0
    initial_n: int = 8
    degree: int = 1
    output_dir: str = "out"
    threads: int = None

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.refinement not in ("uniform", "adaptive"):
            raise ValueError(f"refinement must be uniform or adaptive, got {self.refinement!r}")
        if self.initial_n < 1:
            raise ValueError(f"initial mesh parameter n must be >= 1, got {self.initial_n}")
        initial_dofs = (self.initial_n + 1) ** 2
        if self.max_dofs < initial_dofs:
            raise ValueError(
                f"max_dofs {self.max_dofs} below the initial dof count {initial_dofs}"
            )
        if self.kappa is not None and self.kappa <= 0.0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.tol_rational <= 0.0:
            raise ValueError(f"tol_rational must be positive, got {self.tol_rational}")
        if self.levels is not None and self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.degree != 1:
            raise ValueError("only degree-1 runs are supported")
        return self

    def to_flags(self):
        flags = [
            "--problem", self.problem,
            "--s", repr(self.s),
            "--tol-rational", repr(self.tol_rational),
            "--theta", repr(self.theta),
            "--refinement", self.refinement,
            "--max-dofs", str(self.max_dofs),
            "--eta-tol", repr(self.eta_tol),
            "--n", str(self.initial_n),
            "--output-dir", self.output_dir,
        ]
        if self.kappa is not None:
            flags += ["--kappa", repr(self.kappa)]
        if self.levels is not None:
            flags += ["--levels", str(self.levels)]
        if self.threads is not None:
            flags += ["--threads", str(self.threads)]
        return flags


def config_from_args(args):
    return RunConfig(
        problem=args.problem,
        s=args.s,
        kappa=args.kappa,
        tol_rational=args.tol_rational,
        theta=args.theta,
        refinement=args.refinement,
        max_dofs=args.max_dofs,
        levels=args.levels,
        eta_tol=args.eta_tol,
        initial_n=args.n,
        output_dir=args.output_dir,
        threads=args.threads,
    ).validate()


def _fail(code, message):
    print(json.dumps({"error": message, "exit_code": code}), file=sys.stderr)
    return code


def _write_eta_csv(path, eta_local):
    with open(path, "w") as fh:
        fh.write("cell_index,eta\n")
        for i, v in enumerate(eta_local):
            fh.write(f"{i},{float(v)!r}\n")


def run(config):
    """Execute a solve run and write its artifacts; returns the exit code."""
    os.makedirs(config.output_dir, exist_ok=True)
    problem = PROBLEMS[config.problem]

    def hook(step, mesh, space, u, error_field):
        tag = f"{step:04d}"
        base = os.path.join(config.output_dir, "")
        write_mesh_json(mesh, base + f"mesh_{tag}.json")
        write_vtk(
            mesh,
            base + f"mesh_{tag}.vtk",
            point_data={"u": u},
            cell_data={"eta_bw": error_field.eta_local},
        )
        _write_eta_csv(base + f"eta_{tag}.csv", error_field.eta_local)
        with open(base + f"u_{tag}.json", "w") as fh:
            json.dump([float(v) for v in u], fh)

    record = adaptive_loop(
        problem,
        config.s,
        eta_tol=config.eta_tol,
        theta=config.theta,
        refinement=config.refinement,
        max_dofs=config.max_dofs,
        max_iterations=config.levels,
        initial_n=config.initial_n,
        kappa=config.kappa,
        tol_rational=config.tol_rational,
        threads=config.threads,
        output_hook=hook,
    )
    record.to_csv(os.path.join(config.output_dir, "history.csv"))
    record.to_json(os.path.join(config.output_dir, "history.json"))
    last = record.iterations[-1]
    print(f"problem={config.problem} s={config.s} kappa={record.kappa:.6g} "
          f"terms={record.m_neg + record.n_pos + 1}")
    print(f"final: step={last.step} dofs={last.dofs} eta={last.eta_global:.6e} "
          f"status={record.status}")
    if len(record.iterations) >= 2:
        k = min(5, len(record.iterations))
        print(f"fitted estimator slope (last {k}): {fit_rate(record, k, 'estimator'):.3f}")
    return 0


def cmd_solve(args):
    try:
        config = config_from_args(args)
    except ValueError as exc:
        return _fail(CONFIG_ERROR, str(exc))
    try:
        return run(config)
    except SolverError as exc:
        return _fail(SOLVER_ERROR, str(exc))


def cmd_coeffs(args):
    try:
        if not 0.0 < args.s < 1.0:
            raise ValueError(f"s must lie in (0, 1), got {args.s}")
        scheme = build_scheme(args.s, args.kappa, args.lambda0)
    except ValueError as exc:
        return _fail(CONFIG_ERROR, str(exc))
    lines = ["l,weight,diffusion"]
    for l, w, c in zip(scheme.indices, scheme.weights, scheme.diffusion):
        lines.append(f"{l},{float(w)!r},{float(c)!r}")
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
        print(f"wrote {scheme.num_terms} terms to {args.output}")
    else:
        sys.stdout.write(text)
    return 0


def _verdict(computed, reference, tol):
    return "ok" if abs(computed - reference) <= tol else "MISMATCH"


def _print_table(header, rows):
    print(header)
    for row in rows:
        print("  " + " | ".join(row))


def cmd_reproduce(args):
    if args.table not in TABLES:
        return _fail(CONFIG_ERROR, f"unknown table {args.table!r}; choose from {TABLES}")
    status = 0
    if args.table == "param-counts":
        rows = []
        for s, ref in zip(_S_GRID, _REF_PARAM_COUNTS):
            M, N = term_counts(s, 0.26)
            total = M + N + 1
            verdict = "ok" if total == ref else "MISMATCH"
            status |= verdict != "ok"
            rows.append([f"s={s}", f"reference={ref}", f"computed={total}", "tol=exact", verdict])
        _print_table("parametric problem counts at kappa=0.26", rows)
        return int(status)

    if args.table in ("sines2d-slopes", "sines2d-efficiency"):
        records = uniform_study(
            PROBLEMS["sines2d"], _S_GRID, levels=args.levels, initial_n=8,
            kappa=0.26, threads=args.threads,
        )
        rows = []
        if args.table == "sines2d-slopes":
            for s, ref_e, ref_x in zip(_S_GRID, _REF_SINES_EST_SLOPES, _REF_SINES_EXACT_SLOPES):
                est = fit_rate(records[s], min(5, args.levels), "estimator")
                exact = fit_rate(records[s], min(5, args.levels), "exact")
                v1 = _verdict(est, ref_e, 0.1)
                v2 = _verdict(exact, ref_x, 0.1)
                status |= (v1 != "ok") or (v2 != "ok")
                rows.append([
                    f"s={s}",
                    f"estimator: ref={ref_e} got={est:.3f} ({v1})",
                    f"exact: ref={ref_x} got={exact:.3f} ({v2})",
                    "tol=0.1",
                ])
            _print_table(f"sines2d convergence slopes, {args.levels} uniform levels", rows)
        else:
            for s, ref in zip(_S_GRID, _REF_SINES_EFFICIENCY):
                effs = [it.efficiency for it in records[s].iterations][-5:]
                avg = float(np.mean(effs))
                verdict = _verdict(avg, ref, 0.25)
                status |= verdict != "ok"
                rows.append([f"s={s}", f"reference={ref}", f"computed={avg:.3f}", "tol=0.25", verdict])
            _print_table("sines2d efficiency indices, average of last 5 levels", rows)
        return int(status)

    # checkerboard2d-slopes
    records = uniform_study(
        PROBLEMS["checkerboard2d"], _S_GRID, levels=args.levels, initial_n=8,
        kappa=0.26, threads=args.threads,
    )
    rows = []
    for s, ref in zip(_S_GRID, _REF_CHECKER_UNIF_SLOPES):
        est = fit_rate(records[s], min(5, args.levels), "estimator")
        theory = -min(1.0, s + 0.25)
        verdict = _verdict(est, theory, 0.1)
        status |= verdict != "ok"
        rows.append([
            f"s={s}",
            f"theory={theory:.2f}",
            f"reference={ref}",
            f"computed={est:.3f}",
            "tol=0.1",
            verdict,
        ])
    _print_table(f"checkerboard2d uniform estimator slopes, {args.levels} levels", rows)
    return int(status)


def cmd_validate_mesh(args):
    try:
        with open(args.input) as fh:
            payload = json.load(fh)
        vertices = np.asarray(payload["vertices"], dtype=np.float64)
        cells = np.asarray(payload["cells"], dtype=np.int32)
    except (OSError, KeyError, ValueError) as exc:
        return _fail(CONFIG_ERROR, f"cannot read mesh JSON: {exc}")
    try:
        mesh = _build_mesh(vertices, cells)
        validate(mesh)
    except (ValueError, RuntimeError) as exc:
        return _fail(SOLVER_ERROR, f"mesh invalid: {exc}")
    print(
        f"mesh ok: {mesh.num_vertices} vertices, {mesh.num_cells} cells, "
        f"{mesh.num_facets} facets, {int(mesh.boundary_facet_flags.sum())} boundary facets"
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fracfem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run the adaptive or uniform refinement loop")
    p_solve.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
    p_solve.add_argument("--s", type=float, required=True, help="fractional power in (0,1)")
    p_solve.add_argument("--kappa", type=float, default=None, help="override the rational fineness")
    p_solve.add_argument("--tol-rational", dest="tol_rational", type=float, default=1e-8)
    p_solve.add_argument("--theta", type=float, default=0.5, help="Doerfler bulk parameter")
    p_solve.add_argument("--refinement", choices=("uniform", "adaptive"), default="adaptive")
    p_solve.add_argument("--max-dofs", dest="max_dofs", type=int, default=200000)
    p_solve.add_argument("--levels", type=int, default=None, help="stop after this many iterations")
    p_solve.add_argument("--eta-tol", dest="eta_tol", type=float, default=0.0)
    p_solve.add_argument("--n", type=int, default=8, help="initial mesh subdivisions per side")
    p_solve.add_argument("--output-dir", dest="output_dir", default="out")
    p_solve.add_argument("--threads", type=int, default=None)
    p_solve.set_defaults(func=cmd_solve)

    p_coeffs = sub.add_parser("coeffs", help="dump rational coefficients as CSV")
    p_coeffs.add_argument("--s", type=float, required=True)
    p_coeffs.add_argument("--kappa", type=float, default=0.26)
    p_coeffs.add_argument("--lambda0", type=float, default=1.0)
    p_coeffs.add_argument("--output", default=None, help="CSV path; stdout when omitted")
    p_coeffs.set_defaults(func=cmd_coeffs)

    p_rep = sub.add_parser("reproduce", help="rerun a reference table and compare")
    p_rep.add_argument("--table", required=True, choices=TABLES)
    p_rep.add_argument("--levels", type=int, default=7)
    p_rep.add_argument("--threads", type=int, default=None)
    p_rep.set_defaults(func=cmd_reproduce)

    p_val = sub.add_parser("validate-mesh", help="check a mesh JSON file")
    p_val.add_argument("--input", required=True)
    p_val.set_defaults(func=cmd_validate_mesh)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
