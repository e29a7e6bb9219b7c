"""Command-line surface: hf-solve, register, train-rom, evaluate, report.

Every command operates on a run directory created by ``hf-solve`` and is
idempotent: stages already recorded with matching checksums are skipped.
Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 missing
upstream artifact.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io as rio
from .euler import (
    EulerOperator,
    GasModel,
    NonConvergenceError,
    StateError,
    solve_steady,
)
from .geometry import PARAM_CENTROID, bump_channel_curves, gordon_hall, invert_gordon_hall
from .mesh import ElementGeometry
from .meshgen import channel_mesh
from .nnls import NNLSError
from .pipeline import (
    PipelineConfig,
    RunDirectory,
    StageError,
    _mu_tag,
    coarse_stage,
    fine_mesh_stage,
    registration_stage,
    rom_stage,
    run_online,
    sensor_stage,
    train_grid,
)
from .registration import RegistrationError
from .rom import EQError, LineSearchError, dual_residual
from .report import ReportBuilder, random_test_parameters, write_csv

NUMERICAL_ERRORS = (
    NonConvergenceError,
    StateError,
    RegistrationError,
    EQError,
    LineSearchError,
    NNLSError,
)


def _parse_mu(text):
    try:
        a, m = (float(t) for t in text.split(","))
        return np.array([a, m])
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad mu {text!r}: use alpha,mach") from e


def _parse_grid(text):
    try:
        k, l = (int(t) for t in text.lower().split("x"))
        if k < 1 or l < 1:
            raise ValueError
        return (k, l)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: use KxL") from e


def _load_config(path):
    with open(path) as f:
        return PipelineConfig.loads(f.read())


def _solve_one(args):
    cfg_text, mu = args
    cfg = PipelineConfig.loads(cfg_text)
    mesh = channel_mesh(
        PARAM_CENTROID[0], cfg.coarse_nx, cfg.coarse_ny, cfg.coarse_p, cfg.coarse_grading
    )
    ref = invert_gordon_hall(bump_channel_curves(PARAM_CENTROID[0]), mesh.vertices)
    coords = gordon_hall(bump_channel_curves(mu[0]), ref)
    op = EulerOperator(mesh, coords, GasModel(cfg.gamma), cfg.solver)
    U, info = solve_steady(op, mu[1])
    return mu, U.transpose(2, 0, 1).reshape(-1), info["residual_history"]


def cmd_hf_solve(args):
    cfg = _load_config(args.config)
    if args.grid:
        cfg.train_grid = args.grid
    run = RunDirectory(args.out, cfg)
    if args.mu:
        mus = [np.asarray(m) for m in args.mu]
        mesh = channel_mesh(
            PARAM_CENTROID[0], cfg.coarse_nx, cfg.coarse_ny, cfg.coarse_p,
            cfg.coarse_grading,
        )
        checksum = rio.write_mesh(run.path("coarse", "mesh.txt"), mesh)
        rows = ["mu1,mu2,step,residual"]
        jobs = args.jobs or os.cpu_count() or 1
        work = [(cfg.dumps(), mu) for mu in mus]
        if jobs > 1 and len(mus) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(_solve_one, work))
        else:
            results = [_solve_one(w) for w in work]
        for mu, vec, hist in results:
            rio.write_field(
                run.path("coarse", f"snap_{_mu_tag(mu)}.txt"), vec, mu, checksum
            )
            for s, r in enumerate(hist):
                rows.append(f"{mu[0]:.6f},{mu[1]:.6f},{s},{r:.17g}")
        rio.atomic_write(
            run.path("coarse", "residual_history.csv"), "\n".join(rows) + "\n"
        )
        print(f"wrote {len(mus)} snapshot(s) under {args.out}/coarse")
    else:
        coarse_stage(run, log=print)
        print(f"coarse stage complete under {args.out}/coarse")
    return 0


def cmd_register(args):
    run = RunDirectory(args.run)
    sensor_stage(run, log=print)
    fine_mesh_stage(run, log=print)
    registration_stage(run, log=print)
    print("registration complete")
    return 0


def cmd_train_rom(args):
    run = RunDirectory(args.run)
    if args.mode:
        run.cfg.mode = args.mode
    if args.variant:
        run.cfg.variant = args.variant
    if args.nmax:
        run.cfg.n_max = args.nmax
    rom_stage(run, log=print)
    print("rom stage complete")
    return 0


def cmd_evaluate(args):
    run = RunDirectory(args.run)
    run.require("rom")
    bundle = run.path("bundle", "manifest.json")
    if not os.path.exists(bundle):
        raise StageError("evaluate", "no bundle under the run directory")
    rb = ReportBuilder(run, log=print)
    variant = run.cfg.variant
    mu = np.asarray(args.mu)
    ref = None
    tag = _mu_tag(mu)
    snap = run.path("fine", f"snap_{variant}_{tag}.txt")
    if os.path.exists(snap):
        vec, _, _ = rio.read_field(snap)
        ref = vec.reshape(4, rb.mesh.n_elements, -1).transpose(1, 2, 0)
    t0 = time.perf_counter()
    result = run_online(os.path.dirname(bundle), mu, out_dir=args.out, reference=ref)
    wall = time.perf_counter() - t0
    if result.get("extrapolation"):
        print(f"warning: mu {mu} outside the training region", file=sys.stderr)
    if not result["bijective"]:
        print("warning: deformed mesh failed the bijectivity check", file=sys.stderr)
    err = result.get("error", np.nan)
    dres = np.nan
    if "alpha" in result:
        from .pipeline import load_bundle

        model, _ = load_bundle(os.path.dirname(bundle))
        dres = rb.dual_residual_of(model, variant, mu, result["alpha"])
    row = (
        f"{mu[0]:.6f},{mu[1]:.6f},{err:.17g},{dres:.17g},"
        f"{result.get('alpha', np.zeros(0)).size},"
        f"{int(np.count_nonzero(result.get('alpha', np.zeros(1))) >= 0)},{wall:.3f}"
    )
    path = run.path("report", "evaluations.csv")
    header = "mu1,mu2,E_rel,dual_residual,N,Q,wall_time_s"
    if os.path.exists(path):
        with open(path) as f:
            text = f.read().rstrip("\n")
        rio.atomic_write(path, text + "\n" + row + "\n")
    else:
        rio.atomic_write(path, header + "\n" + row + "\n")
    print(f"E_rel = {err:.3e}  dual_residual = {dres:.3e}  wall = {wall:.2f}s")
    return 0


def cmd_report(args):
    run = RunDirectory(args.run)
    run.require("rom")
    rb = ReportBuilder(run, log=print)
    cfg = run.cfg
    test_mus = random_test_parameters(args.ntest, cfg.seed + 1)
    Ns = sorted(set(range(1, cfg.n_max + 1)))
    with open(run.path("bundle", "manifest.json")) as f:
        man = json.load(f)

    pod_rows, ts_rows, eq_rows, summary_rows = [], [], [], []
    variants = [cfg.variant]
    other = "linear" if cfg.variant == "lagrangian" else "lagrangian"
    if os.path.exists(run.path("fine", f"snap_{other}_{_mu_tag(train_grid(cfg)[0])}.txt")):
        variants.append(other)
    for variant in variants:
        refs = rb.test_references(variant, test_mus)
        fam = rb.pod_family(variant, Ns)
        for N, model in sorted(fam.items()):
            perr, rerr = [], []
            for mu, ref in zip(test_mus, refs):
                perr.append(rb.projection_error(variant, model.Z, mu, ref))
                e, _ = rb.rom_error(model, variant, mu, ref)
                rerr.append(e)
            pod_rows.append(f"{N},{variant},projection,{np.mean(perr):.17g}")
            pod_rows.append(f"{N},{variant},eqlspg,{np.mean(rerr):.17g}")
            ts_rows.append(f"{N},{variant},{model.Y.shape[1]}")
            eq_rows.append(
                f"{N},{variant},{cfg.tol_eq:.1e},{model.eq.sample_count},"
                f"{100.0 * model.eq.sample_count / rb.mesh.n_elements:.17g}"
            )
        summary_rows.append(
            f"{variant},pod,{max(fam)},{fam[max(fam)].Y.shape[1]},"
            f"{fam[max(fam)].eq.sample_count},{rb.mesh.n_elements},{len(train_grid(cfg))}"
        )

    greedy_rows, dr_rows = [], []
    if man.get("mode") == "greedy" or cfg.mode == "greedy":
        record = man["greedy_record"]
        fam = rb.greedy_family(cfg.variant, record)
        refs = rb.test_references(cfg.variant, test_mus)
        mus_all = train_grid(cfg)
        for N, model in sorted(fam.items()):
            errs = [rb.rom_error(model, cfg.variant, mu, ref)[0]
                    for mu, ref in zip(test_mus, refs)]
            greedy_rows.append(f"{N},{np.mean(errs):.17g}")
            for k, mu in enumerate(mus_all):
                refU = rb.snapshot(cfg.variant, mu)
                err, res = rb.rom_error(model, cfg.variant, mu, refU)
                dres = rb.dual_residual_of(model, cfg.variant, mu, res["alpha"])
                dr_rows.append(
                    f"{N},{mu[0]:.6f},{mu[1]:.6f},{dres:.17g},{err:.17g}"
                )

    rep = lambda name: run.path("report", name)
    write_csv(rep("pod_error.csv"), "N,variant,kind,E_avg", pod_rows)
    write_csv(rep("greedy_error.csv"), "N,E_avg", greedy_rows)
    write_csv(rep("test_space.csv"), "N,variant,J_es", ts_rows)
    write_csv(rep("eq_sampling.csv"), "N,variant,tol_eq,Q,percent", eq_rows)
    write_csv(rep("dual_residual.csv"), "N,mu1,mu2,dual_residual,E_rel", dr_rows)
    write_csv(
        rep("summary.csv"), "variant,mode,N,J_es,Q,n_elements,n_train", summary_rows
    )
    print("report written under", run.path("report"))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="regmor",
        description="registration-based model reduction for the parametric bump channel",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("hf-solve", help="coarse-stage snapshot solves")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mu", action="append", type=_parse_mu)
    s.add_argument("--grid", type=_parse_grid)
    s.add_argument("--jobs", type=int, default=None)
    s.set_defaults(fn=cmd_hf_solve)

    s = sub.add_parser("register", help="sensors, fine mesh and registration")
    s.add_argument("--run", required=True)
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("train-rom", help="trial/test bases and empirical quadrature")
    s.add_argument("--run", required=True)
    s.add_argument("--mode", choices=["pod", "greedy"])
    s.add_argument("--variant", choices=["lagrangian", "linear"])
    s.add_argument("--Nmax", dest="nmax", type=int)
    s.set_defaults(fn=cmd_train_rom)

    s = sub.add_parser("evaluate", help="online ROM solve at one parameter")
    s.add_argument("--run", required=True)
    s.add_argument("--mu", required=True, type=_parse_mu)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("report", help="emit the figure-series CSV files")
    s.add_argument("--run", required=True)
    s.add_argument("--ntest", type=int, default=5)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except StageError as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
