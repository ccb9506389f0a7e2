"""Command-line entry points: ingest | train | solve | bench | diagnose | gradcheck.

Every command resolves its options from an optional key=value config file
overridden by flags, writes a resolved-config copy next to its outputs, and
exits 0 on success, 1 on usage errors, 2 on data errors, 3 on numerical
failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import coeffs, datasets, harness, solvers, train
from .adjoint import gradcheck_rows
from .errors import DataError, NumericsError
from .objectives import ConstantEstimator, PowerEstimator

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _read_config_file(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"config line without '=': {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config_defaults(args, parser):
    if not getattr(args, "config", None):
        return args
    overrides = _read_config_file(args.config)
    cli_tokens = {tok.split("=")[0].lstrip("-").replace("-", "_")
                  for tok in sys.argv[1:] if tok.startswith("--")}
    for key, raw in overrides.items():
        if key in cli_tokens or not hasattr(args, key):
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(raw))
        elif isinstance(current, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)
    return args


def _write_resolved(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    skip = {"config", "func"}
    with open(os.path.join(out_dir, "resolved-config.txt"), "w") as fh:
        for key in sorted(vars(args)):
            if key not in skip:
                fh.write(f"{key}={getattr(args, key)}\n")


def _load_model_arg(args, problem):
    if getattr(args, "checkpoint", None):
        if args.checkpoint.endswith(".train.json"):
            model, _ = train.load_checkpoint(args.checkpoint)
            return model
        return coeffs.load_model(args.checkpoint)
    return coeffs.default_model(problem.L, args.h, alpha=args.alpha)


def cmd_ingest(args):
    out_dir = args.out
    if os.path.exists(os.path.join(out_dir, "meta.json")) and not args.force:
        dataset = datasets.load_cache(out_dir)
        print(f"cache hit: {out_dir} (checksum {datasets.cache_checksum(out_dir)[:12]})")
    else:
        if args.libsvm:
            with open(args.libsvm) as fh:
                raw = datasets.parse_libsvm(fh, n_features=args.dim or None)
            dataset = datasets.build_dataset(
                raw, train_size=args.train_size or None, seed=args.seed,
                meta={"source": os.path.abspath(args.libsvm)})
        else:
            dataset = datasets.gen_separable(args.dim or 101, args.count, args.seed)
        datasets.save_cache(dataset, out_dir)
        print(f"cached: {out_dir} (checksum {datasets.cache_checksum(out_dir)[:12]})")
    _write_resolved(args, out_dir)
    print(f"dataset  n={dataset.n}  N_train={len(dataset.train_idx)}  "
          f"N_test={len(dataset.test_idx)}")
    return EXIT_OK


def cmd_train(args):
    dataset = datasets.load_cache(args.data)
    probe, _ = datasets.sample_problem(dataset, args.n_sp, args.kind,
                                       args.seed, p=args.lpp_p)
    default = coeffs.default_model(probe.L, args.h, alpha=args.alpha)
    t_hi = args.t0 + 500 * args.h
    model0 = coeffs.init_learnable(default, d_h=args.d_h, seed=args.seed,
                                   t_lo=args.t0, t_hi=t_hi)
    cfg = train.TrainConfig(lr=args.lr, momentum=args.momentum, rho=args.rho,
                            epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
                            n_sp=args.n_sp, seed=args.seed, kind=args.kind,
                            lpp_p=args.lpp_p, eps=args.eps, h=args.h, t0=args.t0,
                            h_int=args.h_int, t_max=args.t_max)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args, args.out)
    log_path = os.path.join(args.out, "training-log.csv")
    factory = None
    if args.estimator == "power":
        factory = lambda problem: PowerEstimator()
    with open(log_path, "w") as log:
        log.write("epoch,step,T,P,Q,loss,grad_norm\n")

        def log_fn(row):
            log.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v)
                               for v in row) + "\n")
            log.flush()

        model, state = train.stopm(dataset, model0, cfg, log_fn=log_fn,
                                   estimator_factory=factory)
    ckpt = os.path.join(args.out, "model.json")
    coeffs.save_model(model, ckpt)
    train.save_checkpoint(model, state, os.path.join(args.out, "state.train.json"))
    harness.write_csv(os.path.join(args.out, "epoch-means.csv"),
                      "epoch,mean_T,mean_penalty", state.epoch_means)
    for epoch, mean_T, mean_pq in state.epoch_means:
        print(f"epoch {epoch:3d}  mean T {mean_T:9.4f}  mean penalty {mean_pq:.4g}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_solve(args):
    dataset = datasets.load_cache(args.data)
    problem, _ = datasets.sample_problem(dataset, args.n_sp, args.kind,
                                         args.seed, p=args.lpp_p)
    if args.method not in solvers.RUNNERS:
        raise DataError(f"unknown method {args.method!r}; "
                        f"choose from {sorted(solvers.RUNNERS)}")
    model = None
    if args.method.startswith("eigac"):
        if args.method == "eigac-default" or not args.checkpoint:
            model = coeffs.default_model(problem.L, args.h, alpha=args.alpha)
        else:
            model = _load_model_arg(args, problem)
    cfg = solvers.SolverConfig(h=args.h, t0=args.t0, eps=args.eps,
                               max_iters=args.iters, relay=args.relay,
                               diagnostics=1 if args.diagnostics else 0)
    record = solvers.RUNNERS[args.method](problem, model, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args, args.out)
    header = record.HEADER_DIAG if args.diagnostics else record.HEADER_PLAIN
    path = harness.write_csv(os.path.join(args.out, f"run-{args.method}.csv"),
                             header, record.export_rows())
    with open(os.path.join(args.out, f"run-{args.method}.meta.txt"), "w") as fh:
        fh.write(f"method={args.method}\nthreshold={args.eps}\n"
                 f"iterations={record.iterations}\nhit={record.hit}\n"
                 f"relay_at={record.relay_at}\n")
    print(f"{args.method}: {record.iterations} iterations, "
          f"final grad norm {record.grad_norms[-1]:.3e}, hit={record.hit}")
    print(f"trace: {path}")
    return EXIT_OK


def cmd_bench(args):
    dataset = datasets.load_cache(args.data)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in solvers.RUNNERS:
            raise DataError(f"unknown method {m!r}")
    trained = None
    if args.checkpoint:
        trained = _load_model_arg(args, None)
    summary = harness.run_bench(dataset, args.kind, methods,
                                n_problems=args.n_problems, iters=args.iters,
                                n_sp=args.n_sp, lpp_p=args.lpp_p, seed=args.seed,
                                eps=args.eps, h=args.h, t0=args.t0,
                                trained_model=trained, alpha=args.alpha,
                                n_jobs=args.n_jobs)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args, args.out)
    harness.write_csv(os.path.join(args.out, "bench-summary.csv"),
                      summary.HEADER, summary.rows())
    print(f"{'method':>14} | {'m_bar':>8} ({'se':>6}) | {'N_bar':>8} ({'se':>7})"
          f" | win(m) | win(N)")
    for method, m_bar, m_se, n_bar, n_se, wm, wn in summary.rows():
        wm_s = f"{100 * wm:5.1f}%" if np.isfinite(wm) else "    - "
        wn_s = f"{100 * wn:5.1f}%" if np.isfinite(wn) else "    - "
        print(f"{method:>14} | {m_bar:8.3f} ({m_se:6.3f}) | {n_bar:8.2f} "
              f"({n_se:7.3f}) | {wm_s} | {wn_s}")
    return EXIT_OK


def cmd_diagnose(args):
    dataset = datasets.load_cache(args.data)
    problem, _ = datasets.sample_problem(dataset, args.n_sp, args.kind,
                                         args.seed, p=args.lpp_p)
    model = _load_model_arg(args, problem)
    theta = model.get_theta()
    if len(theta) and not np.all(np.isfinite(theta)):
        raise DataError("model parameters contain non-finite values")
    traj, record, report = harness.diagnose(problem, model, h=args.h, t0=args.t0,
                                            eps=args.eps, h_int=args.h_int,
                                            t_max=args.t_max)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args, args.out)
    harness.write_csv(os.path.join(args.out, "trajectory.csv"),
                      "t,grad_norm,f_value,P_acc,Q_acc", traj.export_rows())
    harness.write_csv(os.path.join(args.out, "stability.csv"),
                      report.HEADER, report.rows())
    print(f"stopping time T = {traj.T}")
    print(f"converge-condition holds: {report.converge_ok}; "
          f"coefficient inequalities hold: {report.stab1_ok}")
    print(f"max q = {report.q.max():.3g}, max p = {report.p.max():.3g}, "
          f"max rho = {report.rho.max():.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    problem, model, config = harness.canonical_setup(perturbed=True)
    config.estimator = (PowerEstimator() if args.estimator == "power"
                        else ConstantEstimator(problem.L))
    rows = gradcheck_rows(problem, model, args.rho, config, delta=args.delta,
                          flip_sign=args.inject_sign_error)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(args, args.out)
    harness.write_csv(os.path.join(args.out, "gradcheck.csv"),
                      "component,analytic,numeric,rel_err",
                      [(int(j), a, n, e) for j, a, n, e in rows])
    worst = max(e for _, _, _, e in rows)
    ok = worst <= args.tol
    print(f"gradcheck: {len(rows)} components, worst rel err {worst:.3e}, "
          f"tolerance {args.tol:g} -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericsError(f"gradient certification failed: {worst:.3e} > {args.tol}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="eigac",
                     description="ODE-derived first-order optimizers: train, "
                                 "solve, and benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value file; flags override")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--h", type=float, default=0.04)
        p.add_argument("--t0", type=float, default=1.0)
        p.add_argument("--eps", type=float, default=3e-4)
        p.add_argument("--alpha", type=float, default=6.0)
        p.add_argument("--kind", choices=("logistic", "lpp"), default="logistic")
        p.add_argument("--lpp-p", type=int, default=4)
        p.add_argument("--n-sp", type=int, default=1024)

    p = sub.add_parser("ingest", help="parse or generate a dataset cache")
    p.add_argument("--libsvm", help="LIBSVM text file to ingest")
    p.add_argument("--dim", type=int, default=0, help="feature dimension "
                   "(generator dimension, or override for LIBSVM)")
    p.add_argument("--count", type=int, default=20480,
                   help="per-class sample count for the generator")
    p.add_argument("--train-size", type=int, default=0)
    p.add_argument("--force", action="store_true", help="rebuild the cache")
    add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train coefficients by stochastic penalty steps")
    p.add_argument("--data", required=True, help="dataset cache directory")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--steps-per-epoch", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--d-h", type=int, default=32)
    p.add_argument("--h-int", type=float, default=0.01)
    p.add_argument("--t-max", type=float, default=81.0)
    p.add_argument("--estimator", choices=("constant", "power"), default="constant")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="run one solver on one sampled problem")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--relay", action="store_true")
    p.add_argument("--diagnostics", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="sweep methods over sampled problems")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="gd,nag,igahd,eigac-default,eigac")
    p.add_argument("--checkpoint")
    p.add_argument("--n-problems", type=int, default=100)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--n-jobs", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diagnose", help="stability report for a model on a problem")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--h-int", type=float, default=0.01)
    p.add_argument("--t-max", type=float, default=21.0)
    add_common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="certify adjoint gradients by finite differences")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--estimator", choices=("constant", "power"), default="power")
    p.add_argument("--inject-sign-error", action="store_true",
                   help=argparse.SUPPRESS)
    add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_defaults(args, parser)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
