"""Experiment orchestration: benchmark sweeps, aggregate statistics, the
canonical gradient-check setup, and columnar exports.

Sweeps fan problems out to a thread pool over immutable inputs; per-problem
seeds are derived from the master seed so results are identical regardless
of worker count or completion order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coeffs import default_model, init_learnable
from .datasets import gen_separable, sample_problem, sample_test_problem
from .dynamics import IntegrateConfig
from .solvers import RUNNERS, SolverConfig, eigac_run

SENTINEL_ITERS = 500


@dataclass
class MethodStats:
    measures: np.ndarray       # log10 grad norm at the final iteration
    complexities: np.ndarray   # first crossing index, sentinel when never

    @property
    def m_bar(self):
        return float(np.mean(self.measures))

    @property
    def m_se(self):
        return float(np.std(self.measures, ddof=1) / np.sqrt(len(self.measures))) \
            if len(self.measures) > 1 else 0.0

    @property
    def n_bar(self):
        return float(np.mean(self.complexities))

    @property
    def n_se(self):
        return float(np.std(self.complexities, ddof=1) / np.sqrt(len(self.complexities))) \
            if len(self.complexities) > 1 else 0.0


@dataclass
class BenchSummary:
    methods: list
    stats: dict                  # method -> MethodStats
    win_measure: dict = field(default_factory=dict)     # vs-method -> rate
    win_complexity: dict = field(default_factory=dict)
    n_problems: int = 0
    records: dict = field(default_factory=dict)  # method -> list of RunRecord

    def rows(self):
        out = []
        for m in self.methods:
            s = self.stats[m]
            out.append((m, s.m_bar, s.m_se, s.n_bar, s.n_se,
                        self.win_measure.get(m, float("nan")),
                        self.win_complexity.get(m, float("nan"))))
        return out

    HEADER = "method,m_bar,m_se,n_bar,n_se,win_measure,win_complexity"


def _win_rate(mine, theirs, lower_is_better=True):
    mine, theirs = np.asarray(mine, dtype=float), np.asarray(theirs, dtype=float)
    wins = np.where(mine < theirs, 1.0, np.where(mine == theirs, 0.5, 0.0))
    if not lower_is_better:
        wins = 1.0 - wins
    return float(np.mean(wins))


def run_bench(dataset, kind, methods, n_problems=100, iters=SENTINEL_ITERS,
              n_sp=1024, lpp_p=4, seed=0, eps=3e-4, h=0.04, t0=1.0,
              trained_model=None, alpha=6.0, n_jobs=1, from_test_split=True,
              keep_records=False):
    """Run every method on every sampled problem and aggregate the two
    sweep statistics (mean log grad norm at the horizon, mean complexity
    with the sentinel rule) plus the trained solver's win rates.
    """
    master = np.random.default_rng(seed)
    problem_seeds = [int(s) for s in master.integers(2**63, size=n_problems)]
    sampler = sample_test_problem if from_test_split else sample_problem

    def solve_one(index):
        p_seed = problem_seeds[index]
        problem, _ = sampler(dataset, n_sp, kind, p_seed, p=lpp_p)
        out = {}
        for method in methods:
            relay = method == "eigac"
            cfg = SolverConfig(h=h, t0=t0, eps=eps, max_iters=iters,
                               early_stop=False, relay=relay)
            if method == "eigac":
                if trained_model is None:
                    model = default_model(problem.L, h, alpha=alpha)
                else:
                    model = trained_model
            elif method == "eigac-default":
                model = default_model(problem.L, h, alpha=alpha)
            else:
                model = None
            rec = RUNNERS[method](problem, model, cfg)
            if rec.diverged_at is not None:
                measure = np.inf
            else:
                measure = float(np.log10(max(rec.grad_norms[-1], 1e-300)))
            out[method] = (measure, rec.complexity(sentinel=iters),
                           rec if keep_records else None)
        return index, out

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(solve_one, range(n_problems)))
    else:
        results = [solve_one(i) for i in range(n_problems)]
    results.sort(key=lambda pair: pair[0])

    stats, records = {}, {}
    for method in methods:
        ms = np.array([r[1][method][0] for r in results])
        ns = np.array([r[1][method][1] for r in results])
        stats[method] = MethodStats(ms, ns)
        if keep_records:
            records[method] = [r[1][method][2] for r in results]

    summary = BenchSummary(list(methods), stats, n_problems=n_problems,
                           records=records)
    if "eigac" in methods:
        mine = stats["eigac"]
        for method in methods:
            if method == "eigac":
                continue
            other = stats[method]
            summary.win_measure[method] = _win_rate(mine.measures, other.measures)
            summary.win_complexity[method] = _win_rate(mine.complexities,
                                                       other.complexities)
    return summary


# --- the canonical certification problem -----------------------------------

CANONICAL = dict(d=5, count=64, data_seed=7, n_sp=32, problem_seed=11,
                 d_h=4, model_seed=3, eps=2e-2, h=0.04, t0=1.0,
                 h_int=1e-3, t_max=21.0, rho=0.1)


def canonical_setup(eps=None, h_int=None, perturbed=False):
    """Small logistic instance plus a fitted perceptron model for gradcheck.

    perturbed=True inflates beta and deflates gamma so both penalty clamps
    are active along the trajectory, exercising every gradient pathway.
    """
    c = CANONICAL
    dataset = gen_separable(c["d"], c["count"], c["data_seed"])
    problem, _ = sample_problem(dataset, c["n_sp"], "logistic", c["problem_seed"])
    default = default_model(problem.L, c["h"])
    model = init_learnable(default, d_h=c["d_h"], seed=c["model_seed"],
                           t_lo=c["t0"], t_hi=c["t_max"])
    if perturbed:
        theta = model.get_theta()
        nb = model.beta.n_params
        theta[1 + nb - 5:1 + nb] *= 3.0   # beta output layer up
        theta[-5:] *= 0.3                 # gamma output layer down
        model.set_theta(theta)
    config = IntegrateConfig(t0=c["t0"], h_int=h_int or c["h_int"],
                             t_max=c["t_max"], eps=eps or c["eps"],
                             lam=(model.alpha - 1) / 2, h_disc=c["h"])
    return problem, model, config


# --- columnar output --------------------------------------------------------

def write_csv(path, header, rows, fmt="%.12g"):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(_format_cell(c, fmt) for c in row) + "\n")
    return path


def _format_cell(c, fmt):
    if isinstance(c, str):
        return c
    if isinstance(c, (int, np.integer)):
        return str(int(c))
    return fmt % float(c)


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows


def reaggregate_run_files(paths, eps, sentinel=SENTINEL_ITERS):
    """Recompute (m_bar, n_bar) from exported per-run files (no hidden state)."""
    measures, complexities = [], []
    for path in paths:
        _, rows = read_csv(path)
        gnorms = np.array([float(r[1]) for r in rows])
        measures.append(np.log10(max(gnorms[-1], 1e-300)))
        crossed = np.nonzero(gnorms <= eps)[0]
        complexities.append(int(crossed[0]) if len(crossed) else sentinel)
    return float(np.mean(measures)), float(np.mean(complexities))


def diagnose(problem, model, h=0.04, t0=1.0, eps=3e-4, h_int=0.01,
             t_max=21.0, estimator=None, kappa=0.5, lam=None):
    """Paired trajectory/iteration diagnostics for the report command."""
    from .conditions import default_params, stability_report
    from .dynamics import integrate
    from .objectives import PowerEstimator

    est = estimator or PowerEstimator()
    icfg = IntegrateConfig(t0=t0, h_int=h_int, t_max=t_max, eps=eps,
                           estimator=est, kappa=kappa, lam=lam,
                           h_disc=h, xbar_mode="paired")
    traj = integrate(problem, model, icfg)
    scfg = SolverConfig(h=h, t0=t0, eps=eps, diagnostics=1)
    record = eigac_run(problem, model, scfg)
    params = default_params(model, h=h) if lam is None else None
    if params is None:
        from .conditions import ConditionParams
        params = ConditionParams(kappa=kappa, lam=lam, h=h)
    ts = t0 + h * np.arange(len(record.grad_norms))
    xs = [traj.state_at(min(t, traj.ts[-1])).x for t in ts]
    lam_maxes = []
    est2 = PowerEstimator()
    for x in xs:
        lam_maxes.append(est2.estimate(problem, x))
    report = stability_report(problem, model, params, ts, xs, lam_maxes, est)
    return traj, record, report
