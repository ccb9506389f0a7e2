"""Forward integration of the damped inertial system in first-order form.

State is s = (x, v) with dx = v - beta(t) grad f(x) and
dv = -(alpha/t)(v - beta(t) grad f(x)) + (beta'(t) - gamma(t)) grad f(x).
The integrator is fixed-step classical Runge-Kutta so the adjoint pass can
reuse the exact same grid; gradient-norm crossings are refined by bisection
on a cubic Hermite reconstruction of the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StoppingNotReached, TrajectoryBlowUp
from .objectives import ConstantEstimator

EVENT_REL_TOL = 1e-3  # |grad norm - eps| <= this fraction of eps at the crossing


@dataclass(frozen=True)
class SystemState:
    x: np.ndarray
    v: np.ndarray
    t: float


def vector_field(state, model, problem, grad=None):
    """(dx, dv) of the first-order system at the given state."""
    t = state.t
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    g = problem.gradient(state.x) if grad is None else grad
    dx = state.v - be.value * g
    dv = -(model.alpha / t) * dx + (be.d1 - ge.value) * g
    return dx, dv


def xdot(state, model, problem, grad=None):
    g = problem.gradient(state.x) if grad is None else grad
    return state.v - model.beta.eval(state.t).value * g


def initial_state(problem, model, t0=1.0, zero_velocity=False) -> SystemState:
    """x0 = ones/n - grad f(ones/n)/L with v0 = x0 + beta(t0) grad f(x0).

    The zero_velocity option uses v0 = beta(t0) grad f(x0) instead, which
    makes dx(t0) = 0 rather than the conventional dx(t0) = x0.
    """
    n = problem.n
    base = np.full(n, 1.0 / n)
    x0 = base - problem.gradient(base) / problem.L
    g0 = problem.gradient(x0)
    v0 = model.beta.eval(t0).value * g0
    if not zero_velocity:
        v0 = x0 + v0
    return SystemState(x0, v0, t0)


@dataclass
class IntegrateConfig:
    t0: float = 1.0
    h_int: float = 0.01
    t_max: float = 21.0
    eps: float = 3e-4
    estimator: object = None      # defaults to ConstantEstimator(problem.L)
    kappa: float = 0.5
    lam: float = None             # defaults to (alpha - 1) / 2
    h_disc: float = 0.04          # coarse step for q and the paired recurrence
    xbar_mode: str = "trajectory"  # or "paired"
    store_values: bool = True
    accumulate: bool = True       # evaluate p/q integrands along the way


@dataclass
class Trajectory:
    ts: np.ndarray
    xs: np.ndarray
    vs: np.ndarray
    dxs: np.ndarray
    dvs: np.ndarray
    grad_norms: np.ndarray
    f_vals: np.ndarray
    p_vals: np.ndarray
    q_vals: np.ndarray
    P_acc: float
    Q_acc: float
    T: float                      # crossing time, or inf sentinel
    x_T: np.ndarray = None
    v_T: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def crossed(self):
        return np.isfinite(self.T)

    def interp(self, t):
        """Cubic Hermite (x, v) inside the stored grid."""
        ts = self.ts
        if t <= ts[0]:
            return self.xs[0].copy(), self.vs[0].copy()
        if t >= ts[-1]:
            return self.xs[-1].copy(), self.vs[-1].copy()
        j = int(np.searchsorted(ts, t, side="right") - 1)
        h = ts[j + 1] - ts[j]
        tau = (t - ts[j]) / h
        h00 = (1 + 2 * tau) * (1 - tau) ** 2
        h10 = tau * (1 - tau) ** 2
        h01 = tau**2 * (3 - 2 * tau)
        h11 = tau**2 * (tau - 1)
        x = (h00 * self.xs[j] + h * h10 * self.dxs[j]
             + h01 * self.xs[j + 1] + h * h11 * self.dxs[j + 1])
        v = (h00 * self.vs[j] + h * h10 * self.dvs[j]
             + h01 * self.vs[j + 1] + h * h11 * self.dvs[j + 1])
        return x, v

    def state_at(self, t) -> SystemState:
        x, v = self.interp(t)
        return SystemState(x, v, t)

    def export_rows(self):
        """Columns (t, grad_norm, f, P_acc, Q_acc) with running accumulators."""
        p_run = np.concatenate([[0.0], np.cumsum(
            0.5 * (self.p_vals[1:] + self.p_vals[:-1]) * np.diff(self.ts))])
        q_run = np.concatenate([[0.0], np.cumsum(
            0.5 * (self.q_vals[1:] + self.q_vals[:-1]) * np.diff(self.ts))])
        return np.column_stack([self.ts, self.grad_norms, self.f_vals, p_run, q_run])


def _psi(t, x, v, model, problem, grad=None):
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    g = problem.gradient(x) if grad is None else grad
    dx = v - be.value * g
    dv = -(model.alpha / t) * dx + (be.d1 - ge.value) * g
    return dx, dv


def _rk4_step(t, x, v, h, model, problem, grad0=None):
    k1x, k1v = _psi(t, x, v, model, problem, grad=grad0)
    k2x, k2v = _psi(t + h / 2, x + h / 2 * k1x, v + h / 2 * k1v, model, problem)
    k3x, k3v = _psi(t + h / 2, x + h / 2 * k2x, v + h / 2 * k2v, model, problem)
    k4x, k4v = _psi(t + h, x + h * k3x, v + h * k3v, model, problem)
    x_new = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new, (k1x, k1v)


def _run_discrete(problem, model, h, t0, x0, v0, n_steps):
    """The explicit-Euler recurrence on the coarse grid, for paired mode."""
    xs = np.empty((n_steps + 1, problem.n))
    xs[0] = x0
    x, v = x0.copy(), v0.copy()
    for k in range(n_steps):
        t = t0 + k * h
        be = model.beta.eval(t)
        ge = model.gamma.eval(t)
        g = problem.gradient(x)
        dx = v - be.value * g
        x = x + h * dx
        v = v + h * (-(model.alpha / t) * dx + (be.d1 - ge.value) * g)
        xs[k + 1] = x
    return xs


GL3_NODES = (0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10)
GL3_WEIGHTS = (5 / 18, 8 / 18, 5 / 18)


def _lambda_segment(problem, estimator, x, xbar):
    """3-point Gauss-Legendre value of the averaged curvature on [x, xbar]."""
    total = 0.0
    for w, tau in zip(GL3_WEIGHTS, GL3_NODES):
        total += w * estimator.estimate(problem, (1 - tau) * x + tau * xbar)
    return total


def integrate(problem, model, config: IntegrateConfig) -> Trajectory:
    """Fixed-step RK4 with trapezoidal penalty accumulation and event stop.

    Stops at the first grid point where ||grad f(x)|| <= eps (the in-step
    crossing is then located by bisection on the Hermite segment) or when
    t reaches t_max, in which case T is the inf sentinel.
    """
    from .conditions import ConditionParams, p_value, q_value

    t0 = config.t0
    state = initial_state(problem, model, t0=t0)
    estimator = config.estimator or ConstantEstimator(problem.L)
    lam = config.lam if config.lam is not None else (model.alpha - 1) / 2
    params = ConditionParams(kappa=config.kappa, lam=lam, h=config.h_disc)

    n_steps = int(np.ceil((config.t_max - t0) / config.h_int - 1e-9))
    paired = None
    if config.xbar_mode == "paired":
        n_coarse = int(np.ceil((config.t_max - t0) / config.h_disc - 1e-9))
        paired = _run_discrete(problem, model, config.h_disc, t0,
                               state.x, state.v, n_coarse)

    def xbar_at(t, x):
        if paired is None:
            return x
        k = min(int((t - t0) / config.h_disc), len(paired) - 2)
        frac = (t - (t0 + k * config.h_disc)) / config.h_disc
        return paired[k] + frac * (paired[k + 1] - paired[k])

    ts, xs, vs, dxs, dvs = [], [], [], [], []
    gnorms, fvals, pvals, qvals = [], [], [], []

    x, v, t = state.x.copy(), state.v.copy(), t0
    P_acc = Q_acc = 0.0
    T = np.inf
    x_T = v_T = None

    def record(t, x, v):
        if config.store_values:
            fv, g = problem.value_and_gradient(x)
        else:
            fv, g = np.nan, problem.gradient(x)
        dx, dv = _psi(t, x, v, model, problem, grad=g)
        ts.append(t); xs.append(x); vs.append(v); dxs.append(dx); dvs.append(dv)
        gnorms.append(float(np.linalg.norm(g)))
        fvals.append(fv)
        if config.accumulate:
            pvals.append(p_value(x, xbar_at(t, x), model, t, problem, estimator))
            qvals.append(q_value(model, params, t))
        else:
            pvals.append(0.0)
            qvals.append(0.0)
        return g

    g = record(t, x, v)
    if gnorms[0] <= config.eps:
        T, x_T, v_T = t0, x.copy(), v.copy()

    k = 0
    while not np.isfinite(T) and k < n_steps:
        x_new, v_new, _ = _rk4_step(t, x, v, config.h_int, model, problem, grad0=g)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
            raise TrajectoryBlowUp(t + config.h_int)
        t_new = t0 + (k + 1) * config.h_int
        g = record(t_new, x_new, v_new)
        if config.accumulate:
            dt = t_new - t
            P_acc += 0.5 * dt * (pvals[-2] + pvals[-1])
            Q_acc += 0.5 * dt * (qvals[-2] + qvals[-1])
        x, v, t = x_new, v_new, t_new
        k += 1
        if gnorms[-1] <= config.eps:
            traj_part = Trajectory(np.array(ts), np.array(xs), np.array(vs),
                                   np.array(dxs), np.array(dvs),
                                   np.array(gnorms), np.array(fvals),
                                   np.array(pvals), np.array(qvals),
                                   P_acc, Q_acc, np.inf)
            T = _locate_crossing(traj_part, problem, config.eps)
            x_T, v_T = traj_part.interp(T)
            if config.accumulate:
                # replace the last full-step contribution by the partial one
                dt = t - ts[-2]
                P_acc -= 0.5 * dt * (pvals[-2] + pvals[-1])
                Q_acc -= 0.5 * dt * (qvals[-2] + qvals[-1])
                p_T = p_value(x_T, xbar_at(T, x_T), model, T, problem, estimator)
                q_T = q_value(model, params, T)
                P_acc += 0.5 * (T - ts[-2]) * (pvals[-2] + p_T)
                Q_acc += 0.5 * (T - ts[-2]) * (qvals[-2] + q_T)

    mode = "paired" if paired is not None else "trajectory"
    return Trajectory(np.array(ts), np.array(xs), np.array(vs),
                      np.array(dxs), np.array(dvs), np.array(gnorms),
                      np.array(fvals), np.array(pvals), np.array(qvals),
                      P_acc, Q_acc, T, x_T, v_T,
                      meta={"xbar_mode": mode, "eps": config.eps,
                            "h_int": config.h_int, "t0": t0})


def _locate_crossing(traj, problem, eps):
    """Bisect ||grad f|| - eps on the Hermite segment bracketing the event."""
    lo, hi = traj.ts[-2], traj.ts[-1]
    g_lo = traj.grad_norms[-2] - eps
    if g_lo <= 0:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        x_mid, _ = traj.interp(mid)
        g_mid = float(np.linalg.norm(problem.gradient(x_mid))) - eps
        if g_mid > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    t_star = 0.5 * (lo + hi)
    x_star, _ = traj.interp(t_star)
    resid = abs(np.linalg.norm(problem.gradient(x_star)) - eps)
    if resid > EVENT_REL_TOL * eps:
        # the Hermite reconstruction can only be this far off if the grid is
        # far too coarse for the dynamics
        raise StoppingNotReached(
            f"event refinement stalled: |grad norm - eps| = {resid:.3g}")
    return t_star


def stopping_time(traj: Trajectory) -> float:
    """First time the gradient norm reaches the threshold; inf if never."""
    return traj.T
