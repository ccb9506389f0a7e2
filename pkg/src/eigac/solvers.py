"""Discrete optimizers emitting uniform run records.

The main iteration is the explicit Euler scheme of the damped inertial
system (two coupled updates in x and v); baselines are vanilla gradient
descent, Nesterov's method for convex functions, and the NAG-inspired
discretization of the Hessian-damped system.  All runs share the same
initial point and gradient-norm stopping rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .coeffs import safeguard_model
from .conditions import contraction_factor
from .dynamics import initial_state
from .errors import DataError
from .objectives import lambda_max


@dataclass
class SolverConfig:
    h: float = 0.04
    t0: float = 1.0
    eps: float = 3e-4
    max_iters: int = 500
    early_stop: bool = True       # False: run the full horizon (sweep statistics)
    relay: bool = False
    relay_factor: float = 5.0
    diagnostics: int = 0          # 1: record (rho, B, C) per step
    beta_igahd: float = 1.0
    alpha_igahd: float = 6.0


@dataclass
class RunRecord:
    method: str
    grad_norms: np.ndarray
    f_vals: np.ndarray
    rho: np.ndarray = None
    B: np.ndarray = None
    C: np.ndarray = None
    iterations: int = 0           # first index with grad norm <= eps, else len-1
    hit: bool = False
    relay_at: list = field(default_factory=list)
    diverged_at: int = None
    meta: dict = field(default_factory=dict)

    def complexity(self, sentinel=500) -> int:
        """First iterate meeting the threshold; sentinel when never met."""
        return self.iterations if self.hit else sentinel

    def export_rows(self):
        k = np.arange(len(self.grad_norms))
        cols = [k, self.grad_norms, self.f_vals]
        if self.rho is not None:
            cols += [self.rho, self.B, self.C]
        return np.column_stack(cols)

    HEADER_PLAIN = "k,grad_norm,f_value"
    HEADER_DIAG = "k,grad_norm,f_value,rho,B,C"


class _Recorder:
    def __init__(self, method, problem, config):
        self.method = method
        self.problem = problem
        self.config = config
        self.gnorms = []
        self.fvals = []
        self.rho = [] if config.diagnostics >= 1 else None
        self.B = [] if config.diagnostics >= 1 else None
        self.C = [] if config.diagnostics >= 1 else None
        self.relay_at = []
        self.diverged_at = None
        self._z = None

    def push(self, k, x, model=None):
        fv, g = self.problem.value_and_gradient(x)
        self.last_grad = g
        gn = float(np.linalg.norm(g))
        self.gnorms.append(gn)
        self.fvals.append(fv)
        if self.rho is not None and model is not None:
            t_k = self.config.t0 + k * self.config.h
            lam, self._z = lambda_max(self.problem, x, z0=self._z)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                r, b, c = contraction_factor(t_k, lam, 0.0, model, self.config.h)
            self.rho.append(r)
            self.B.append(b)
            self.C.append(c)
        elif self.rho is not None:
            self.rho.append(np.nan)
            self.B.append(np.nan)
            self.C.append(np.nan)
        return gn

    def finish(self, meta=None):
        gnorms = np.array(self.gnorms)
        hit = bool(len(gnorms) and gnorms.min() <= self.config.eps)
        iterations = int(np.argmax(gnorms <= self.config.eps)) if hit else len(gnorms) - 1
        rec = RunRecord(self.method, gnorms, np.array(self.fvals),
                        None if self.rho is None else np.array(self.rho),
                        None if self.B is None else np.array(self.B),
                        None if self.C is None else np.array(self.C),
                        iterations, hit, self.relay_at, self.diverged_at,
                        meta or {})
        return rec


def _relay_trigger(gn, best, eps, factor):
    return gn >= factor * best and gn > eps


def eigac_run(problem, model, config: SolverConfig) -> RunRecord:
    """Explicit Euler iteration of the inertial system with optional relay.

    The relay swaps the coefficients for the safe closed-form pair built
    from the local curvature estimate whenever the gradient norm blows up
    to relay_factor times its running minimum; it can re-trigger only after
    a new minimum has been established.
    """
    state = initial_state(problem, model, t0=config.t0)
    x, v = state.x.copy(), state.v.copy()
    rec = _Recorder("eigac", problem, config)
    active = model
    best = np.inf
    armed = True
    for k in range(config.max_iters + 1):
        if not np.all(np.isfinite(x)):
            rec.diverged_at = k
            break
        gn = rec.push(k, x, active)
        if gn <= config.eps and config.early_stop:
            break
        if gn < best:
            best = gn
            armed = True
        if (config.relay and armed
                and _relay_trigger(gn, best, config.eps, config.relay_factor)):
            lam, _ = lambda_max(problem, x, max_iters=20)
            if lam > 0:
                active = safeguard_model(lam, config.h, active.alpha)
                rec.relay_at.append(k)
                armed = False
        if k == config.max_iters:
            break
        t_k = config.t0 + k * config.h
        be = active.beta.eval(t_k)
        ge = active.gamma.eval(t_k)
        g = rec.last_grad
        dx = v - be.value * g
        x = x + config.h * dx
        v = v + config.h * (-(active.alpha / t_k) * dx + (be.d1 - ge.value) * g)
    return rec.finish(meta={"relay": config.relay})


def eigac_run_eliminated(problem, model, config: SolverConfig) -> RunRecord:
    """The equivalent two-step recurrence with the auxiliary variable removed.

    x_{k+2} = x_{k+1} + (1 - alpha h / t_k)(x_{k+1} - x_k)
              - h^2 (gamma_k - beta'_k + (beta_{k+1} - beta_k)/h) grad f(x_k)
              - h beta_{k+1} (grad f(x_{k+1}) - grad f(x_k)).
    """
    state = initial_state(problem, model, t0=config.t0)
    rec = _Recorder("eigac-eliminated", problem, config)
    t0, h, alpha = config.t0, config.h, model.alpha
    x_prev = state.x.copy()
    g_prev = problem.gradient(x_prev)
    x = x_prev + h * (state.v - model.beta.eval(t0).value * g_prev)
    gn = rec.push(0, x_prev)
    for k in range(1, config.max_iters + 1):
        if gn <= config.eps and config.early_stop:
            break
        gn = rec.push(k, x)
        if (gn <= config.eps and config.early_stop) or k == config.max_iters:
            break
        t_k = t0 + (k - 1) * h  # the step that produced the pair (x_prev, x)
        be_k = model.beta.eval(t_k)
        be_k1 = model.beta.eval(t_k + h)
        ge_k = model.gamma.eval(t_k)
        g = rec.last_grad
        x_next = (x + (1 - alpha * h / t_k) * (x - x_prev)
                  - h**2 * (ge_k.value - be_k.d1 + (be_k1.value - be_k.value) / h) * g_prev
                  - h * be_k1.value * (g - g_prev))
        x_prev, x, g_prev = x, x_next, g
    return rec.finish()


def gd_run(problem, config: SolverConfig) -> RunRecord:
    """Vanilla gradient descent with step 1/L."""
    s = 1.0 / problem.L
    state = initial_state(problem, _unit_beta_stub(), t0=config.t0)
    x = state.x.copy()
    rec = _Recorder("gd", problem, config)
    for k in range(config.max_iters + 1):
        gn = rec.push(k, x)
        if gn <= config.eps and config.early_stop:
            break
        if k == config.max_iters:
            break
        x = x - s * rec.last_grad
    return rec.finish()


class _ZeroCurve:
    n_params = 0

    def eval(self, t):
        from .coeffs import CurveEval
        return CurveEval(0.0, 0.0, 0.0)


def _unit_beta_stub():
    """Baselines share the x0 formula but never use the curves."""
    from .coeffs import CoefficientModel
    return CoefficientModel(5.0, _ZeroCurve(), _ZeroCurve())


def nag_run(problem, config: SolverConfig) -> RunRecord:
    """Nesterov's accelerated gradient, convex-function variant."""
    s = 1.0 / problem.L
    state = initial_state(problem, _unit_beta_stub(), t0=config.t0)
    x = state.x.copy()
    y_prev = x.copy()
    rec = _Recorder("nag", problem, config)
    for k in range(config.max_iters + 1):
        gn = rec.push(k, x)
        if gn <= config.eps and config.early_stop:
            break
        if k == config.max_iters:
            break
        y = x - s * rec.last_grad
        x = y + (k - 1.0) / (k + 2.0) * (y - y_prev)
        y_prev = y
    return rec.finish()


def igahd_run(problem, config: SolverConfig, beta_igahd=None) -> RunRecord:
    """NAG-inspired discretization of the Hessian-damped system.

    y_k = x_k + (1 - alpha/k)(x_k - x_{k-1})
          - b sqrt(s)(grad f(x_k) - grad f(x_{k-1})) - (b sqrt(s)/k) grad f(x_{k-1});
    x_{k+1} = y_k - s grad f(y_k), with x_0 = x_1 and s = 1/L.
    Requires 0 <= b < 2/sqrt(s).
    """
    s = 1.0 / problem.L
    b = config.beta_igahd if beta_igahd is None else beta_igahd
    if not 0 <= b < 2.0 / np.sqrt(s):
        raise DataError(f"IGAHD damping {b} outside [0, 2/sqrt(s))")
    alpha = config.alpha_igahd
    state = initial_state(problem, _unit_beta_stub(), t0=config.t0)
    x = state.x.copy()
    x_prev = x.copy()
    g_prev = problem.gradient(x_prev)
    rec = _Recorder("igahd", problem, config)
    rs = np.sqrt(s)
    for k in range(config.max_iters + 1):
        gn = rec.push(k, x)
        if gn <= config.eps and config.early_stop:
            break
        if k == config.max_iters:
            break
        g = rec.last_grad
        kk = k + 1  # recurrence index starts at 1 with x_0 = x_1
        a_k = 1.0 - alpha / kk
        y = x + a_k * (x - x_prev) - b * rs * (g - g_prev) - (b * rs / kk) * g_prev
        x_prev, g_prev = x, g
        x = y - s * problem.gradient(y)
    return rec.finish()


def reference_solution(problem, tol=1e-10, budget=200_000):
    """(x_star, f_star) from a long Nesterov run; best iterate kept.

    Attaches a warning when the budget runs out above 1e-8.
    """
    s = 1.0 / problem.L
    state = initial_state(problem, _unit_beta_stub(), t0=1.0)
    x = state.x.copy()
    y_prev = x.copy()
    best_f, best_x = problem.value(x), x.copy()
    final_gn = np.inf
    for k in range(budget):
        g = problem.gradient(x)
        final_gn = float(np.linalg.norm(g))
        fv = problem.value(x)
        if fv < best_f:
            best_f, best_x = fv, x.copy()
        if final_gn <= tol:
            break
        y = x - s * g
        x = y + (k - 1.0) / (k + 2.0) * (y - y_prev)
        y_prev = y
    if final_gn > 1e-8:
        warnings.warn(f"reference solution stopped at grad norm {final_gn:.2e}",
                      RuntimeWarning)
    return best_x, best_f


RUNNERS = {
    "gd": lambda problem, model, config: gd_run(problem, config),
    "nag": lambda problem, model, config: nag_run(problem, config),
    "igahd": lambda problem, model, config: igahd_run(problem, config),
    "eigac": eigac_run,
    "eigac-default": eigac_run,
}
