"""Convergence and stability diagnostics for the damped inertial system.

Everything here is a pure formula evaluation: the weighted quantities
delta(t) and w(t), the clamped penalty integrands p and q, the one-step
contraction factor of the explicit Euler scheme, the strong root-location
test, the Lyapunov energy, and the coefficient growth constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConditionParams:
    """Weights (kappa, lambda) of the energy argument plus the Euler step h.

    kappa in (0, 1], lambda in (0, alpha - 1]; the defaults kappa = 0.5,
    lambda = (alpha - 1)/2 keep every energy term active and the truncation
    constants finite.  A single diagnostic/gradient evaluation treats these
    as fixed numbers even when lambda was derived from alpha.
    """

    kappa: float = 0.5
    lam: float = 2.5
    h: float = 0.04


def default_params(model, h=0.04) -> ConditionParams:
    return ConditionParams(kappa=0.5, lam=(model.alpha - 1) / 2, h=h)


def delta_w(model, params, t):
    """(delta, delta_dot, w) assembled from the curve values and derivatives."""
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha, k, lam = model.alpha, params.kappa, params.lam
    c = k * (alpha - 1 - lam) - lam * (1 - k)
    u = ge.value - k * be.d1 - k * be.value / t
    u_dot = ge.d1 - k * be.d2 - k * be.d1 / t + k * be.value / t**2
    delta = t**2 * u + c * t * be.value
    delta_dot = 2 * t * u + t**2 * u_dot + c * (be.value + t * be.d1)
    w = ge.value - be.d1 - be.value / t
    return delta, delta_dot, w


def q_value(model, params, t) -> float:
    """Four clamped violations of the coefficient inequalities at time t."""
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    delta, delta_dot, w = delta_w(model, params, t)
    alpha = model.alpha
    terms = (ge.value - be.d1 - be.value / params.h,
             be.d1 + alpha * be.value / t - ge.value,
             delta_dot - params.lam * t * w,
             -delta)
    return float(sum(max(v, 0.0) for v in terms))


RADICAND_FLOOR = 0.0


def p_value(x, xbar, model, t, problem, estimator) -> float:
    """Clamped curvature-margin violation at time t.

    A negative radicand under either square root contributes zero (the q
    terms already penalize the violated coefficient inequality), keeping p
    total and finite during training excursions.
    """
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    if xbar is x or xbar is None or np.array_equal(xbar, x):
        seg = estimator.estimate(problem, x)
    else:
        from .dynamics import _lambda_segment
        seg = _lambda_segment(problem, estimator, x, xbar)
    u1 = ge.value - be.d1
    u2 = u1 - model.alpha * be.value / t
    inner = be.value * np.sqrt(max(seg, 0.0))
    if u1 > RADICAND_FLOOR:
        inner -= np.sqrt(u1)
    if u2 > RADICAND_FLOOR:
        inner -= np.sqrt(u2)
    return max(float(inner), 0.0)


def contraction_factor(t, lam_max, lam_min, model, h):
    """(rho, B(lam_max), C(lam_max)) of the one-step error propagation.

    rho is the spectral radius of the Euler update's linearization for a
    curvature matrix with extreme eigenvalues (lam_min, lam_max); assumes
    the coefficient inequalities alpha*beta/t <= gamma - beta' <= beta/h,
    warning when they fail since the extreme-eigenvalue reduction then
    loses its monotonicity argument.
    """
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha = model.alpha
    gmb = ge.value - be.d1
    if not (alpha * be.value / t <= gmb + 1e-12 and gmb <= be.value / h + 1e-12):
        warnings.warn("coefficient inequalities violated; contraction factor "
                      "formula may underestimate the spectral radius",
                      RuntimeWarning)

    def A(L):
        return h**2 * gmb * L

    def B(L):
        return 0.5 * h * (be.value * L + alpha / t)

    b_hi = B(lam_max)
    c_hi = b_hi**2 - A(lam_max)
    root_c = np.sqrt(max(c_hi, 0.0))
    rho = max(np.sqrt(max(1 - 2 * B(lam_min) + A(lam_min), 0.0)),
              b_hi - 1 + root_c,
              1 - b_hi + root_c)
    return float(rho), float(b_hi), float(c_hi)


def propagation_matrix(t, G, model, h):
    """Dense 2n x 2n one-step error-propagation matrix (oracle route).

    Blocks follow the linearization of the Euler scheme:
    [[I - h beta G, h I], [h (alpha beta / t + beta' - gamma) G, (1 - alpha h / t) I]].
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha = model.alpha
    eye = np.eye(n)
    top = np.hstack([eye - h * be.value * G, h * eye])
    bottom = np.hstack([h * (alpha * be.value / t + be.d1 - ge.value) * G,
                        (1 - alpha * h / t) * eye])
    return np.vstack([top, bottom])


def strong_root_check(mu, nu, rho) -> bool:
    """True iff both roots of r^2 + mu r + nu lie within |r| <= rho.

    rho = 1 is the classical Schur case; 0 < rho < 1 is the strong form.
    """
    if not 0 < rho <= 1:
        raise ValueError("root radius must lie in (0, 1]")
    return bool(nu <= rho**2 and rho * mu - rho**2 <= nu and -rho * mu - rho**2 <= nu)


def lyapunov_energy(state, model, params, problem, x_star, f_star) -> float:
    """The five-term decreasing energy of the continuous trajectory."""
    t, x, v = state.t, state.x, state.v
    be = model.beta.eval(t)
    g = problem.gradient(x)
    xd = v - be.value * g
    k, lam, alpha = params.kappa, params.lam, model.alpha
    delta, _, _ = delta_w(model, params, t)
    diff = x - x_star
    mix = lam * diff + t * (xd + k * be.value * g)
    return float(delta * (problem.value(x) - f_star)
                 + 0.5 * mix @ mix
                 + lam * (1 - k) * t * be.value * (g @ diff)
                 + 0.5 * k * (1 - k) * (t * be.value) ** 2 * (g @ g)
                 + 0.5 * lam * (alpha - 1 - lam) * (diff @ diff))


@dataclass
class GrowthReport:
    C1: float
    C2: float
    C3: float
    c2_admissible: bool       # C2 <= 1/h - 1/t0
    offending_t: float = None  # where w(t) <= 0 forced the C3 = inf sentinel


def growth_constants(model, t_grid, h=0.04) -> GrowthReport:
    """Tightest growth constants of the coefficients over the grid."""
    t_grid = np.asarray(t_grid, dtype=float)
    C1 = C2 = C3 = 0.0
    offending = None
    for t in t_grid:
        be = model.beta.eval(t)
        ge = model.gamma.eval(t)
        w = ge.value - be.d1 - be.value / t
        if be.value > 0:
            C1 = max(C1, abs(be.d1) / be.value)
        gmb = ge.value - be.d1
        if gmb > 0:
            C2 = max(C2, abs(ge.d1 - be.d2) / gmb)
        if w <= 0:
            if be.value > 0 and offending is None:
                offending = float(t)
                C3 = np.inf
        elif np.isfinite(C3):
            C3 = max(C3, be.value / w)
    return GrowthReport(C1, C2, C3, C2 <= 1.0 / h - 1.0 / t_grid[0], offending)


@dataclass
class StabilityReport:
    ts: np.ndarray
    p: np.ndarray
    q: np.ndarray
    delta: np.ndarray
    slack: np.ndarray          # delta_dot - lam * t * w (feasible when <= 0)
    rho: np.ndarray
    B: np.ndarray
    C: np.ndarray
    converge_ok: bool = False
    stab1_ok: bool = False
    meta: dict = field(default_factory=dict)

    def rows(self):
        return np.column_stack([self.ts, self.p, self.q, self.delta,
                                self.slack, self.rho, self.B,
                                np.maximum(self.B - 1, 1 - self.B), self.C])

    HEADER = "t,p,q,delta,slack,rho,B,maxB,C"


def stability_report(problem, model, params, ts, xs, lam_maxes,
                     estimator, xbars=None) -> StabilityReport:
    """Per-time condition values along a run or trajectory."""
    m = len(ts)
    p = np.empty(m); q = np.empty(m); de = np.empty(m); sl = np.empty(m)
    rho = np.empty(m); B = np.empty(m); C = np.empty(m)
    stab1 = True
    for i, t in enumerate(ts):
        xbar = None if xbars is None else xbars[i]
        p[i] = p_value(xs[i], xbar, model, t, problem, estimator)
        q[i] = q_value(model, params, t)
        de[i], dd, w = delta_w(model, params, t)
        sl[i] = dd - params.lam * t * w
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rho[i], B[i], C[i] = contraction_factor(t, lam_maxes[i], 0.0,
                                                    model, params.h)
        be = model.beta.eval(t)
        ge = model.gamma.eval(t)
        gmb = ge.value - be.d1
        stab1 &= (model.alpha * be.value / t <= gmb + 1e-12
                  and gmb <= be.value / params.h + 1e-12)
    converge = bool(np.all(de > 0) and np.all(sl <= 1e-12))
    return StabilityReport(np.asarray(ts, dtype=float), p, q, de, sl, rho, B, C,
                           converge_ok=converge, stab1_ok=bool(stab1))
