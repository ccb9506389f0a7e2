"""Parameter gradients of the training loss T + rho (P + Q).

The stopping-time gradient follows the implicit-function route: a linear
costate is integrated backward along the stored forward grid and the
resulting integral is divided by the level-set crossing speed.  The penalty
gradients add a second costate with a source term plus moving-endpoint
boundary terms.  Every formula here is certified against central finite
differences in the test suite and by the gradcheck command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditions import ConditionParams, delta_w, q_value
from .dynamics import IntegrateConfig, integrate
from .errors import NumericsError, StoppingNotReached
from .objectives import ConstantEstimator, lambda_max

TANGENCY_GUARD = 1e-12


def psi_jacobian_apply(state, model, problem, r):
    """(d psi / d s)^T r from two Hessian-vector products.

    The Jacobian blocks are d(dx)/dx = -beta H, d(dx)/dv = I,
    d(dv)/dx = (alpha beta / t + beta' - gamma) H, d(dv)/dv = -(alpha/t) I,
    with H the (symmetric) Hessian at the state; the full matrix is never
    materialized.
    """
    t = state.t
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha = model.alpha
    n = problem.n
    r1, r2 = r[:n], r[n:]
    h_r1 = problem.hvp(state.x, r1)
    h_r2 = problem.hvp(state.x, r2)
    out_x = -be.value * h_r1 + (alpha * be.value / t + be.d1 - ge.value) * h_r2
    out_v = r1 - (alpha / t) * r2
    return np.concatenate([out_x, out_v])


def psi_theta_apply(state, model, problem, r, grad=None):
    """r^T (d psi / d theta) over the flattened parameter vector.

    The curve parameters enter through beta, beta' and gamma; alpha enters
    the vector field directly and is chained through its softplus
    reparameterization.
    """
    t = state.t
    be = model.beta.eval(t)
    g = problem.gradient(state.x) if grad is None else grad
    n = problem.n
    r1, r2 = r[:n], r[n:]
    r1g = float(r1 @ g)
    r2g = float(r2 @ g)
    d_beta, d_beta_d1, _, d_gamma, _ = model.curve_param_grads(t)
    out = (d_beta * (-r1g + (model.alpha / t) * r2g)
           + d_beta_d1 * r2g
           + d_gamma * (-r2g))
    xdot = state.v - be.value * g
    out[0] += -float(r2 @ xdot) / t * model.alpha_grad_raw()
    return out


def _backward_nodes(traj):
    """Grid nodes up to and including the crossing time."""
    T = traj.T
    keep = traj.ts < T - 1e-15
    ts = np.append(traj.ts[keep], T)
    return ts


def _node_states(traj):
    """(ts, xs, vs) at the backward nodes, reusing stored grid states."""
    ts = _backward_nodes(traj)
    m = len(ts)
    xs = np.empty((m, traj.xs.shape[1]))
    vs = np.empty_like(xs)
    xs[:m - 1] = traj.xs[:m - 1]
    vs[:m - 1] = traj.vs[:m - 1]
    xs[-1], vs[-1] = traj.x_T, traj.v_T
    return ts, xs, vs


def _theta_rows(traj, model, problem, ts, xs, vs, costates):
    """Batched r^T (d psi / d theta) rows over the backward nodes."""
    m = len(ts)
    n = problem.n
    bvals, _, _ = model.beta.eval_batch(ts)
    d_beta, d_beta_d1, _, d_gamma, _ = model.curve_param_grads_batch(ts)
    r1, r2 = costates[:, :n], costates[:, n:]
    alpha = model.alpha
    d_al = model.alpha_grad_raw()
    rows = np.empty((m, model.n_theta))
    for i in range(m):
        g = problem.gradient(xs[i])
        r1g = float(r1[i] @ g)
        r2g = float(r2[i] @ g)
        rows[i] = (d_beta[i] * (-r1g + (alpha / ts[i]) * r2g)
                   + d_beta_d1[i] * r2g + d_gamma[i] * (-r2g))
        xdot = vs[i] - bvals[i] * g
        rows[i, 0] += -float(r2[i] @ xdot) / ts[i] * d_al
    return rows


def solve_costate(traj, model, problem, terminal, source=None):
    """Backward RK4 for r' = -J^T r - source(t) from T down to t0.

    Stage states come from the Hermite reconstruction of the forward
    trajectory; returns (ts, costates) in increasing time order.
    """
    ts = _backward_nodes(traj)
    m = len(ts)
    costates = np.empty((m, 2 * problem.n))
    costates[-1] = terminal

    def rhs(t, r):
        st = traj.state_at(t)
        out = -psi_jacobian_apply(st, model, problem, r)
        if source is not None:
            out = out - source(t, st)
        return out

    r = terminal.copy()
    for i in range(m - 1, 0, -1):
        h = ts[i - 1] - ts[i]  # negative
        t = ts[i]
        k1 = rhs(t, r)
        k2 = rhs(t + h / 2, r + h / 2 * k1)
        k3 = rhs(t + h / 2, r + h / 2 * k2)
        k4 = rhs(t + h, r + h * k3)
        r = r + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        costates[i - 1] = r
    return ts, costates


def _trapezoid_rows(ts, rows):
    dt = np.diff(ts)
    return ((rows[1:] + rows[:-1]).T * (0.5 * dt)).T.sum(axis=0)


def _initial_condition_term(traj, model, problem, costate_t0):
    """Boundary contribution from the theta-dependent initial state.

    v0 = x0 + beta(t0) grad f(x0) moves with the beta parameters, so the
    sensitivity picks up costate(t0)^T (0; grad f(x0) dbeta(t0)/dtheta) on
    top of the interior integral.
    """
    t0 = traj.ts[0]
    g0 = problem.gradient(traj.xs[0])
    n = problem.n
    d_beta, _, _, _, _ = model.curve_param_grads(t0)
    return d_beta * float(costate_t0[n:] @ g0)


def grad_stopping_time(problem, model, traj):
    """(T, dT/dtheta) from the backward costate along the stored grid.

    The costate terminal condition is (H grad f, 0) at the crossing; the
    crossing speed grad f . H xdot(T) must be bounded away from zero or the
    trajectory is tangent to the level set and the gradient is undefined.
    """
    if not traj.crossed:
        raise StoppingNotReached("stopping time is infinite; no gradient")
    T = traj.T
    x_T, v_T = traj.x_T, traj.v_T
    g_T = problem.gradient(x_T)
    hg = problem.hvp(x_T, g_T)
    xdot_T = v_T - model.beta.eval(T).value * g_T
    denom = float(hg @ xdot_T)
    h_norm, _ = lambda_max(problem, x_T, max_iters=20)
    if abs(denom) < TANGENCY_GUARD * np.linalg.norm(g_T) * max(h_norm, 1e-300):
        raise NumericsError("stopping-time gradient ill-defined: trajectory "
                            "tangent to level set")
    terminal = np.concatenate([hg, np.zeros(problem.n)])
    ts, costates = solve_costate(traj, model, problem, terminal)
    _, xs, vs = _node_states(traj)
    rows = _theta_rows(traj, model, problem, ts, xs, vs, costates)
    integral = (_trapezoid_rows(ts, rows)
                + _initial_condition_term(traj, model, problem, costates[0]))
    return T, -integral / denom


def q_theta_grad(model, params, t):
    """(q(t), dq/dtheta) with the four clamp masks applied."""
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha = model.alpha
    d_al = model.alpha_grad_raw()
    k, lam, h = params.kappa, params.lam, params.h
    d_beta, d_beta_d1, d_beta_d2, d_gamma, d_gamma_d1 = model.curve_param_grads(t)

    delta, delta_dot, w = delta_w(model, params, t)
    c = k * (alpha - 1 - lam) - lam * (1 - k)

    d_u = d_gamma - k * d_beta_d1 - k * d_beta / t
    d_delta = t**2 * d_u + c * t * d_beta
    d_delta[0] += k * t * be.value * d_al
    d_udot = d_gamma_d1 - k * d_beta_d2 - k * d_beta_d1 / t + k * d_beta / t**2
    d_delta_dot = (2 * t * d_u + t**2 * d_udot + c * (d_beta + t * d_beta_d1))
    d_delta_dot[0] += k * (be.value + t * be.d1) * d_al
    d_w = d_gamma - d_beta_d1 - d_beta / t

    q = 0.0
    grad = np.zeros(model.n_theta)
    t1 = ge.value - be.d1 - be.value / h
    if t1 > 0:
        q += t1
        grad += d_gamma - d_beta_d1 - d_beta / h
    t2 = be.d1 + alpha * be.value / t - ge.value
    if t2 > 0:
        q += t2
        grad += d_beta_d1 + (alpha / t) * d_beta - d_gamma
        grad[0] += (be.value / t) * d_al
    t3 = delta_dot - lam * t * w
    if t3 > 0:
        q += t3
        grad += d_delta_dot - lam * t * d_w
    t4 = -delta
    if t4 > 0:
        q += t4
        grad -= d_delta
    return q, grad


def q_theta_grad_batch(model, params, ts):
    """(q values, dq/dtheta rows) over a time grid, vectorized."""
    ts = np.asarray(ts, dtype=float)
    col = ts[:, None]
    bv, b1, b2 = model.beta.eval_batch(ts)
    gv, g1, _ = model.gamma.eval_batch(ts)
    d_beta, d_beta_d1, d_beta_d2, d_gamma, d_gamma_d1 = \
        model.curve_param_grads_batch(ts)
    alpha = model.alpha
    d_al = model.alpha_grad_raw()
    k, lam, h = params.kappa, params.lam, params.h
    c = k * (alpha - 1 - lam) - lam * (1 - k)

    u = gv - k * b1 - k * bv / ts
    u_dot = g1 - k * b2 - k * b1 / ts + k * bv / ts**2
    delta = ts**2 * u + c * ts * bv
    delta_dot = 2 * ts * u + ts**2 * u_dot + c * (bv + ts * b1)
    w = gv - b1 - bv / ts

    d_u = d_gamma - k * d_beta_d1 - k * d_beta / col
    d_delta = col**2 * d_u + c * col * d_beta
    d_delta[:, 0] += k * ts * bv * d_al
    d_udot = d_gamma_d1 - k * d_beta_d2 - k * d_beta_d1 / col + k * d_beta / col**2
    d_delta_dot = 2 * col * d_u + col**2 * d_udot + c * (d_beta + col * d_beta_d1)
    d_delta_dot[:, 0] += k * (bv + ts * b1) * d_al
    d_w = d_gamma - d_beta_d1 - d_beta / col

    t1 = gv - b1 - bv / h
    t2 = b1 + alpha * bv / ts - gv
    t3 = delta_dot - lam * ts * w
    t4 = -delta
    q = (np.maximum(t1, 0) + np.maximum(t2, 0)
         + np.maximum(t3, 0) + np.maximum(t4, 0))

    g2_extra = np.zeros_like(d_beta)
    g2_extra[:, 0] = (bv / ts) * d_al
    rows = ((t1 > 0)[:, None] * (d_gamma - d_beta_d1 - d_beta / h)
            + (t2 > 0)[:, None] * (d_beta_d1 + (alpha / col) * d_beta - d_gamma
                                   + g2_extra)
            + (t3 > 0)[:, None] * (d_delta_dot - lam * col * d_w)
            - (t4 > 0)[:, None] * d_delta)
    return q, rows


def grad_Q(model, params, traj, dT_dtheta):
    """Integral of dq/dtheta plus the moving-endpoint term q(T) dT/dtheta."""
    ts = _backward_nodes(traj)
    q, rows = q_theta_grad_batch(model, params, ts)
    return _trapezoid_rows(ts, rows) + q[-1] * dT_dtheta


def p_theta_grad(model, t, seg, problem_alpha_grad=None):
    """(p(t), dp/dtheta, coefficient in front of dLambda/dx) at one time.

    seg is the averaged curvature estimate at the current point; the caller
    supplies the estimator-specific spatial gradient separately since only
    the scalar prefactor beta / (2 sqrt(seg)) is curve data.
    """
    be = model.beta.eval(t)
    ge = model.gamma.eval(t)
    alpha = model.alpha
    d_al = model.alpha_grad_raw()
    d_beta, d_beta_d1, _, d_gamma, _ = model.curve_param_grads(t)

    u1 = ge.value - be.d1
    u2 = u1 - alpha * be.value / t
    root_seg = np.sqrt(max(seg, 0.0))
    inner = be.value * root_seg
    grad = d_beta * root_seg
    grad_alpha_extra = 0.0
    if u1 > 0:
        inner -= np.sqrt(u1)
        grad -= (d_gamma - d_beta_d1) / (2 * np.sqrt(u1))
    if u2 > 0:
        inner -= np.sqrt(u2)
        grad -= (d_gamma - d_beta_d1 - (alpha / t) * d_beta) / (2 * np.sqrt(u2))
        grad_alpha_extra += (be.value / t) / (2 * np.sqrt(u2))
    if inner <= 0:
        return 0.0, np.zeros(model.n_theta), 0.0
    grad = grad.copy()
    grad[0] += grad_alpha_extra * d_al
    prefactor = be.value / (2 * root_seg) if seg > 0 else 0.0
    return float(inner), grad, prefactor


def grad_P(problem, model, traj, dT_dtheta, estimator):
    """Costate-with-source gradient of the accumulated curvature penalty.

    When the clamp is inactive along the whole trajectory the costate is
    identically zero and the gradient vanishes; the constant estimator
    additionally short-circuits the spatial source term.
    """
    ts, xs, vs = _node_states(traj)
    m = len(ts)
    n = problem.n

    seg_vals = np.empty(m)
    p_vals = np.empty(m)
    theta_rows = np.empty((m, model.n_theta))
    prefactors = np.empty(m)
    for i, t in enumerate(ts):
        seg_vals[i] = estimator.estimate(problem, xs[i])
        p_vals[i], theta_rows[i], prefactors[i] = p_theta_grad(model, t, seg_vals[i])

    out = _trapezoid_rows(ts, theta_rows) + p_vals[-1] * dT_dtheta
    if np.all(p_vals == 0.0):
        return out  # zero costate: inactive clamp everywhere
    if isinstance(estimator, ConstantEstimator):
        return out  # dLambda/dx = 0 for the constant estimator

    pref = {float(t): prefactors[i] for i, t in enumerate(ts)}

    def source(t, st):
        key = float(t)
        if key in pref:
            c = pref[key]
        else:
            be = model.beta.eval(t)
            seg = estimator.estimate(problem, st.x)
            ge = model.gamma.eval(t)
            u1 = ge.value - be.d1
            u2 = u1 - model.alpha * be.value / t
            inner = be.value * np.sqrt(max(seg, 0.0))
            if u1 > 0:
                inner -= np.sqrt(u1)
            if u2 > 0:
                inner -= np.sqrt(u2)
            c = be.value / (2 * np.sqrt(seg)) if (inner > 0 and seg > 0) else 0.0
        if c == 0.0:
            return np.zeros(2 * n)
        dp_dx = c * estimator.grad_x(problem, st.x)
        return np.concatenate([dp_dx, np.zeros(n)])

    _, omegas = solve_costate(traj, model, problem, np.zeros(2 * n), source=source)
    rows = _theta_rows(traj, model, problem, ts, xs, vs, omegas)
    return (out + _trapezoid_rows(ts, rows)
            + _initial_condition_term(traj, model, problem, omegas[0]))


@dataclass(frozen=True)
class PenaltyParts:
    T: float
    P: float
    Q: float
    rho: float

    @property
    def loss(self):
        return self.T + self.rho * (self.P + self.Q)


def penalty_gradient(problem, model, rho, config: IntegrateConfig):
    """Loss pieces (T, P, Q) and the assembled gradient dT + rho (dP + dQ).

    Raises StoppingNotReached when the trajectory never crosses the
    threshold; the trainer decides whether to skip or use a surrogate.
    """
    traj = integrate(problem, model, config)
    if not traj.crossed:
        raise StoppingNotReached(f"no crossing before t_max={config.t_max}")
    estimator = config.estimator or ConstantEstimator(problem.L)
    lam = config.lam if config.lam is not None else (model.alpha - 1) / 2
    params = ConditionParams(kappa=config.kappa, lam=lam, h=config.h_disc)
    T, dT = grad_stopping_time(problem, model, traj)
    g = dT.copy()
    if rho != 0.0:
        dP = grad_P(problem, model, traj, dT, estimator)
        dQ = grad_Q(model, params, traj, dT)
        g += rho * (dP + dQ)
    return PenaltyParts(T, traj.P_acc, traj.Q_acc, rho), g


def loss_parts(problem, model, rho, config: IntegrateConfig) -> PenaltyParts:
    """Forward-only loss evaluation (the finite-difference route)."""
    traj = integrate(problem, model, config)
    if not traj.crossed:
        raise StoppingNotReached(f"no crossing before t_max={config.t_max}")
    return PenaltyParts(traj.T, traj.P_acc, traj.Q_acc, rho)


def surrogate_gradient(problem, model, config: IntegrateConfig):
    """Optional fallback when T is infinite: t_max plus d log||grad f(x(t_max))||.

    Off by default in training; the terminal costate is H grad f / ||grad f||^2
    so the integral equals the parameter gradient of log grad-norm at t_max.
    """
    traj = integrate(problem, model, config)
    if traj.crossed:
        raise NumericsError("surrogate gradient called on a crossing trajectory")
    x_e, v_e = traj.xs[-1], traj.vs[-1]
    g_e = problem.gradient(x_e)
    sq = float(g_e @ g_e)
    if sq == 0.0:
        raise NumericsError("zero gradient at t_max; surrogate undefined")
    pseudo = type(traj)(traj.ts, traj.xs, traj.vs, traj.dxs, traj.dvs,
                        traj.grad_norms, traj.f_vals, traj.p_vals, traj.q_vals,
                        traj.P_acc, traj.Q_acc, traj.ts[-1], x_e, v_e, traj.meta)
    terminal = np.concatenate([problem.hvp(x_e, g_e) / sq, np.zeros(problem.n)])
    ts, costates = solve_costate(pseudo, model, problem, terminal)
    _, xs, vs = _node_states(pseudo)
    rows = _theta_rows(pseudo, model, problem, ts, xs, vs, costates)
    value = config.t_max + float(np.log(np.sqrt(sq)))
    grad = (_trapezoid_rows(ts, rows)
            + _initial_condition_term(pseudo, model, problem, costates[0]))
    return value, grad


def finite_diff_loss_grad(problem, model, rho, config, delta=1e-4, indices=None):
    """Central differences of the scalar loss, re-solving per perturbation."""
    theta0 = model.get_theta()
    idx = range(model.n_theta) if indices is None else indices
    grad = np.zeros(model.n_theta)
    work = model.copy()
    for j in idx:
        for sign in (+1.0, -1.0):
            theta = theta0.copy()
            theta[j] += sign * delta
            work.set_theta(theta)
            parts = loss_parts(problem, work, rho, config)
            grad[j] += sign * parts.loss / (2 * delta)
    return grad


def gradcheck_rows(problem, model, rho, config, delta=1e-4, indices=None,
                   flip_sign=False):
    """Per-component (analytic, numeric, rel_err) table for the full loss."""
    _, analytic = penalty_gradient(problem, model, rho, config)
    if flip_sign:
        analytic = -analytic
    numeric = finite_diff_loss_grad(problem, model, rho, config, delta=delta,
                                    indices=indices)
    idx = range(model.n_theta) if indices is None else indices
    scale = max(np.max(np.abs(numeric)), 1e-12)
    rows = []
    for j in idx:
        denom = max(abs(numeric[j]), 1e-8 * scale)
        rows.append((j, analytic[j], numeric[j], abs(analytic[j] - numeric[j]) / denom))
    return rows
