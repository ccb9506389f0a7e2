"""Stochastic penalty training of the coefficient model.

Each step samples a fresh finite-sum problem from the training split,
differentiates T + rho (P + Q) through the trajectory, and applies one
heavy-ball SGD update.  Sampling, skipping, and the momentum buffer are all
captured by checkpoints so an interrupted run resumes bit-for-bit.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .adjoint import penalty_gradient
from .coeffs import model_from_dict, model_to_dict
from .datasets import sample_problem
from .dynamics import IntegrateConfig
from .errors import DataError, NumericsError, StoppingNotReached


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    rho: float = 0.1
    epochs: int = 60
    steps_per_epoch: int = 10
    n_sp: int = 1024
    seed: int = 0
    kind: str = "logistic"
    lpp_p: int = 4
    eps: float = 3e-4
    h: float = 0.04
    t0: float = 1.0
    h_int: float = 0.01
    t_max: float = 81.0
    kappa: float = 0.5

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.rho < 0:
            raise DataError("need lr >= 0, momentum in [0, 1), rho >= 0")


@dataclass
class TrainState:
    theta: np.ndarray
    buffer: np.ndarray
    epoch: int = 0
    step: int = 0
    skipped: int = 0
    rng_state: dict = None
    history: list = field(default_factory=list)  # rows (epoch, step, T, P, Q, loss, |g|)
    epoch_means: list = field(default_factory=list)  # rows (epoch, mean T, mean P+Q)


def sgd_momentum_step(theta, g, lr, momentum, buffer):
    """Heavy-ball update: buffer <- momentum*buffer + g; theta <- theta - lr*buffer."""
    buffer = momentum * buffer + g
    return theta - lr * buffer, buffer


def _integrate_config(cfg: TrainConfig, model) -> IntegrateConfig:
    return IntegrateConfig(t0=cfg.t0, h_int=cfg.h_int, t_max=cfg.t_max,
                           eps=cfg.eps, kappa=cfg.kappa,
                           lam=(model.alpha - 1) / 2, h_disc=cfg.h)


def stopm(dataset, model0, cfg: TrainConfig, log_fn=None, state=None,
          estimator_factory=None):
    """Train by sampled penalty-gradient steps; returns (model, TrainState).

    Aborts after three consecutive non-crossing samples, which signals that
    the current coefficients have left the region where trajectories reach
    the threshold at all.
    """
    model = model0.copy()
    if state is None:
        rng = np.random.default_rng(cfg.seed)
        state = TrainState(model.get_theta(), np.zeros(model.n_theta))
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        model.set_theta(state.theta)
    theta, buffer = state.theta.copy(), state.buffer.copy()
    consecutive_misses = 0

    for epoch in range(state.epoch, cfg.epochs):
        epoch_T, epoch_PQ = [], []
        start = state.step if epoch == state.epoch else 0
        for step in range(start, cfg.steps_per_epoch):
            seed = int(rng.integers(2**63))
            problem, _ = sample_problem(dataset, cfg.n_sp, cfg.kind, seed,
                                        p=cfg.lpp_p)
            icfg = _integrate_config(cfg, model)
            if estimator_factory is not None:
                icfg.estimator = estimator_factory(problem)
            try:
                parts, g = penalty_gradient(problem, model, cfg.rho, icfg)
            except StoppingNotReached:
                consecutive_misses += 1
                state.skipped += 1
                if consecutive_misses >= 3:
                    raise NumericsError(
                        "three consecutive samples never crossed the threshold; "
                        "the model has left the stable region") from None
                continue
            consecutive_misses = 0
            if not np.all(np.isfinite(g)):
                state.skipped += 1
                continue
            theta, buffer = sgd_momentum_step(theta, g, cfg.lr, cfg.momentum, buffer)
            model.set_theta(theta)
            row = (epoch, step, parts.T, parts.P, parts.Q, parts.loss,
                   float(np.linalg.norm(g)))
            state.history.append(row)
            epoch_T.append(parts.T)
            epoch_PQ.append(parts.P + parts.Q)
            if log_fn is not None:
                log_fn(row)
        if epoch_T:
            state.epoch_means.append((epoch, float(np.mean(epoch_T)),
                                      float(np.mean(epoch_PQ))))
        state.epoch, state.step = epoch + 1, 0

    state.theta = theta
    state.buffer = buffer
    state.rng_state = rng.bit_generator.state
    return model, state


CHECKPOINT_VERSION = 1


def _encode(a):
    a = np.ascontiguousarray(a, dtype=float)
    return base64.b64encode(a.tobytes()).decode()


def _decode(s, n):
    return np.frombuffer(base64.b64decode(s), dtype=float)[:n].copy()


def save_checkpoint(model, state: TrainState, path):
    payload = {"version": CHECKPOINT_VERSION,
               "model": model_to_dict(model),
               "theta": _encode(state.theta),
               "buffer": _encode(state.buffer),
               "n_theta": len(state.theta),
               "epoch": state.epoch,
               "step": state.step,
               "skipped": state.skipped,
               "rng_state": json.loads(json.dumps(state.rng_state)),
               "history": [list(r) for r in state.history],
               "epoch_means": [list(r) for r in state.epoch_means]}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path):
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version mismatch: {payload.get('version')}")
    model = model_from_dict(payload["model"])
    n = payload["n_theta"]
    state = TrainState(_decode(payload["theta"], n), _decode(payload["buffer"], n),
                       payload["epoch"], payload["step"], payload["skipped"],
                       payload["rng_state"],
                       [tuple(r) for r in payload["history"]],
                       [tuple(r) for r in payload["epoch_means"]])
    return model, state
