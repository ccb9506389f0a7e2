"""ODE-derived first-order optimizers with stability diagnostics and
stopping-time training."""

from .coeffs import (AnalyticCurve, CoefficientModel, MLPCurve, default_model,
                     init_learnable, load_model, safeguard_model, save_model)
from .conditions import (ConditionParams, contraction_factor, delta_w,
                         growth_constants, lyapunov_energy, p_value,
                         propagation_matrix, q_value, strong_root_check)
from .datasets import (Dataset, DatasetRaw, gen_separable, load_cache,
                       normalize_columns, parse_libsvm, sample_problem,
                       save_cache)
from .dynamics import (IntegrateConfig, SystemState, Trajectory, initial_state,
                       integrate, stopping_time, vector_field)
from .adjoint import (grad_P, grad_Q, grad_stopping_time, penalty_gradient,
                      psi_jacobian_apply, psi_theta_apply)
from .errors import DataError, NumericsError, ParseError, StoppingNotReached
from .objectives import (ConstantEstimator, L0L1Estimator, PowerEstimator,
                         ProblemSpec, fit_l0l1, lambda_max, lipschitz_bound,
                         make_problem)
from .solvers import (RunRecord, SolverConfig, eigac_run, gd_run, igahd_run,
                      nag_run, reference_solution)
from .train import TrainConfig, TrainState, sgd_momentum_step, stopm

__version__ = "0.1.0"
