"""Gauss-Newton data assimilation over a full window, with Lorenz twin experiments."""

from .blocklinalg import (BlockBidiagonal, BlockTridiagonal, IllPosed, NormEstimate,
                          assemble_normal, jacobian, opnorm_inverse, opnorm_matrix,
                          opnorm_solve_Jt, residual, solve_normal)
from .gauss_newton import (GNConfig, GNRunRecord, IterationRecord, NoAlphaFound, Termination,
                           error_metrics, find_alpha_noisefree, find_alpha_noisy, gn_step, run,
                           theoretical_bound)
from .models import ModelDivergence, ModelKind, ModelSpec, linear_test, lorenz63, lorenz96
from .params import ParamConfig, ParamRunRecord, param_update, run_joint, state_update
from .wc4dvar import LMConfig, WCConfig, lm_minimize, wc_residual
from .window import (ObservationOperator, ObservationSet, SeededRng, generate_truth,
                     initial_guess, make_background, observe)

__version__ = "0.1.0"
