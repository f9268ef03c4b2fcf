"""Asymptotic-preserving integrators for stiff underdamped SDE systems.

The package simulates

    dq = p/eps dt
    dp = -p/eps^2 dt + f(q)/eps dt + sigma(q)/eps dbeta(t)

uniformly in the time-scale separation parameter eps, including the
overdamped limit dq = f dt + sigma dbeta, and ships a Monte Carlo harness
that measures the schemes' strong and weak convergence rates.
"""

from .errors import ConfigError, IntegrationError, UsageError
from .harness import (ErrorRecord, InequalityReport, RateFit, ap_deviation,
                      check_scalar_inequalities, fit_rate, moment_sweep,
                      residual_R, residual_bound, sk_limit_error, strong_error,
                      strong_rate_study, weak_error, weak_rate_study,
                      write_error_csv, write_rates_csv)
from .models import (BUILTIN_MODELS, InitialCondition, ModelSpec, eval_a,
                     eval_diffusion, eval_drift, make_model)
from .noise import (IncrementPair, NoisePath, coarsen_path, generate_path,
                    increment_covariance, load_path, sample_pair, save_path,
                    stream_generator, stream_seed)
from .observables import TEST_FUNCTIONS, get_test_function
from .schemes import (SCHEME_IDS, PhaseState, QPState, SimConfig, Trajectory,
                      exact_constant_solution, integrate, reference_solution,
                      step_euler_maruyama, step_exponential,
                      step_exponential_qp, step_semi_implicit,
                      step_semi_implicit_qp)

__version__ = "0.1.0"
