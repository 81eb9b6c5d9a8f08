"""Warped functional ANOVA: one-way random-effects curves with time warping."""

from .basis import SplineBasis, eval_basis, gram_matrix, gram_orthonormalize, make_basis
from .estimation import (FitConfig, FitResult, PosteriorSummaries, e_step, fit_common_anova,
                         fit_two_step, fit_warped_anova, initialize_params, m_step,
                         register_least_squares)
from .inference import (anova_f_test, avar_h, bootstrap_ratios, ci_arcsin, fisher_F, fisher_G,
                        score_components, variance_ratio_amplitude, variance_ratio_report,
                        variance_ratio_warping)
from .kernels import BACKEND
from .model import (AmplitudeScores, ComputationError, ModelParams, ObservationSet, WarpEffects,
                    amplitude_conditional_moments, group_loglik_given_warps, simulate_from_model)
from .simulation import (error_metrics, generate_replication, make_sim_model, normal_density,
                         run_benchmark)
from .warp import (KnotVector, WarpFunction, fc_slopes, jupp_forward, jupp_inverse, make_warp,
                   warp_eval, warp_invert, warped_basis_matrix)

__version__ = "0.1.0"
