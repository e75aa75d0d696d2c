"""Dual-blind deconvolution on a two-subsystem linear state-space model.

Simulates overlaid radar and communications subsystems whose sparse
channel sequences drive companion-form state equations through unknown
per-pulse input vectors, and recovers channels, inputs and state matrices
with EM on top of a forward filter / Bryson-Frazier smoother.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateModelError, DualBlindError,
                     IllConditionedMStepError, InvalidConfigError, OversizeOracleError)
from .model import (ChannelPair, ModelParams, PriorVariances, Trajectory, generate_scene,
                    log_marginal_likelihood, make_companion, simulate)
from .smoother import PosteriorMoments, dense_oracle, smooth
from .em import (EmConfig, EmReport, accumulate_mstep_matrices, em_fit, initialize,
                 solve_companion, update_inputs, update_sigma2_z, update_variances)
from .evaluate import (RecoveryMetrics, SweepResult, align_scale, run_fig2, run_fig3,
                       run_fig4, score)
