"""Graduated non-convexity with smoothing-conditioned energies.

Exact Gaussian-mixture energies and their convexity thresholds, the GNC
flow, spline-activation Fields-of-Experts priors trained by joint score
matching, and proximal solvers for denoising and inpainting.
"""

from .gmm import (GaussianMixture, NotConvexError, convexity_report, convexity_threshold_bound,
                  energy_batch, five_mode_mixture, numeric_convexity_threshold, smoothed_energy)
from .gnc import (FlowDivergence, GMMFamily, Schedule, attainment_rate, equally_spaced_starts,
                  gnc_flow_step, log_schedule, rate_grid, run_gnc_flow)
from .spline import SplineActivation2D, SplineGrid, quartic_kernel, spline_eval
from .foe import (FoEModel, batch_loss, export_params, foe_energy, foe_grad_x,
                  foe_t_derivatives, load_model, loss_backprop, save_model)
from .training import (AdaBeliefState, PatchCorpus, ScoreRecoveryConfig, TrainConfig,
                       TrainingDiverged, adabelief_step, batch_loss_and_grad, cosine_lr,
                       loss_equivalence_check, sample_training_point, train,
                       train_1d_score_recovery)
from .solvers import (FidelityTerm, SolverDiverged, VNParams, joint_minimize, linear_schedule,
                      prox_fidelity, psnr, scheduled_solve, vn_forward, vn_train)
from .io import emit_csv, load_pgm, save_pgm

__version__ = "0.1.0"
