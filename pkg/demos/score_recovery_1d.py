"""
Recovering a smoothed score with a single spline activation
===========================================================

In 1D the prior is one 2D spline ``phi(x, t_hat)``.  Its training loss is
quadratic in the spline weights, so the fit is a sparse least-squares
solve.  The learned ``d phi / dx`` is compared with the exact score of the
smoothed mixture.
"""

from gncprior.gmm import GaussianMixture, five_mode_mixture
from gncprior.training import ScoreRecoveryConfig, loss_equivalence_check, train_1d_score_recovery

cfg = ScoreRecoveryConfig()  # 10^6 samples; fewer leave the small-t fit noisy
for name, gmm in (("five-mode mixture", five_mode_mixture()),
                  ("Gaussian N(0, 0.25)", GaussianMixture.isotropic_1d([1.0], [0.0], [0.25]))):
    _, rep = train_1d_score_recovery(gmm, cfg)
    errs = ", ".join(f"t={t:g}: {rep[t]:.3f}" for t in cfg.eval_t)
    print(f"{name}: relative L2 score error {errs}")

# denoising and explicit score matching differ by a constant: the gap
# barely moves between random parameter settings
eq = loss_equivalence_check(five_mode_mixture(), n_samples=100_000)
print("mean DSM - ESM gap per setting:", [round(g, 4) for g in eq.gaps])
print("constant within 3 standard errors:", eq.passed)
