"""
Denoising and inpainting with a learned image prior
===================================================

Loads a trained model (``runs/desk/model.json`` by default, or the path
given as the first argument) and restores one held-out image, writing the
observations and results as PGM files under ``runs/demo``.  Train a model
first with::

    gncprior train --corpus data/train --out runs/desk
"""

import sys
from pathlib import Path

from gncprior.foe import load_model
from gncprior.io import load_pgm, save_pgm
from gncprior.solvers import (denoising_task, inpainting_task, joint_minimize, linear_schedule, psnr,
                              scheduled_solve)
from gncprior.training import make_rng

model = load_model(sys.argv[1] if len(sys.argv) > 1 else "runs/desk/model.json")
clean = load_pgm(sorted(Path("data/test").glob("*.pgm"))[0])
out = Path("runs/demo")
out.mkdir(parents=True, exist_ok=True)

lo, hi = model.t_range
schedule = linear_schedule(hi, lo, 30)  # 30 steps from t = 1 to t = 1e-4
rng = make_rng(0)

for name, fid in (("denoise", denoising_task(clean, 0.1, rng)),
                  ("inpaint", inpainting_task(clean, 0.8, rng))):
    x = scheduled_solve(model, fid, fid.z, schedule)
    # the joint scheme also adapts t_hat from the prior's own slope
    xj, trace = joint_minimize(model, fid, fid.z, iters=30)
    print(f"{name}: observed {psnr(fid.z, clean):.2f} dB, scheduled {psnr(x, clean):.2f} dB, "
          f"joint {psnr(xj, clean):.2f} dB (final t_hat {trace[-1][1]:.2f})")
    save_pgm(fid.z, out / f"{name}_observed.pgm")
    save_pgm(x, out / f"{name}_restored.pgm")
