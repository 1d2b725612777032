# %% [markdown]
# # Optimizing a time-multiplexed hologram batch
#
# Targets come from the renderer; the optimizer fits three phase frames so
# that their averaged intensity, seen through many pupils, matches them.

# %%
import sys
from pathlib import Path

import numpy as np

from ergoholo import fileio
from ergoholo.evalsuite import simulate_reconstruction, stack_psnr
from ergoholo.incoherent_render import occlusion_tolerance, render_focal_stack
from ergoholo.optimizer import OptimizerConfig, optimize
from ergoholo.scenes import desk_planes, desk_scene
from ergoholo.wave_optics import PupilSpec

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

# %%
ldi = desk_scene((64, 64), channels=1)
planes = desk_planes()
targets = render_focal_stack(ldi, planes, (520e-9,), eps=occlusion_tolerance(ldi.volume_depth, len(planes)))

# %%
cfg = OptimizerConfig(frames=3, n_fixed=4, n_random=5, iterations=80, seed=1)
batch, (history,) = optimize(cfg, targets)
print(f"loss {history.loss[0]:.4f} -> {history.best_loss[-1]:.4f}")

# %% [markdown]
# PSNR through the central pupil, per plane, on amplitude images.

# %%
recon = simulate_reconstruction(batch, PupilSpec(0, 0, 2e-3), targets.plane_depths, cfg)
print("PSNR (dB):", np.round(stack_psnr(recon, np.sqrt(targets.planes)), 2))

# %%
fileio.save_batch(batch, out / "batch", cfg.to_dict())
fileio.write_loss_csv(history, out / "batch" / "loss_c0.csv")
fileio.save_focal_stack(targets, out / "targets")
print("wrote", out / "batch")
