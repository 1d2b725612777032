# %% [markdown]
# # How image quality varies across the eye box
#
# Two batches share scene, seed and budget. One is supervised through a
# single centered pupil, the other through a grid of fixed pupils plus
# random ones. A 3x3 lattice of 2 mm pupils shows where each holds up.

# %%
import numpy as np

from ergoholo.evalsuite import eyebox_sweep
from ergoholo.incoherent_render import occlusion_tolerance, render_focal_stack
from ergoholo.optimizer import OptimizerConfig, optimize
from ergoholo.scenes import desk_planes, desk_scene

ldi = desk_scene((48, 48), channels=1)
planes = desk_planes()
targets = render_focal_stack(ldi, planes, (520e-9,), eps=occlusion_tolerance(ldi.volume_depth, len(planes)))

# %%
runs = {}
for name, extra in (("center only", {"center_pupil_only": True}), ("multi pupil", {})):
    cfg = OptimizerConfig(frames=3, n_fixed=4, n_random=5, iterations=60, seed=2, **extra)
    batch, _ = optimize(cfg, targets)
    runs[name] = eyebox_sweep(batch, targets, 3, 2e-3, cfg)

# %%
for name, rep in runs.items():
    grid = np.array([np.mean(row) for row in rep.pupil_psnr]).reshape(3, 3)
    print(name)
    print(np.round(grid, 2))
    print("min / mean / max:", round(rep.summary["min"], 2), round(rep.summary["mean"], 2),
          round(rep.summary["max"], 2))
