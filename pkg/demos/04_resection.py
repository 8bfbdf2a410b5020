"""
Single-frame resection with moved objects
=========================================

A camera pose is recovered from 2D-3D matches alone. One match in ten
points at a car that has moved since the map was made. Dropping matches
whose labels say "dynamic" before solving keeps those out.
"""

from importlib.resources import files

import numpy as np

from semgate import eval as ev

config, _, _ = ev.load_experiment(files("semgate") / "configs" / "desk_urban.cfg")
study = ev.resection_study(config, seed=1)

s = study.summary()
print(f"{len(study.frames)} frames, {study.outliers.sum()} stale matches, "
      f"{study.outliers_kept.sum()} survived the filter")
print(f"filtered    mean {s['filtered_mean']:.3f} m  std {s['filtered_std']:.3f} m")
print(f"unfiltered  mean {s['unfiltered_mean']:.3f} m  std {s['unfiltered_std']:.3f} m")

# %%
# Worst frames without the filter
worst = np.argsort(study.errors_unfiltered)[::-1][:5]
for i in worst:
    print(f"frame {study.frames[i]:4d}: {study.errors_unfiltered[i]:.2f} m unfiltered, "
          f"{study.errors_filtered[i]:.3f} m filtered")
