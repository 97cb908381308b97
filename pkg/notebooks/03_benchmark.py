# %% [markdown]
# # Style vs no-style on the desk benchmark
#
# Both arms use dihedral augmentation and the same splits and initial weights
# per seed; only style augmentation differs. Run the comparison first:
#
#     styleaug compare --out runs
#
# which takes around a quarter of an hour on one core.

# %%
import json
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from styleaug.trainer import read_history

run = Path("runs/texture-shift")
report = json.loads((run / "report.json").read_text())
print((run / "table.txt").read_text())

# %%
for r in report["runs"]:
    print(r["seed"], r["arm"], round(r["metrics"]["mean_iou"], 4), r["curve"]["min_val_loss_epoch"],
          round(r["curve"]["final_over_min"], 3))

# %% [markdown]
# Loss curves for every seed. Over-fitting shows as a validation loss that
# bottoms out early and climbs while training loss keeps falling.

# %%
seeds = report["config"]["seeds"]
fig, axes = plt.subplots(len(seeds), 2, figsize=(10, 3 * len(seeds)), squeeze=False)
for i, seed in enumerate(seeds):
    for j, arm in enumerate(("no-style", "style")):
        h = read_history(run / str(seed) / arm / "history.csv")
        ep = [r.epoch for r in h]
        axes[i, j].plot(ep, [r.train_loss for r in h], label="train")
        axes[i, j].plot(ep, [r.val_loss for r in h], label="val")
        axes[i, j].set_title(f"seed {seed}, {arm}")
axes[0, 0].legend()
plt.tight_layout()

# %% [markdown]
# Predicted masks on a few shifted-texture test images, one MC-dropout instance.

# %%
from styleaug.experiment import benchmark_config, resolve_data
from styleaug.evaluate import mc_dropout_evaluate
from styleaug.segnet import load_checkpoint

_, test = resolve_data(benchmark_config())
seed = report["medians"]["style"]["median_seed"]
fig, axes = plt.subplots(4, 4, figsize=(10, 10))
for k in range(4):
    axes[0, k].imshow(test[k].image)
    axes[1, k].imshow(test[k].mask, cmap="gray")
for row, arm in ((2, "no-style"), (3, "style")):
    model, _ = load_checkpoint(run / str(seed) / arm / "best.ckpt")
    _, preds = mc_dropout_evaluate(model, test, n_instances=1, keep_predictions=True)
    for k in range(4):
        axes[row, k].imshow(preds[0][k], cmap="gray")
for ax in axes.flat:
    ax.axis("off")
np.round([report["medians"][a]["iou"] for a in ("no-style", "style")], 4)
