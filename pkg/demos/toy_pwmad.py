"""
Training a small pixel-wise detector
====================================

A reduced PW-MAD network learns to separate smooth images from the same
images carrying a faint checkerboard. The detector predicts a per-cell
attack map plus one image-level score; both are supervised.
"""

# %%
import torch

from morphmad import metrics, pwmad
from morphmad.synthetic import make_artifact_set
from morphmad.trainkit import ImageSplit, TrainConfig, evaluate, train

torch.manual_seed(0)
cfg = pwmad.PwMadConfig(input_size=32, block_config=(2, 2), growth_rate=8, num_init_features=16, bn_size=2)
print("pixel map size:", cfg.map_size)

images, labels = make_artifact_set(32, seed=1)
dev_images, dev_labels = make_artifact_set(16, seed=2)
train_split = ImageSplit(pwmad.preprocess(images, cfg), labels, "train")
dev_split = ImageSplit(pwmad.preprocess(dev_images, cfg), dev_labels, "dev")

# %%
model = pwmad.build_model(cfg, seed=0)
state, log = train(model, train_split, dev_split, TrainConfig(batch_size=4, max_epochs=60, patience=15))
model.load_state_dict(state)
print(f"{len(log.epochs)} epochs, best dev loss {log.epochs[log.best_epoch].dev_loss:.4f} at epoch {log.best_epoch}")
print(evaluate(model, dev_split))

# %%
s = pwmad.score(model, dev_split.images)
table = metrics.ScoreTable.from_arrays(s[dev_labels == 1], s[dev_labels == 0])
print("dev BPCER @ APCER=10%:", metrics.bpcer_at_apcer(table, 0.1).bpcer)
