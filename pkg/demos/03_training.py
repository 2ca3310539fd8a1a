"""
Training the student with finite differences
============================================

A short run on a handful of strips. The batched RDA output is the target,
the range-compressed raster the input. Gradients come from central
differences over every parameter, and the step is Adam with a cosine schedule.
"""
from dataclasses import replace

import numpy as np

from onlinesar import rda, simgen, train
from onlinesar.loss import LossWeights
from onlinesar.simgen import SceneSpec
from onlinesar.ssm import TinyModel

spec = SceneSpec(n_pulses=128, n_range_bins=128, clutter_mean_power=1e-2, seed=1)
spec = replace(spec, targets=simgen.random_targets(spec, 6, 1))
raw = simgen.synth_raw(spec)
f = rda.batched_filters_for(raw)
rc, az = rda.range_compress(raw, f.h_r).data, rda.focus_batched(raw, f).data

cfg = train.TrainConfig(lr=1e-2, max_epochs=10, strip_len=64, batch_strips=4, grad_accum=1)
data = train.strip_dataset(rc[:, 40:44], az[:, 40:44], cfg).subset(np.arange(4))
print(len(data), "strips of", data.strip_len, "pulses")

# central vs fourth-order differences on a few coordinates
for row in train.gradcheck(TinyModel.init(), data, coords=[0, 50, 300]):
    print(f"  {row['param']:>12}  central {row['central']:+.5f}  4th-order {row['fourth_order']:+.5f}")

w = LossWeights.student()
res = train.train_student(TinyModel.init(), data, cfg, w=w)
for h in res.history:
    print(f"epoch {h['epoch']:2d}  lr {h['lr']:.2e}  loss {h['train_loss']:.4f}")
