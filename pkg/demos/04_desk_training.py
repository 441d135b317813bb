"""Desk-scale end-to-end training
=================================

Trains the full network on a six-case single-sphere phantom task
(32^3 volumes) and evaluates with overlap and surface metrics.  Runs in
about a minute on a laptop CPU and reaches ~95% Dice.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from autoseg3d.decoder import predict_labels
from autoseg3d.encoder import EncoderConfig
from autoseg3d.inference import SlidingWindowConfig, sliding_window_infer
from autoseg3d.metrics import dice_score, nsd_score
from autoseg3d.model import build_model
from autoseg3d.phantoms import (
    PhantomSpec,
    generate_phantom_dataset,
    generate_surrogate_2d_checkpoint,
)
from autoseg3d.preprocessing import PRESETS, preprocess
from autoseg3d.sampling import PatchSpec
from autoseg3d.training import LossConfig, OptimConfig, fit, set_deterministic

t0 = time.time()
set_deterministic(42)

spec = PhantomSpec(grid_shape=(32, 32, 32), num_organs=1, noise_sigma=15.0,
                   radius_range=(5, 9), seed=100)
cases = [preprocess(v, l, PRESETS["btcv"]) for v, l in generate_phantom_dataset(spec, 6)]
train_cases, val_cases = cases[:4], cases[4:]

enc_cfg = EncoderConfig()
model = build_model(enc_cfg, archive=generate_surrogate_2d_checkpoint(enc_cfg, 42))

optim = OptimConfig(base_lr=2e-3, epochs=25, warmup_epochs=2, batch_size=1,
                    patch_size=(32, 32, 32), validate_every=5)
out_dir = Path(tempfile.mkdtemp(prefix="desk_run_"))
result = fit(model, train_cases, val_cases, optim, LossConfig(),
             PatchSpec(patch_size=(32, 32, 32), pos_neg_ratio=(1, 1), count=4),
             out_dir, seed=42, sw_cfg=SlidingWindowConfig(patch_size=(32, 32, 32)))

print(f"validation dice per evaluation: {[round(s, 3) for s in result.val_scores]}")
print(f"checkpoints in {out_dir}")

sw = SlidingWindowConfig(patch_size=(32, 32, 32), overlap_ratio=0.75)
dices, surface = [], []
for vol, lab in val_cases:
    logits = sliding_window_infer(vol, model, sw)
    pred = predict_labels(logits, 1, vol.spacing_mm)
    dices.append(dice_score(pred, lab, 1))
    surface.append(nsd_score(pred, lab, 1, tolerance_mm=1.0))
print(f"held-out dice: {np.mean(dices):.2f}%   "
      f"surface overlap @1mm: {np.mean(surface):.2f}%")
print(f"total time: {time.time() - t0:.0f}s")
