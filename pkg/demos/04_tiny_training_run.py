"""
A complete training run at toy scale
====================================

Generates a miniature synthetic dataset, trains a shallow model for a
few epochs, and inspects the run directory. The point is the plumbing,
not the accuracy; real runs use deeper models, more terrains, and
thousands of epochs.
"""
import tempfile
from pathlib import Path

import torch

from windseer.net import ModelSpec, load_model
from windseer.synthflow import generate_dataset, read_manifest
from windseer.train import TrainConfig, train_loop

torch.set_num_threads(1)

with tempfile.TemporaryDirectory() as td:
    root = Path(td)

    # 6 terrains at 16^3, split 4 train / 2 test. Each terrain gets two
    # wind cases plus one calm case, all solved analytically. The coarse
    # grid warnings are the guardrail for hills under 3 cells across.
    manifest = generate_dataset(root / "data", n_terrains=6,
                                dims=(16, 16, 16), split=(4, 0, 2), seed=3)
    print("dataset rows:", len(read_manifest(manifest)))

    spec = ModelSpec(depth=2, base_width=4, seed=0)
    cfg = TrainConfig(epochs=5, batch_size=4, lr0=3e-4,
                      out_dims=(16, 16, 16), rotate=False, seed=0)
    result = train_loop(manifest, spec, cfg, root / "run",
                        log=lambda msg: print("  " + msg))

    # metrics.tsv has one line per epoch: epoch, lr, train loss, val loss.
    print("\nmetrics.tsv:")
    print((root / "run" / "metrics.tsv").read_text().rstrip())

    # best.wsnn tracks the lowest validation loss (falling back to the
    # final epoch when there is no validation split, as here).
    model, ckpt = load_model(result.best_path)
    print(f"\nbest checkpoint: epoch {ckpt.epoch}, "
          f"{sum(p.numel() for p in model.parameters()):,} parameters")
