"""
The encoder-decoder network in five minutes
===========================================

Shapes, receptive field, a forward pass, and the checkpoint format.
"""
import tempfile
from pathlib import Path

import torch

from windseer.net import (ModelSpec, build_model, load_model, receptive_field,
                          save_checkpoint)

torch.set_num_threads(1)

# Architecture is fully determined by a small spec dataclass.
spec = ModelSpec(depth=4, base_width=8, seed=0)
model = build_model(spec)
n_params = sum(p.numel() for p in model.parameters())
print(f"depth {spec.depth}, base width {spec.base_width}: "
      f"{n_params:,} parameters")

# The receptive field grows with depth; at depth 4 one output voxel sees
# a 175-cell cube of input, which is why train-time windows stay large.
for d in (2, 3, 4, 5, 6):
    print(f"  depth {d}: receptive field {receptive_field(ModelSpec(depth=d))}")

# Forward pass on a toy batch. Input layout is [B, C, nz, ny, nx] with
# channels (dist, mask, ux, uy) as produced by the input composer, and
# the output carries one channel per predicted quantity.
x = torch.randn(2, spec.in_channels, 32, 32, 32)
with torch.no_grad():
    y = model(x)
print("input", tuple(x.shape), "->", "output", tuple(y.shape))

# Checkpoints are a single self-describing binary file: the spec rides
# along, so loading never needs the original construction arguments.
with tempfile.TemporaryDirectory() as td:
    path = Path(td) / "model.wsnn"
    save_checkpoint(path, model, epoch=0)
    model2, ckpt = load_model(path)
    with torch.no_grad():
        same = torch.equal(model(x), model2(x))
    print(f"checkpoint {path.stat().st_size:,} bytes, "
          f"restored spec matches: {ckpt.spec == spec}, outputs equal: {same}")
