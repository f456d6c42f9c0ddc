"""
Gradient diagnostics
====================

Two probes run after every training epoch without touching the model or
the optimizer: per-token gradient norms of the loss with respect to each
layer's input, and nuclear norms of the gradients of the low-rank
projection factors on easy and hard validation examples.
"""

import collections

import numpy as np

from latentvr import curriculum, data, diagnostics
from latentvr.backbone import Backbone
from latentvr.config import ModelConfig

examples = data.generate_dataset(seed=1, n=8, grid=4, image_side=16)
cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, grid=4, image_side=16, rank=4,
                  latent_steps=2, replay_k=4, window=2, alpha=8, max_len=160)
model = Backbone(cfg, seed=0)

###############################################################################
# Token-wise gradient norms, grouped by segment
# ---------------------------------------------


def run_fn(batch):
    parts = curriculum.batch_loss(model, batch, 2)
    return parts.total, parts.output, parts.embeds, parts.tags


recs = diagnostics.token_probe(model, run_fn, examples[0], epoch=0)
by_seg = collections.defaultdict(list)
for r in recs:
    if r.layer == -1:
        by_seg[r.segment].append(r.fro_norm)
for seg, vals in by_seg.items():
    print(f"{seg:15s} mean |dL/dx| = {np.mean(vals):.2e} over {len(vals)} tokens")

###############################################################################
# Nuclear norms of factor gradients
# ---------------------------------
# W_B starts at zero, so on a fresh model W_A gets no gradient at all.
split = {e.id: ("easy" if i < 4 else "hard") for i, e in enumerate(examples)}
by_id = {e.id: e for e in examples}
for r in diagnostics.track_splits(model, lambda b: run_fn(b)[0], split, by_id, 0,
                                  probe_size=4)[:8]:
    print(r.split, "layer", r.layer, r.proj, r.factor, f"{r.nuc_norm:.3e}")

###############################################################################
# The singular values behind those norms come from a one-sided Jacobi sweep
m = np.random.default_rng(0).normal(size=(6, 4))
print(diagnostics.jacobi_singular_values(m))
print(np.linalg.svd(m, compute_uv=False))
