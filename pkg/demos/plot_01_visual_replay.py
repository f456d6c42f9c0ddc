"""
Visual replay, one step at a time
=================================

Build one synthetic example, push it through an untrained model and look at
what a single implicit reasoning step does to the context: which visual
tokens get replayed, where the densest window lands and how far the
super-resolved token is from the re-encoded crop.
"""

import numpy as np

from latentvr import data, latent, replay
from latentvr.backbone import Backbone
from latentvr.config import ModelConfig

###############################################################################
# A scene and its question
# ------------------------
ex = data.generate_example(seed=3, index=1)
print("question:", " ".join(w for w in data.decode(ex.question) if w != "<pad>"))
for step in ex.steps:
    print("  ", " ".join(data.decode(step)))
print("answer:", data.decode(ex.answer))

###############################################################################
# Prefill and one implicit step
# -----------------------------
# The context starts as question tokens followed by the 10x10 grid of visual
# tokens.  Each step appends K replayed visual tokens and one thought latent.
cfg = ModelConfig(replay_k=8, latent_steps=4)
model = Backbone(cfg, seed=0)
state = latent.prefill(model, ex.question, ex.image)
print("context length before:", state.P)

z, rep = latent.implicit_step(model, state)
print("context length after: ", state.P, "(= +K+1)")

sel = np.asarray(rep.indices).ravel()
print("replayed grid cells:", [divmod(int(i), cfg.grid) for i in sel])
w = rep.window
print(f"densest {cfg.window}x{cfg.window} window at row {w.row}, col {w.col} "
      f"holding {w.density} of them")

###############################################################################
# The crop that supervises the step
# ---------------------------------
top, left, bottom, right = replay.window_pixels(w, cfg.cell)
print("pixel box:", (top, left, bottom, right))
print("reconstruction loss:", float(np.asarray(rep.recon_loss.data).mean()))

###############################################################################
# Later steps never revisit a token
# ---------------------------------
for _ in range(cfg.latent_steps - 1):
    latent.implicit_step(model, state)
picked = np.concatenate([np.asarray(r.indices).ravel() for r in state.replays])
print(len(picked), "tokens replayed,", len(set(picked.tolist())), "distinct")
