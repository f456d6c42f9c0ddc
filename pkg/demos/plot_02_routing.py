"""
Routing depth: who gets a second pass
=====================================

The router scores every token in a layer and sends the top alpha of them
through the same layer again.  This script prints the retention schedule
and shows that the routed forward only touches the selected rows.
"""

import numpy as np

from latentvr import routing
from latentvr.autograd import Tensor
from latentvr.backbone import Backbone
from latentvr.config import ModelConfig

###############################################################################
# Retention per layer
# -------------------
# The cosine schedule starts wide and narrows towards the top of the stack.
for n_layers in (4, 8):
    cfg = ModelConfig(n_layers=n_layers, retention="cosine")
    print(n_layers, "layers:", [routing.layer_retention(cfg, l) for l in range(n_layers)])

###############################################################################
# One routed layer
# ----------------
cfg = ModelConfig(retention="cosine", max_depth=1)
model = Backbone(cfg, seed=0)
rng = np.random.default_rng(0)
h = Tensor(rng.normal(size=(100, cfg.d_model)))

out, decisions = routing.route_layer(model, h, layer=1)
dec = decisions[0]
print("alpha at layer 1:", dec.alpha, "selected:", len(dec.selected))
changed = np.nonzero(np.abs(out.data - h.data).max(axis=1) > 0)[0]
print("rows changed are a subset of the selection:",
      set(changed.tolist()) <= set(dec.selected.tolist()))

###############################################################################
# With the depth encoding at zero the router is a no-op
# ------------------------------------------------------
# Fresh models start that way, so switching routing on does not move the
# forward pass until training moves the encodings.
x = Tensor(rng.normal(size=(30, cfg.d_model)))
on = model.forward(x, router=True, logits=None).hidden.data
off = model.forward(x, router=False, logits=None).hidden.data
print("max |on - off| =", np.abs(on - off).max())
