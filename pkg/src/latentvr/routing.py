"""Routing depth scaling.

After each transformer layer a small per-layer router scores every token.
The top-``alpha`` tokens are passed through the same layer again, with
attention restricted to the selected subset, and the gated result is added
back onto the layer output scaled by a learned per-depth vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class RouterDecision:
    layer: int
    depth: int
    scores: Tensor           # (P,) or (B, P) in (0, 1); carries the gate gradient
    selected: np.ndarray     # ascending original positions, (alpha,) or (B, alpha)
    alpha: int

    @property
    def index(self):
        return row_index(self.selected)

    @property
    def mean_score(self) -> float:
        if self.selected.shape[-1] == 0:
            return float("nan")
        return float(self.scores.data[self.index].mean())

    def mask(self, b: int | None = None) -> np.ndarray:
        """Restricted causal mask: attention only among selected positions."""
        n = self.scores.shape[-1]
        sel = self.selected if b is None else self.selected[b]
        m = np.zeros((n, n), dtype=bool)
        m[np.ix_(sel, sel)] = sel[None, :] <= sel[:, None]
        return m


def row_index(sel: np.ndarray):
    """Index for ``hidden[...]`` picking ``sel`` rows, per example when batched."""
    if sel.ndim == 1:
        return sel
    return (np.arange(sel.shape[0])[:, None], sel)


def retention(l: float, n_layers: int, mode: str = "fixed", alpha: int = 32,
              alpha_start: int = 64, alpha_end: int = 16) -> int:
    """Tokens kept for refinement at layer ``l`` of ``n_layers``.

    The cosine schedule decays from ``alpha_start`` at ``l = 0`` to
    ``alpha_end`` at ``l = n_layers``; rounding is half-up.
    """
    if mode == "fixed":
        return int(alpha)
    if mode != "cosine":
        raise ValueError(f"unknown retention mode {mode!r}")
    if n_layers == 0:
        return int(alpha_start)
    if not 0 <= l <= n_layers:
        raise ValueError(f"layer {l} outside [0, {n_layers}]")
    value = alpha_end + (alpha_start - alpha_end) / 2.0 * (1.0 + math.cos(math.pi * l / n_layers))
    return int(math.floor(value + 0.5))


def layer_retention(cfg, layer: int) -> int:
    # first layer keeps alpha_start, last layer alpha_end
    return retention(layer, max(cfg.n_layers - 1, 0), cfg.retention, cfg.alpha,
                     cfg.alpha_start, cfg.alpha_end)


def score_tokens(model, hidden: Tensor, layer: int) -> Tensor:
    """Per-token importance in (0, 1)."""
    pre = f"layers.{layer}.router."
    h = ag.tanh(ag.matmul(hidden, model[pre + "w1"]) + model[pre + "b1"])
    s = ag.sigmoid(ag.matmul(h, model[pre + "w2"]) + model[pre + "b2"])
    return s.reshape(hidden.shape[:-1])


def select_top(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending.

    Works along the last axis, so a (B, P) score matrix gives (B, k).
    """
    scores = np.asarray(scores)
    k = max(min(int(k), scores.shape[-1]), 0)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1).astype(np.intp)


def decide(model, hidden: Tensor, layer: int, depth: int,
           alpha: int | None = None) -> RouterDecision:
    if alpha is None:
        alpha = layer_retention(model.cfg, layer)
    scores = score_tokens(model, hidden, layer)
    return RouterDecision(layer, depth, scores, select_top(scores.data, alpha), alpha)


def refine_step(model, hidden: Tensor, decision: RouterDecision) -> Tensor:
    """One refinement pass: selected rows become ``s_i * f(h_i)``, others are kept."""
    sel = decision.selected
    k = sel.shape[-1]
    if k == 0:
        return hidden
    idx = decision.index
    rows = hidden[idx]
    if model.cfg.restrict_refine:
        f_rows, _ = model.block(rows, decision.layer, ag.causal_mask(k))
    else:
        n = hidden.shape[-2]
        mask = np.arange(n) <= sel[..., None]
        f_rows, _ = model.block(rows, decision.layer, mask, context=hidden)
    gate = decision.scores[idx].reshape(sel.shape + (1,))
    return ag.replace_rows(hidden, idx, ag.mul(gate, f_rows))


def aggregate_depths(base: Tensor, refined: list, encodings: list, selections: list) -> Tensor:
    """``base + sum_d (delta_d * e_d)``, ``delta_d`` keeping only the rows selected at depth d."""
    out = base
    for h, e, sel in zip(refined, encodings, selections):
        keep = np.zeros(base.shape[:-1] + (1,), dtype=base.dtype)
        keep[row_index(np.asarray(sel, dtype=np.intp))] = 1.0
        out = out + ag.mul(ag.mul(h, keep), e)
    return out


def route_layer(model, hidden: Tensor, layer: int, alpha: int | None = None):
    """Apply ``max_depth`` refinement passes after ``layer``; returns (hidden, decisions)."""
    depth_max = model.cfg.max_depth
    if depth_max == 0:
        return hidden, []
    enc = model[f"layers.{layer}.depth_enc"]
    current = hidden
    refined, encodings, selections, decisions = [], [], [], []
    for depth in range(1, depth_max + 1):
        dec = decide(model, current, layer, depth, alpha)
        current = refine_step(model, current, dec)
        refined.append(current)
        encodings.append(enc[depth - 1])
        selections.append(dec.selected)
        decisions.append(dec)
    return aggregate_depths(hidden, refined, encodings, selections), decisions
