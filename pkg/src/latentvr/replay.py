"""Attention-guided visual replay with a spatially coherent crop target.

At every implicit step the averaged attention map picks the most attended
visual tokens that have not been replayed yet.  Their embeddings, weighted
by a softmax over the attention scores, are appended to the context.  The
densest ``W x W`` window of the picked tokens is cropped from the image,
upsampled, re-encoded, and used as a gradient-stopped target for the pooled
replay block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class TraceError(ValueError):
    pass


@dataclass
class VisitedSet:
    indices: set = field(default_factory=set)

    def __contains__(self, i) -> bool:
        return int(i) in self.indices

    def __len__(self) -> int:
        return len(self.indices)

    def update(self, idx) -> None:
        self.indices.update(int(i) for i in idx)

    def as_array(self) -> np.ndarray:
        return np.array(sorted(self.indices), dtype=np.intp)


@dataclass
class Selection:
    indices: np.ndarray
    exhausted: bool


@dataclass
class Window:
    row: int
    col: int
    size: int
    density: int
    empty: bool = False


@dataclass
class VisualReplayOutput:
    indices: np.ndarray
    block: Tensor            # (k, d) weighted visual latents
    window: Window
    pooled: Tensor           # mean of block rows
    reference: Tensor        # pooled re-encoded crop (no gradient)
    recon_loss: Tensor
    exhausted: bool = False


@dataclass
class BatchReplay:
    """Replay outputs for a batch; ``recon_loss`` is the batch mean."""

    indices: np.ndarray      # (B, k)
    block: Tensor            # (B, k, d)
    windows: list
    pooled: Tensor           # (B, d)
    reference: Tensor        # (B, d)
    recon_loss: Tensor
    per_example: np.ndarray  # (B,) recon loss values
    exhausted: bool = False

    def example(self, b: int) -> VisualReplayOutput:
        loss = Tensor(np.asarray(self.per_example[b], dtype=self.pooled.dtype))
        return VisualReplayOutput(self.indices[b], self.block[b], self.windows[b],
                                  self.pooled[b], self.reference[b], loss, self.exhausted)


def aggregate_attention(trace, n_layers: int | None = None,
                        n_heads: int | None = None) -> np.ndarray:
    """Mean attention map over every layer and head."""
    layers = trace.layers if hasattr(trace, "layers") else list(trace)
    if not layers:
        raise TraceError("attention trace is empty")
    if n_layers is not None and len(layers) != n_layers:
        raise TraceError(f"trace has {len(layers)} layers, expected {n_layers}")
    if n_heads is not None:
        bad = [i for i, a in enumerate(layers) if a.shape[0] != n_heads]
        if bad:
            raise TraceError(f"layers {bad} do not have {n_heads} heads")
    total = np.zeros_like(layers[0][0], dtype=np.float64)
    count = 0
    for a in layers:
        for h in range(a.shape[0]):
            total += a[h]
            count += 1
    return total / count


def visual_scores(mean_attn: np.ndarray, visual_mask) -> np.ndarray:
    """Column sums of the mean attention map restricted to visual positions."""
    visual_mask = np.asarray(visual_mask, dtype=bool)
    if visual_mask.shape != (mean_attn.shape[1],):
        raise TraceError(f"visual mask of length {visual_mask.shape} does not match "
                         f"attention map of size {mean_attn.shape}")
    return mean_attn.sum(axis=0)[visual_mask]


def select_topk_unvisited(scores, visited, k: int) -> Selection:
    """Top-``k`` scores among unvisited indices, ties to the lower index.

    When fewer than ``k`` indices are unvisited the remainder is returned and
    ``exhausted`` is set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    seen = visited.indices if isinstance(visited, VisitedSet) else set(visited)
    free = np.array([i for i in range(len(scores)) if i not in seen], dtype=np.intp)
    exhausted = len(free) < k
    order = np.argsort(-scores[free], kind="stable")[:k]
    return Selection(free[order], exhausted)


def weight_selected(scores, rows: Tensor) -> Tensor:
    """Scale row i of ``rows`` by the i-th entry of softmax(``scores``).

    Batched (B, k) scores weight (B, k, d) rows example by example.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != rows.shape[:-1]:
        raise ValueError(f"scores of shape {scores.shape} for rows of shape {rows.shape}")
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return ag.mul(rows, w.astype(rows.dtype)[..., None])


def find_dense_window(indices, grid: int, size: int) -> Window:
    """Top-left corner of the ``size x size`` window holding the most indices.

    Ties go to the smallest row, then the smallest column.
    """
    if not 1 <= size <= grid:
        raise ValueError(f"window size {size} outside [1, {grid}]")
    indices = np.asarray(indices, dtype=np.intp).reshape(-1)
    if indices.size == 0:
        return Window(0, 0, size, 0, empty=True)
    occupied = np.zeros((grid, grid), dtype=np.int64)
    np.add.at(occupied, (indices // grid, indices % grid), 1)
    summed = np.zeros((grid + 1, grid + 1), dtype=np.int64)
    summed[1:, 1:] = occupied.cumsum(0).cumsum(1)
    span = grid - size + 1
    r = np.arange(span)
    dens = (summed[r[:, None] + size, r[None, :] + size] - summed[r[:, None], r[None, :] + size]
            - summed[r[:, None] + size, r[None, :]] + summed[r[:, None], r[None, :]])
    best = int(np.argmax(dens))
    return Window(best // span, best % span, size, int(dens.flat[best]))


def window_pixels(window: Window, cell: int) -> tuple:
    """Pixel box ``(x0, y0, x1, y1)``, half-open."""
    return (window.col * cell, window.row * cell,
            (window.col + window.size) * cell, (window.row + window.size) * cell)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres; same-size input is returned unchanged."""
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    fy = fy[:, None, None] if image.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if image.ndim == 3 else fx[None, :]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _upsampled_crop(cfg, image: np.ndarray, window: Window) -> np.ndarray:
    x0, y0, x1, y1 = window_pixels(window, cfg.cell)
    if x0 < 0 or y0 < 0 or x1 > cfg.image_side or y1 > cfg.image_side:
        raise ValueError(f"window {window} out of bounds")
    crop = np.asarray(image)[y0:y1, x0:x1]
    return resize_bilinear(crop, cfg.image_side, cfg.image_side)


def crop_and_reencode(model, image: np.ndarray, window: Window) -> Tensor:
    """Encode the window's pixels upsampled to the full input resolution (no gradient)."""
    crop = _upsampled_crop(model.cfg, image, window)
    with ag.no_grad():
        fine = model.encode_image(crop)
    return ag.stop_gradient(fine)


def super_resolve(model, pooled: Tensor) -> Tensor:
    d = pooled.shape[-1]
    return ag.matmul(pooled.reshape(-1, d), model["sr.w"]).reshape(pooled.shape) + model["sr.b"]


def recon_loss(model, block: Tensor, fine: Tensor):
    """``||F_SR(mean(block)) - mean(fine)||^2`` with the fine side gradient-stopped.

    For batched (B, k, d) inputs the result is the mean over the batch.
    """
    pooled = ag.mean(block, axis=-2)
    reference = ag.stop_gradient(ag.mean(fine, axis=-2))
    loss = ag.mse(super_resolve(model, pooled), reference)
    if block.ndim == 3:
        loss = loss * (1.0 / block.shape[0])
    return loss, pooled, reference


def visual_replay_batch(model, traces, visual: Tensor, visual_mask, visited: list,
                        images: np.ndarray) -> BatchReplay:
    """Batched replay.  ``traces`` holds one (B, heads, P, P) array per layer.

    Every example must have the same number of unvisited tokens, which holds
    whenever the batch runs in lockstep from a fresh visited set.
    """
    cfg = model.cfg
    layers = traces.layers if hasattr(traces, "layers") else list(traces)
    B, d = visual.shape[0], cfg.d_model
    sels = []
    picked = []
    for b in range(B):
        mean_attn = aggregate_attention([a[b] for a in layers], cfg.n_layers, cfg.n_heads)
        scores = visual_scores(mean_attn, visual_mask)
        sels.append(select_topk_unvisited(scores, visited[b], cfg.replay_k))
        picked.append(scores)
    counts = {len(s.indices) for s in sels}
    if len(counts) != 1:
        raise ValueError(f"examples selected different token counts {sorted(counts)}")
    k = counts.pop()
    idx = np.stack([s.indices for s in sels]).astype(np.intp).reshape(B, k)
    exhausted = any(s.exhausted for s in sels)
    if k == 0:
        zero = Tensor(np.zeros((B, d), dtype=visual.dtype))
        empty = Tensor(np.zeros((B, 0, d), dtype=visual.dtype))
        windows = [Window(0, 0, cfg.window, 0, empty=True) for _ in range(B)]
        return BatchReplay(idx, empty, windows, zero, zero,
                           Tensor(np.zeros((), dtype=visual.dtype)), np.zeros(B), True)
    raw = np.stack([picked[b][idx[b]] for b in range(B)])
    block = weight_selected(raw, visual[(np.arange(B)[:, None], idx)])
    windows, crops = [], []
    for b in range(B):
        visited[b].update(idx[b])
        counted = visited[b].as_array() if cfg.cumulative_density else idx[b]
        windows.append(find_dense_window(counted, cfg.grid, cfg.window))
        crops.append(_upsampled_crop(cfg, images[b], windows[-1]))
    with ag.no_grad():
        fine = ag.stop_gradient(model.encode_image(np.stack(crops)))
    loss, pooled, reference = recon_loss(model, block, fine)
    diff = super_resolve_array(model, pooled.data) - reference.data
    per_example = np.sum(diff * diff, axis=-1)
    return BatchReplay(idx, block, windows, pooled, reference, loss, per_example, exhausted)


def super_resolve_array(model, pooled: np.ndarray) -> np.ndarray:
    return pooled @ model["sr.w"].data + model["sr.b"].data


def visual_replay(model, trace, visual: Tensor, visual_mask, visited: VisitedSet,
                  image: np.ndarray) -> VisualReplayOutput:
    """Select, weight, crop and score one replay block.  ``visited`` is updated."""
    layers = trace.layers if hasattr(trace, "layers") else list(trace)
    if not layers:
        raise TraceError("attention trace is empty")
    out = visual_replay_batch(model, [a[None] for a in layers],
                              visual.reshape((1,) + visual.shape), visual_mask,
                              [visited], np.asarray(image)[None])
    single = out.example(0)
    single.recon_loss = out.recon_loss
    return single
