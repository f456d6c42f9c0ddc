"""Toy decoder-only multimodal transformer.

The model is a pre-norm causal transformer over a mixed sequence of text
embeddings and visual patch embeddings.  Query/key/value/output projections
are a frozen-able base matrix plus a low-rank ``A @ B`` factor.  Attention
probabilities can be recorded per layer; routing depth scaling (see
:mod:`latentvr.routing`) can be switched on per forward call.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .rng import stream

PROJECTIONS = ("q", "k", "v", "o")


class SequenceTooLongError(ValueError):
    pass


@dataclass
class AttentionTrace:
    """Post-softmax attention maps, one (heads, P, P) array per layer."""

    layers: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def matrix(self, layer: int, head: int) -> np.ndarray:
        return self.layers[layer][head]

    def example(self, b: int) -> "AttentionTrace":
        """Trace of one example from a batched forward."""
        return AttentionTrace([a[b] for a in self.layers])


@dataclass
class ForwardOutput:
    hidden: Tensor                    # final-norm hidden states, (P, d) or (B, P, d)
    layer_inputs: list                # input to each layer, plus the pre-norm output
    logits: Tensor | None
    trace: AttentionTrace | None
    decisions: list                   # RouterDecision records when routing is on


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dictionary.  Low-rank ``B`` factors start at zero."""
    cfg.validate()
    rng = stream(seed, "init")
    dt = np.dtype(cfg.dtype)
    d, r = cfg.d_model, cfg.rank
    hidden = cfg.ffn_mult * d
    rd = max(1, d // 4)
    patch_dim = cfg.cell * cfg.cell * cfg.channels

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(dt)

    p: dict[str, np.ndarray] = {
        "tok_emb": normal(cfg.vocab_size, d),
        "pos_emb": normal(cfg.max_len, d),
        "patch.w": normal(patch_dim, d, std=1.0 / np.sqrt(patch_dim)),
        "patch.b": np.zeros(d, dt),
        "final_norm": np.ones(d, dt),
        "w_out": normal(cfg.vocab_size, d),
        "sr.w": np.eye(d, dtype=dt),
        "sr.b": np.zeros(d, dt),
    }
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        p[pre + "attn_norm"] = np.ones(d, dt)
        p[pre + "mlp_norm"] = np.ones(d, dt)
        for name in PROJECTIONS:
            p[pre + f"{name}.base"] = normal(d, d, std=1.0 / np.sqrt(d))
            p[pre + f"{name}.A"] = normal(d, r, std=1.0 / np.sqrt(d))
            p[pre + f"{name}.B"] = np.zeros((r, d), dt)
        p[pre + "fc1.w"] = normal(d, hidden, std=1.0 / np.sqrt(d))
        p[pre + "fc1.b"] = np.zeros(hidden, dt)
        p[pre + "fc2.w"] = normal(hidden, d, std=0.5 / np.sqrt(hidden))
        p[pre + "fc2.b"] = np.zeros(d, dt)
        p[pre + "router.w1"] = normal(d, rd, std=1.0 / np.sqrt(d))
        p[pre + "router.b1"] = np.zeros(rd, dt)
        p[pre + "router.w2"] = normal(rd, 1, std=1.0 / np.sqrt(rd))
        p[pre + "router.b2"] = np.zeros(1, dt)
        p[pre + "depth_enc"] = np.zeros((max(cfg.max_depth, 1), d), dt)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class KVCache:
    """Per-layer keys and values of an already processed prefix."""

    def __init__(self, n_layers: int):
        self.keys = [None] * n_layers
        self.values = [None] * n_layers
        self.length = 0

    def extend(self, layer: int, k: Tensor, v: Tensor):
        if self.keys[layer] is not None:
            k = Tensor(np.concatenate([self.keys[layer], k.data], axis=-2))
            v = Tensor(np.concatenate([self.values[layer], v.data], axis=-2))
        self.keys[layer], self.values[layer] = k.data, v.data
        return k, v


def _swap_axes(ndim: int) -> tuple:
    # exchange the two axes before the last one
    return tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)


class Backbone:
    """Parameters plus the forward computation of the toy multimodal model."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.cfg = cfg.validate()
        self.params = init_params(cfg, seed) if params is None else params
        self._local = threading.local()

    @property
    def _weights(self):
        # per-thread so evaluation threads can share one model
        return getattr(self._local, "weights", None)

    @_weights.setter
    def _weights(self, value):
        self._local.weights = value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    # --- encoders --------------------------------------------------------
    def patchify(self, image: np.ndarray) -> np.ndarray:
        """Flattened patches, (G*G, c*c*C); a leading batch axis is kept."""
        cfg = self.cfg
        image = np.asarray(image)
        side = cfg.image_side
        lead = image.shape[:-3]
        if image.shape[-3:] != (side, side, cfg.channels) or len(lead) > 1:
            raise ValueError(f"expected image of shape {(side, side, cfg.channels)}, "
                             f"got {image.shape}")
        g, c = cfg.grid, cfg.cell
        patches = image.reshape(lead + (g, c, g, c, cfg.channels))
        patches = np.moveaxis(patches, -4, -3)
        return patches.reshape(lead + (g * g, c * c * cfg.channels)).astype(self.dtype)

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Patch embeddings in row-major grid order, shape (G*G, d) or (B, G*G, d)."""
        patches = Tensor(self.patchify(image))
        return ag.matmul(patches, self["patch.w"]) + self["patch.b"]

    def embed_text(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.ndim != 2:
            ids = ids.reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)]
            raise IndexError(f"token ids {bad.tolist()} outside vocabulary "
                             f"of size {self.cfg.vocab_size}")
        return ag.embedding(self["tok_emb"], ids)

    # --- transformer -----------------------------------------------------
    def weight(self, layer: int, name: str) -> Tensor:
        """Effective projection ``base + A @ B`` as a differentiable tensor.

        Inside one forward call the result is computed once per layer and
        shared by the refinement passes.
        """
        key = (layer, name)
        cache = self._weights
        if cache is not None and key in cache:
            return cache[key]
        pre = f"layers.{layer}.{name}."
        w = self[pre + "base"] + ag.matmul(self[pre + "A"], self[pre + "B"])
        if cache is not None:
            cache[key] = w
        return w

    def project(self, x: Tensor, layer: int, name: str) -> Tensor:
        # x @ (base + A B) costs one row-sized matmul instead of three
        return ag.matmul(x, self.weight(layer, name))

    def effective_projection(self, layer: int, name: str) -> np.ndarray:
        pre = f"layers.{layer}.{name}."
        return self[pre + "base"].data + self[pre + "A"].data @ self[pre + "B"].data

    def _heads(self, x: Tensor) -> Tensor:
        # (..., n, d) -> (..., heads, n, d_h)
        lead, n = x.shape[:-2], x.shape[-2]
        split = x.reshape(lead + (n, self.cfg.n_heads, self.cfg.head_dim))
        return ag.transpose(split, _swap_axes(split.ndim))

    def _merge(self, x: Tensor) -> Tensor:
        lead, n = x.shape[:-3], x.shape[-2]
        return ag.transpose(x, _swap_axes(x.ndim)).reshape(lead + (n, self.cfg.d_model))

    def block(self, x: Tensor, layer: int, mask: np.ndarray,
              context: Tensor | None = None, cache: "KVCache | None" = None):
        """One transformer layer.

        ``context`` supplies the key/value rows when they differ from the
        query rows ``x``.  With ``cache`` the new keys and values are appended
        to the cached ones first.  Returns the layer output and attention
        probabilities.
        """
        pre = f"layers.{layer}."
        h = ag.rmsnorm(x, self[pre + "attn_norm"])
        hk = h if context is None else ag.rmsnorm(context, self[pre + "attn_norm"])
        q = self._heads(self.project(h, layer, "q"))
        k = self._heads(self.project(hk, layer, "k"))
        v = self._heads(self.project(hk, layer, "v"))
        if cache is not None:
            k, v = cache.extend(layer, k, v)
        mixed, probs = ag.attention(q, k, v, mask)
        mixed = self._merge(mixed)
        x = x + self.project(mixed, layer, "o")
        h = ag.rmsnorm(x, self[pre + "mlp_norm"])
        h = ag.relu2(ag.matmul(h, self[pre + "fc1.w"]) + self[pre + "fc1.b"])
        x = x + (ag.matmul(h, self[pre + "fc2.w"]) + self[pre + "fc2.b"])
        return x, probs

    def forward(self, embeds: Tensor, tags=None, trace: bool = False,
                router: bool = False, logits: str | np.ndarray | None = "last",
                telemetry: list | None = None) -> ForwardOutput:
        """Run the transformer over input embeddings ``embeds`` (P, d).

        Position embeddings are added here.  ``logits`` selects which rows get
        vocabulary logits: ``"last"``, ``"all"``, an index array, or None.
        A batch ``(B, P, d)`` is right-padded; pass ``logits`` as a
        ``(batch, position)`` tuple to pick rows per example.
        """
        n = embeds.shape[-2]
        if n > self.cfg.max_len:
            raise SequenceTooLongError(
                f"sequence of {n} tokens exceeds max_len {self.cfg.max_len}")
        if n < 1:
            raise ValueError("empty sequence")
        self._weights = {}
        try:
            return self._forward(embeds, n, trace, router, logits, telemetry)
        finally:
            self._weights = None

    def _forward(self, embeds, n, trace, router, logits, telemetry) -> ForwardOutput:
        from .routing import route_layer

        x = embeds + self["pos_emb"][:n]
        mask = ag.causal_mask(n)
        rec = AttentionTrace() if trace else None
        decisions: list = []
        inputs = []
        for l in range(self.cfg.n_layers):
            inputs.append(x)
            x, probs = self.block(x, l, mask)
            if rec is not None:
                rec.layers.append(probs)
            if router:
                x, dec = route_layer(self, x, l)
                decisions.extend(dec)
        inputs.append(x)
        hidden = ag.rmsnorm(x, self["final_norm"])
        out_logits = None
        if logits is not None:
            if isinstance(logits, str):
                rows = hidden if logits == "all" else hidden[..., n - 1, :]
            elif isinstance(logits, tuple):
                rows = hidden[logits]
            else:
                rows = hidden[..., np.asarray(logits, dtype=np.intp), :]
            out_logits = ag.matmul(rows.reshape(-1, self.cfg.d_model),
                                   ag.transpose(self["w_out"]))
            out_logits = out_logits.reshape(rows.shape[:-1] + (self.cfg.vocab_size,))
        if telemetry is not None:
            telemetry.extend(decisions)
        return ForwardOutput(hidden, inputs, out_logits, rec, decisions)

    def step(self, embeds: Tensor, cache: "KVCache", logits="last") -> Tensor:
        """Router-off forward of new rows on top of ``cache`` (no gradient).

        Equivalent to a full forward over the cached prefix plus ``embeds``;
        only the logits of the new rows are returned.
        """
        n, p0 = embeds.shape[-2], cache.length
        if p0 + n > self.cfg.max_len:
            raise SequenceTooLongError(
                f"sequence of {p0 + n} tokens exceeds max_len {self.cfg.max_len}")
        mask = np.arange(p0 + n)[None, :] <= np.arange(p0, p0 + n)[:, None]
        with ag.no_grad():
            x = embeds + self["pos_emb"][p0:p0 + n]
            self._weights = {}
            try:
                for l in range(self.cfg.n_layers):
                    x, _ = self.block(x, l, mask, cache=cache)
            finally:
                self._weights = None
            cache.length += n
            hidden = ag.rmsnorm(x, self["final_norm"])
            if logits == "last":
                hidden = hidden[..., n - 1, :]
            return hidden.data @ self["w_out"].data.T

    # --- utilities -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "Backbone":
        params = {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                  for k, t in self.params.items()}
        return Backbone(self.cfg, params)
