"""Two-phase generation: implicit latent steps with visual replay, then greedy decoding.

The decode context grows as ``[Q | V | B1 | z1 | ... | Bt | zt | answer...]``
where ``Bt`` is the replay block chosen at step t and ``zt`` the final hidden
state of that step's forward pass.  Every forward call counts as one
autoregressive step.

A state holds a batch of examples that advance in lockstep.  Single-example
calls use a batch of one and get unbatched results back.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import KVCache
from .data import EOA
from .replay import VisitedSet, visual_replay_batch

TAGS = ("question", "visual", "visual-latent", "thought-latent", "answer", "reasoning")


@dataclass
class Segment:
    tag: str
    emb: Tensor              # (B, n, d)

    def __len__(self):
        return self.emb.shape[1]


@dataclass
class LatentState:
    segments: list
    images: np.ndarray       # (B, side, side, C)
    visited: list
    batched: bool = False
    t: int = 0
    ar_steps: int = 0
    replays: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return len(self.visited)

    @property
    def P(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def visual(self) -> Tensor:
        return next(s.emb for s in self.segments if s.tag == "visual")

    def tags(self) -> list[str]:
        out: list[str] = []
        for s in self.segments:
            out.extend([s.tag] * len(s))
        return out

    def visual_mask(self) -> np.ndarray:
        return np.array([t == "visual" for t in self.tags()], dtype=bool)

    def embeds(self) -> Tensor:
        return ag.concat([s.emb for s in self.segments if len(s)], axis=1)

    def append(self, tag: str, emb: Tensor) -> None:
        if tag not in TAGS:
            raise ValueError(f"unknown segment tag {tag!r}")
        if emb.ndim == 2:
            emb = emb.reshape((1,) + emb.shape)
        self.segments.append(Segment(tag, emb))


def prefill(model, question, image) -> LatentState:
    """Initial context ``[Q | V]``.

    ``question`` is a token list with ``image`` of shape (side, side, C), or a
    (B, n) id array with a (B, side, side, C) image stack.
    """
    q = np.asarray(question, dtype=np.intp)
    batched = q.ndim == 2
    if not batched:
        q = q.reshape(1, -1)
    if q.shape[1] < 1:
        raise ValueError("question must contain at least one token")
    images = np.asarray(image)
    if not batched:
        images = images[None]
    if images.shape[0] != q.shape[0]:
        raise ValueError(f"{q.shape[0]} questions but {images.shape[0]} images")
    state = LatentState([], images, [VisitedSet() for _ in range(q.shape[0])], batched)
    state.append("question", model.embed_text(q))
    state.append("visual", model.encode_image(images))
    return state


def implicit_step(model, state: LatentState, router: bool = True,
                  telemetry: list | None = None):
    """One latent step: forward with tracing, replay, then append ``B_t`` and ``z_t``.

    Returns ``(z_t, replay)``; both are per-example when the state is batched.
    """
    if state.t >= model.cfg.latent_steps:
        raise ValueError(f"already ran {state.t} of {model.cfg.latent_steps} latent steps")
    out = model.forward(state.embeds(), state.tags(), trace=True, router=router,
                        logits=None, telemetry=telemetry)
    state.ar_steps += 1
    P = state.P
    z = out.hidden[:, P - 1:P]
    replay = visual_replay_batch(model, out.trace, state.visual, state.visual_mask(),
                                 state.visited, state.images)
    if replay.indices.shape[1]:
        state.append("visual-latent", replay.block)
    state.append("thought-latent", z)
    state.t += 1
    state.replays.append(replay)
    z = z.reshape(state.B, model.cfg.d_model)
    if state.batched:
        return z, replay
    return z.reshape(model.cfg.d_model), replay.example(0)


@dataclass
class Decoded:
    tokens: list
    ar_steps: int
    truncated: bool


def decode_answer(model, state: LatentState, max_tokens: int = 8, cache: bool = True):
    """Greedy decoding until the end-of-answer token or ``max_tokens``.

    Decoding runs with routing off, so keys and values of the context can be
    cached; ``cache=False`` recomputes the whole prefix at every step instead
    and gives the same tokens.  Each example's AR count stops at its own
    end-of-answer token.
    """
    B = state.B
    tokens = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    kv = KVCache(model.cfg.n_layers) if cache else None
    with ag.no_grad():
        new = state.embeds()
        prefix = new
        for _ in range(max_tokens):
            if kv is not None:
                logits = model.step(new, kv)
            else:
                logits = model.forward(prefix).logits.data
            nxt = np.argmax(logits, axis=-1)
            for b in np.nonzero(~done)[0]:
                tokens[b].append(int(nxt[b]))
                done[b] = nxt[b] == EOA
            if done.all():
                break
            new = model.embed_text(nxt.reshape(B, 1))
            if kv is None:
                prefix = ag.concat([prefix, new], axis=1)
    out = [Decoded(tok, state.ar_steps + len(tok), not (tok and tok[-1] == EOA))
           for tok in tokens]
    return out if state.batched else out[0]


def run_latent(model, question, image, n_latent: int, max_tokens: int = 8,
               telemetry: list | None = None):
    """Full generation with ``n_latent`` implicit steps (no gradient)."""
    with ag.no_grad():
        state = prefill(model, question, image)
        for _ in range(n_latent):
            implicit_step(model, state, telemetry=telemetry)
        return decode_answer(model, state, max_tokens), state


def answer_of(tokens) -> int | None:
    """Token right before the first end-of-answer marker, if any."""
    if EOA in tokens:
        i = tokens.index(EOA)
        return tokens[i - 1] if i > 0 else None
    return None
