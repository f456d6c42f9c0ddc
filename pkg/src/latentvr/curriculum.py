"""Curriculum training from explicit chains of thought to latent steps.

Stage k replaces the first k reasoning steps of every example with k latent
slots (a replay block plus a thought vector each).  The loss is next-token
cross entropy on the remaining explicit tokens plus a weighted mean of the
replay reconstruction losses.

Training runs epoch by epoch, writing a checkpoint and a metrics row after
each one, so a run can stop and resume with identical results.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint, diagnostics, records
from .autograd import Tensor
from .backbone import PROJECTIONS, Backbone
from .config import RunConfig
from .data import MAX_STEP_TOKENS, MAX_STEPS, PAD, SEP
from .latent import answer_of, decode_answer, implicit_step, prefill
from .rng import stream

log = logging.getLogger(__name__)

ANSWER_MAX_TOKENS = 8
EXPLICIT_MAX_TOKENS = MAX_STEPS * (MAX_STEP_TOKENS + 1) + ANSWER_MAX_TOKENS


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# schedule and targets

@dataclass(frozen=True)
class CurriculumSchedule:
    """Uniform partition of ``total_epochs`` into stages ``0..n_latent``."""

    total_epochs: int
    n_latent: int

    @property
    def n_stages(self) -> int:
        return self.n_latent + 1

    def stage_of(self, epoch: int) -> int:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        return min(epoch * self.n_stages // self.total_epochs, self.n_latent)


def replay_sizes(cfg, k: int) -> list[int]:
    """Replay block size at each of ``k`` latent steps (fewer once tokens run out)."""
    return [max(0, min(cfg.replay_k, cfg.n_visual - t * cfg.replay_k)) for t in range(k)]


def explicit_tail(example, k: int) -> list[int]:
    """Tokens still written out at stage ``k``: the steps after the first k, then the answer."""
    out: list[int] = []
    for step in example.steps[min(k, len(example.steps)):]:
        out.extend(step)
        out.append(SEP)
    return out + list(example.answer)


@dataclass
class StageTargets:
    """Full input layout of one example at one stage.

    ``tokens[j]`` is the token id at position j (-1 where the input is a
    vector, not a token).  ``mask[j]`` marks positions whose token is a CE
    target; it is predicted from the output at position j - 1.
    """

    stage: int
    tags: list
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def P(self) -> int:
        return len(self.tags)

    @property
    def prefix(self) -> int:
        """Length of the context before the first explicit token."""
        return int(np.argmax(self.mask)) if self.mask.any() else self.P


def build_stage_targets(example, k: int, cfg, mode: str = "latent") -> StageTargets:
    """Layout, token ids and CE mask of ``example`` at stage ``k``.

    In ``"nocot"`` mode the layout is question, image and answer only.
    """
    tags: list[str] = []
    tokens: list[int] = []

    def put(tag, ids):
        tags.extend([tag] * len(ids))
        tokens.extend(ids)

    put("question", list(example.question))
    put("visual", [-1] * cfg.n_visual)
    if mode == "nocot":
        tail, tail_tag = list(example.answer), "answer"
    else:
        for size in replay_sizes(cfg, k):
            put("visual-latent", [-1] * size)
            put("thought-latent", [-1])
        tail, tail_tag = explicit_tail(example, k), None
    start = len(tags)
    if tail_tag is None:
        n_answer = len(example.answer)
        put("reasoning", tail[:len(tail) - n_answer])
        put("answer", tail[len(tail) - n_answer:])
    else:
        put(tail_tag, tail)
    mask = np.zeros(len(tags), dtype=bool)
    mask[start:] = True
    return StageTargets(k, tags, np.array(tokens, dtype=np.intp), mask)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossParts:
    total: Tensor
    ce: Tensor
    recon: Tensor | None
    output: object = None        # ForwardOutput of the final forward
    embeds: Tensor | None = None
    tags: list = field(default_factory=list)
    replays: list = field(default_factory=list)


def combine_losses(ce: Tensor, recon_terms: list, weight: float):
    """``ce + weight * mean(recon_terms)``; exactly ``ce`` with no terms or zero weight."""
    if not recon_terms:
        return ce, None
    recon = recon_terms[0]
    for r in recon_terms[1:]:
        recon = recon + r
    recon = recon * (1.0 / len(recon_terms))
    if weight == 0:
        return ce, recon
    return ce + recon * float(weight), recon


def batch_loss(model: Backbone, examples, k: int, recon_weight: float = 1.0,
               mode: str = "latent") -> LossParts:
    """Training loss of a batch at stage ``k``.

    Latent slots run the model's own forward with routing and replay; the
    final teacher-forced forward covers the whole layout with routing off.
    The CE is the mean over examples of each example's mean token loss.
    """
    B = len(examples)
    n_latent = 0 if mode == "nocot" else k
    q = np.array([e.question for e in examples], dtype=np.intp)
    images = np.stack([e.image for e in examples])
    state = prefill(model, q, images)
    state.batched = True
    for _ in range(n_latent):
        implicit_step(model, state, router=True)
    tails = [list(e.answer) if mode == "nocot" else explicit_tail(e, k) for e in examples]
    width = max(len(t) for t in tails)
    ids = np.full((B, width), PAD, dtype=np.intp)
    for b, t in enumerate(tails):
        ids[b, :len(t)] = t
    n_answer = min(len(e.answer) for e in examples)
    if mode == "nocot":
        state.append("answer", model.embed_text(ids))
    else:
        # reasoning vs answer tags only matter for diagnostics; widths are per batch
        state.append("reasoning", model.embed_text(ids[:, :width - n_answer]))
        state.append("answer", model.embed_text(ids[:, width - n_answer:]))
    embeds = state.embeds()
    P0 = state.P - width
    bi = np.concatenate([np.full(len(t), b) for b, t in enumerate(tails)])
    pos = np.concatenate([P0 - 1 + np.arange(len(t)) for t in tails])
    targets = np.concatenate(tails)
    weights = np.concatenate([np.full(len(t), 1.0 / (B * len(t))) for t in tails])
    out = model.forward(embeds, logits=(bi, pos), router=False)
    ce = ag.cross_entropy(out.logits, targets, weights=weights)
    total, recon = combine_losses(ce, [r.recon_loss for r in state.replays], recon_weight)
    return LossParts(total, ce, recon, out, embeds, state.tags(), state.replays)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction.  Parameters listed in ``frozen`` are skipped."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: dict, frozen=()) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if name in frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_arrays(self, arrays: dict, t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.t = t


def frozen_names(model: Backbone) -> set:
    return {f"layers.{l}.{p}.base" for l in range(model.cfg.n_layers) for p in PROJECTIONS}


def clip_gradients(params: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                              for t in params.values() if t.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    accuracy: float
    mean_ar_steps: float
    mean_seconds: float
    correct: list
    ar_steps: list
    tokens: list
    replays: list = field(default_factory=list)   # (example_id, t, BatchReplay row) triples


def evaluate(model: Backbone, examples, mode: str = "latent", n_latent: int | None = None,
             batch: int = 32, telemetry: list | None = None, threads: int = 1) -> EvalResult:
    """Greedy generation and accuracy.

    ``mode`` is "latent" (``n_latent`` implicit steps, default T_r, then any
    steps not yet latent and the answer), "explicit" (chain of thought, then
    the answer) or "nocot" (answer directly).  With ``threads > 1`` batches are
    decoded concurrently; results keep the input order.
    """
    if mode not in ("latent", "explicit", "nocot"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_latent is None:
        n_latent = model.cfg.latent_steps if mode == "latent" else 0
    # with fewer latent steps than the model has, the remaining steps are still written out
    short = mode == "explicit" or (mode == "latent" and n_latent < model.cfg.latent_steps)
    max_tokens = EXPLICIT_MAX_TOKENS if short else ANSWER_MAX_TOKENS
    chunks = [examples[i:i + batch] for i in range(0, len(examples), batch)]
    want_tel = telemetry is not None

    def work(chunk):
        return _eval_chunk(model, chunk, n_latent, max_tokens, want_tel)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    correct, ar, toks, replays, seconds = [], [], [], [], 0.0
    for part in parts:
        correct += part["correct"]
        ar += part["ar"]
        toks += part["tokens"]
        replays += part["replays"]
        seconds += part["seconds"]
        if want_tel:
            telemetry.extend(part["telemetry"])
    n = max(len(examples), 1)
    return EvalResult(float(np.mean(correct)) if correct else 0.0,
                      float(np.mean(ar)) if ar else 0.0, seconds / n, correct, ar, toks, replays)


def _eval_chunk(model, chunk, n_latent, max_tokens, want_tel) -> dict:
    tel: list = []
    start = time.perf_counter()
    with ag.no_grad():
        state = prefill(model, np.array([e.question for e in chunk]),
                        np.stack([e.image for e in chunk]))
        state.batched = True
        for t in range(n_latent):
            steps = [] if want_tel else None
            implicit_step(model, state, router=True, telemetry=steps)
            if want_tel:
                tel.extend((e.id, t, dec, b) for dec in steps for b, e in enumerate(chunk))
        decoded = decode_answer(model, state, max_tokens)
    out = {"seconds": time.perf_counter() - start, "correct": [], "ar": [], "tokens": [],
           "replays": [], "telemetry": tel}
    for b, (e, d) in enumerate(zip(chunk, decoded)):
        out["correct"].append(answer_of(d.tokens) == e.answer[0])
        out["ar"].append(d.ar_steps)
        out["tokens"].append(d.tokens)
        out["replays"].extend((e.id, t, rep, b) for t, rep in enumerate(state.replays))
    return out


def stage_mode(train_mode: str, stage: int) -> str:
    if train_mode == "nocot":
        return "nocot"
    return "explicit" if stage == 0 else "latent"


def crop_rows(result: EvalResult) -> list:
    rows = []
    for ex_id, t, rep, b in result.replays:
        w = rep.windows[b]
        rows.append((ex_id, t, w.row, w.col, w.size, w.density, rep.indices[b].tolist()))
    return rows


def router_rows(telemetry: list) -> list:
    rows = []
    for ex_id, t, dec, b in telemetry:
        sel = dec.selected[b] if dec.selected.ndim == 2 else dec.selected
        scores = dec.scores.data[b] if dec.scores.ndim == 2 else dec.scores.data
        mean = float(scores[sel].mean()) if len(sel) else float("nan")
        rows.append((ex_id, t, dec.layer, dec.depth, sel.tolist(), mean))
    return rows


# ---------------------------------------------------------------------------
# difficulty split

def split_easy_hard(history: dict) -> dict:
    """Label examples from per-epoch correctness lists.

    ``history`` maps example id -> list of booleans, one per early checkpoint.
    """
    out = {}
    for ex_id, marks in history.items():
        if len(marks) < 2:
            raise ValueError(f"example {ex_id}: need at least 2 checkpoints, got {len(marks)}")
        out[ex_id] = "easy" if all(marks) else "hard" if not any(marks) else "unlabeled"
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: Backbone
    metrics: list
    out_dir: Path
    split: dict


METRICS_FILE = "metrics.csv"
TOKEN_GRADS_FILE = "token_grads.csv"
NUCLEAR_FILE = "factor_nuclear.csv"
CROP_FILE = "crop_log.csv"


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch:03d}.ckpt"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("epoch_*.ckpt"))
    return found[-1] if found else None


def load_model(path) -> tuple[Backbone, dict]:
    cfg, tensors, meta = checkpoint.load(path)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()
              if not k.startswith("adam.")}
    return Backbone(cfg, params), meta


def _save(out_dir, epoch, model, opt, meta) -> None:
    tensors = dict(model.state_arrays())
    tensors.update(opt.state_arrays())
    checkpoint.save(checkpoint_path(out_dir, epoch), model.cfg, tensors, meta)


def train(run: RunConfig, train_set, val_set, out_dir, resume: bool = False,
          until_epoch: int | None = None) -> TrainResult:
    """Curriculum training with per-epoch checkpoints and CSV logs in ``out_dir``.

    ``until_epoch`` stops after that many epochs (for interrupted runs);
    ``resume`` continues from the latest checkpoint in ``out_dir``.
    """
    cfg, tc = run.model, run.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Backbone(cfg, seed=tc.seed)
    opt = Adam(model.params, tc.lr, tc.beta1, tc.beta2, tc.eps)
    schedule = CurriculumSchedule(tc.epochs, cfg.latent_steps if tc.mode == "latent" else 0)
    val = list(val_set)[:tc.val_size]
    val_by_id = {e.id: e for e in val}
    history: dict = {}
    split: dict = {}
    metrics: list = []
    first = 0
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is not None:
            _, tensors, meta = checkpoint.load(ckpt)
            for k, t in model.params.items():
                t.data = tensors[k].copy()
            opt.load_arrays(tensors, meta["adam_t"])
            history = {int(k): v for k, v in meta["history"].items()}
            split = {int(k): v for k, v in meta["split"].items()}
            metrics = meta["metrics"]
            first = meta["epoch"] + 1
            for name, cols in ((METRICS_FILE, records.METRICS_COLUMNS),
                               (TOKEN_GRADS_FILE, records.TOKEN_GRAD_COLUMNS),
                               (NUCLEAR_FILE, records.NUCLEAR_COLUMNS)):
                records.truncate_after_epoch(out_dir / name, cols, meta["epoch"])
    if first == 0:
        records.write_rows(out_dir / METRICS_FILE, records.METRICS_COLUMNS, [])
        if tc.diagnostics:
            records.write_rows(out_dir / TOKEN_GRADS_FILE, records.TOKEN_GRAD_COLUMNS, [])
            records.write_rows(out_dir / NUCLEAR_FILE, records.NUCLEAR_COLUMNS, [])
    last = tc.epochs if until_epoch is None else min(until_epoch, tc.epochs)
    n = len(train_set)
    for epoch in range(first, last):
        stage = schedule.stage_of(epoch)
        frozen = frozen_names(model) if (stage > 0 and tc.freeze_base_after_stage0) else set()
        order = stream(tc.seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(3)
        for i in range(0, n, tc.batch):
            chunk = [train_set[j] for j in order[i:i + tc.batch]]
            model.zero_grad()
            with ag.Tape() as tape:
                parts = batch_loss(model, chunk, stage, tc.recon_weight, tc.mode)
            value = parts.total.item()
            if not np.isfinite(value):
                raise NumericError(f"epoch {epoch}: non-finite loss {value}")
            tape.backward(parts.total)
            if tc.clip_norm > 0:
                clip_gradients(model.params, tc.clip_norm)
            opt.step(model.params, frozen)
            recon = parts.recon.item() if parts.recon is not None else 0.0
            sums += len(chunk) * np.array([value, parts.ce.item(), recon])
        model.zero_grad()
        sums /= n
        mode = stage_mode(tc.mode, stage)
        res = evaluate(model, val, mode, n_latent=stage if mode == "latent" else 0)
        if mode == "latent":
            records.write_rows(out_dir / CROP_FILE, records.CROP_COLUMNS, crop_rows(res))
        if epoch < tc.early_epochs:
            for e, ok in zip(val, res.correct):
                history.setdefault(e.id, []).append(bool(ok))
            if epoch == tc.early_epochs - 1:
                split = split_easy_hard(history)
        if tc.diagnostics:
            _diagnose(model, out_dir, epoch, stage, tc, val, val_by_id, split)
        row = {"epoch": epoch, "stage": stage, "train_loss": float(sums[0]),
               "ce_loss": float(sums[1]), "recon_loss": float(sums[2]),
               "val_acc": res.accuracy,
               "easy_count": sum(v == "easy" for v in split.values()),
               "hard_count": sum(v == "hard" for v in split.values())}
        metrics.append(row)
        records.write_rows(out_dir / METRICS_FILE, records.METRICS_COLUMNS, [row], append=True)
        meta = {"epoch": epoch, "adam_t": opt.t, "metrics": metrics,
                "history": {str(k): v for k, v in history.items()},
                "split": {str(k): v for k, v in split.items()},
                "train": {k: getattr(tc, k) for k in tc.__dataclass_fields__}}
        _save(out_dir, epoch, model, opt, meta)
        log.info("epoch %d stage %d loss %.4f ce %.4f recon %.4f val_acc %.3f",
                 epoch, stage, sums[0], sums[1], sums[2], res.accuracy)
    return TrainResult(model, metrics, out_dir, split)


def _diagnose(model, out_dir, epoch, stage, tc, val, val_by_id, split) -> None:
    if not val:
        return

    def run_fn(examples):
        parts = batch_loss(model, examples, stage, tc.recon_weight, tc.mode)
        return parts.total, parts.output, parts.embeds, parts.tags

    grads = diagnostics.token_probe(model, run_fn, val[0], epoch)
    records.write_rows(out_dir / TOKEN_GRADS_FILE, records.TOKEN_GRAD_COLUMNS,
                       [(r.epoch, r.layer, r.token_index, r.segment, r.fro_norm) for r in grads],
                       append=True)
    if split:
        recs = diagnostics.track_splits(model, lambda ex: run_fn(ex)[0], split, val_by_id,
                                        epoch, tc.probe_size)
        records.write_rows(out_dir / NUCLEAR_FILE, records.NUCLEAR_COLUMNS,
                           [(r.epoch, r.layer, r.proj, r.factor, r.split, r.nuc_norm)
                            for r in recs], append=True)
