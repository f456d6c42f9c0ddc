"""Gradient diagnostics: per-token gradient norms and nuclear norms of low-rank factor gradients.

Probe passes run a forward and backward on a few examples without touching
the optimizer, and restore every parameter's ``.grad`` afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .backbone import PROJECTIONS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradRecord:
    epoch: int
    layer: int
    token_index: int
    segment: str
    fro_norm: float


@dataclass(frozen=True)
class NuclearRecord:
    epoch: int
    layer: int
    proj: str
    factor: str
    split: str
    nuc_norm: float


def jacobi_singular_values(m, tol: float = 1e-12, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of a 2-D matrix by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalised pairwise until every pair satisfies
    ``|u_i . u_j| <= tol * |u_i| |u_j|``.  Returned in descending order.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    n = a.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = a[:, i], a[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, i], a[:, j] = c * ui - s * uj, s * ui + c * uj
        if not rotated:
            break
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    return float(jacobi_singular_values(m).sum())


def token_grad_frobenius(grads, tags, epoch: int) -> list[GradRecord]:
    """Per-token Frobenius norms of hidden-state gradients.

    ``grads`` is a sequence of ``(layer, array)`` pairs with arrays of shape
    (P, d); layer -1 stands for the input embeddings.  ``tags`` names the
    segment of every position.
    """
    out = []
    for layer, g in grads:
        if g is None:
            raise ValueError(f"no gradient was retained for layer {layer}")
        g = np.asarray(g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != len(tags):
            raise ValueError(f"layer {layer}: gradient of shape {g.shape} for {len(tags)} tokens")
        norms = np.sqrt(np.sum(g * g, axis=1))
        out.extend(GradRecord(epoch, int(layer), i, tags[i], float(v))
                   for i, v in enumerate(norms))
    return out


class _SavedGrads:
    """Context manager that stashes and restores every parameter's ``.grad``."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.saved = {k: t.grad for k, t in self.model.params.items()}
        self.model.zero_grad()
        return self

    def __exit__(self, *exc):
        for k, t in self.model.params.items():
            t.grad = self.saved[k]
        return False


def factor_gradients(model, loss_fn, examples) -> dict:
    """Gradients of every low-rank factor for one probe batch (side-effect free)."""
    with _SavedGrads(model):
        with ag.Tape() as tape:
            loss = loss_fn(examples)
        tape.backward(loss)
        out = {}
        for l in range(model.cfg.n_layers):
            for p in PROJECTIONS:
                for f in ("A", "B"):
                    t = model[f"layers.{l}.{p}.{f}"]
                    out[(l, p, f)] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    return out


def track_splits(model, loss_fn, split, examples_by_id: dict, epoch: int,
                 probe_size: int = 4) -> list[NuclearRecord]:
    """Nuclear norms of factor gradients on an easy and a hard probe batch.

    ``split`` maps example ids to "easy", "hard" or "unlabeled".  An empty
    split is skipped with a warning.
    """
    records = []
    for name in ("easy", "hard"):
        ids = sorted(i for i, lab in split.items() if lab == name)[:probe_size]
        if not ids:
            log.warning("epoch %d: %s split is empty; no %s records", epoch, name, name)
            continue
        grads = factor_gradients(model, loss_fn, [examples_by_id[i] for i in ids])
        for (l, p, f), g in grads.items():
            records.append(NuclearRecord(epoch, l, p.upper(), f"W_{f}", name, nuclear_norm(g)))
    return records


def token_probe(model, run_fn, example, epoch: int) -> list[GradRecord]:
    """Token-wise gradient norms for one example.

    ``run_fn(examples)`` must return ``(loss, forward_output, embeds, tags)``
    for the final teacher-forced forward; layer outputs come from its
    recorded layer inputs.
    """
    with _SavedGrads(model):
        with ag.Tape() as tape:
            loss, out, embeds, tags = run_fn([example])
        tape.backward(loss)
        grads = [(-1, _first(embeds.grad))]
        for l, x in enumerate(out.layer_inputs[1:]):
            grads.append((l, _first(x.grad)))
    return token_grad_frobenius(grads, tags, epoch)


def _first(g):
    if g is None:
        return None
    return g[0] if g.ndim == 3 else g
