import logging

import numpy as np
import pytest

from latentvr import autograd as ag
from latentvr import curriculum as cu
from latentvr import diagnostics as dg

from oracles import singular_values_via_gram


class TestTokenGradFrobenius:
    def test_zero(self):
        recs = dg.token_grad_frobenius([(0, np.zeros((3, 4)))], ["a", "b", "c"], epoch=1)
        assert [r.fro_norm for r in recs] == [0.0, 0.0, 0.0]

    def test_one_hot(self):
        g = np.zeros((2, 5))
        g[1, 3] = -3.0
        recs = dg.token_grad_frobenius([(2, g)], ["question", "visual"], epoch=0)
        assert recs[1].fro_norm == 3.0 and recs[1].segment == "visual" and recs[1].layer == 2

    def test_random_vs_direct(self):
        g = np.random.default_rng(0).normal(size=(6, 4))
        recs = dg.token_grad_frobenius([(-1, g)], ["x"] * 6, epoch=3)
        for i, r in enumerate(recs):
            assert r.token_index == i and r.epoch == 3
            assert r.fro_norm == pytest.approx(sum(v * v for v in g[i]) ** 0.5, rel=1e-14)

    def test_missing_gradient(self):
        with pytest.raises(ValueError, match="layer 1"):
            dg.token_grad_frobenius([(1, None)], ["x"], epoch=0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dg.token_grad_frobenius([(0, np.zeros((3, 2)))], ["x"], epoch=0)


class TestNuclearNorm:
    def test_identity(self):
        assert dg.nuclear_norm(np.eye(2)) == pytest.approx(2.0, abs=1e-14)

    def test_diagonal(self):
        assert dg.nuclear_norm(np.diag([3.0, 4.0])) == pytest.approx(7.0, abs=1e-14)

    def test_random_vs_gram_eigenvalues(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            m = rng.normal(size=(8, 8))
            ours = dg.jacobi_singular_values(m)
            ref = singular_values_via_gram(m)
            assert np.max(np.abs(ours - ref)) / ref.max() <= 1e-6

    def test_rectangular(self):
        rng = np.random.default_rng(2)
        for shape in [(7, 3), (3, 7), (1, 5), (5, 1)]:
            m = rng.normal(size=shape)
            np.testing.assert_allclose(dg.jacobi_singular_values(m),
                                       singular_values_via_gram(m), rtol=1e-8)

    def test_rank_deficient(self):
        u = np.random.default_rng(3).normal(size=(6, 1))
        s = dg.jacobi_singular_values(u @ u.T)
        assert s[0] == pytest.approx(float(np.sum(u * u)), rel=1e-12)
        assert np.all(s[1:] < 1e-12)

    def test_at_least_frobenius(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = rng.normal(size=tuple(rng.integers(1, 9, size=2)))
            assert dg.nuclear_norm(m) >= np.sqrt(np.sum(m * m)) * (1 - 1e-12)

    def test_homogeneous(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            m, c = rng.normal(size=(5, 4)), rng.normal() * 3
            assert dg.nuclear_norm(c * m) == pytest.approx(abs(c) * dg.nuclear_norm(m),
                                                           rel=1e-10)

    def test_not_2d(self):
        with pytest.raises(ValueError):
            dg.nuclear_norm(np.ones(3))


def _loss_fn(model):
    return lambda exs: cu.batch_loss(model, exs, 1).total


class TestTrackSplits:
    def test_count(self, model, examples):
        split = {e.id: ("easy" if i < 2 else "hard") for i, e in enumerate(examples[:4])}
        by_id = {e.id: e for e in examples}
        recs = dg.track_splits(model, _loss_fn(model), split, by_id, epoch=0, probe_size=2)
        assert len(recs) == 2 * 4 * 2 * model.cfg.n_layers
        assert {r.split for r in recs} == {"easy", "hard"}
        assert {r.proj for r in recs} == {"Q", "K", "V", "O"}
        assert {r.factor for r in recs} == {"W_A", "W_B"}
        assert all(r.nuc_norm >= 0 for r in recs)

    def test_empty_easy_split(self, model, examples, caplog):
        split = {examples[0].id: "hard", examples[1].id: "unlabeled"}
        by_id = {e.id: e for e in examples}
        with caplog.at_level(logging.WARNING):
            recs = dg.track_splits(model, _loss_fn(model), split, by_id, epoch=4)
        assert {r.split for r in recs} == {"hard"}
        assert "easy split is empty" in caplog.text

    def test_identical_batches_give_identical_records(self, model, examples):
        by_id = {e.id: e for e in examples}
        a = dg.track_splits(model, _loss_fn(model), {examples[0].id: "easy"}, by_id, 0)
        b = dg.track_splits(model, _loss_fn(model), {examples[0].id: "hard"}, by_id, 0)
        assert [r.nuc_norm for r in a] == [r.nuc_norm for r in b]


def test_probes_are_side_effect_free(model, examples):
    opt = cu.Adam(model.params, 1e-3)
    # give the optimizer some state and the parameters some stale gradients
    with ag.Tape() as tape:
        parts = cu.batch_loss(model, examples[:2], 1)
    tape.backward(parts.total)
    opt.step(model.params)
    params = {k: t.data.copy() for k, t in model.params.items()}
    grads = {k: None if t.grad is None else t.grad.copy() for k, t in model.params.items()}
    state = {k: v.copy() for k, v in opt.state_arrays().items()}

    by_id = {e.id: e for e in examples}
    dg.track_splits(model, _loss_fn(model), {examples[0].id: "easy", examples[1].id: "hard"},
                    by_id, 0)

    def run_fn(exs):
        p = cu.batch_loss(model, exs, 1)
        return p.total, p.output, p.embeds, p.tags

    dg.token_probe(model, run_fn, examples[2], 0)
    for k, t in model.params.items():
        np.testing.assert_array_equal(t.data, params[k])
        if grads[k] is None:
            assert t.grad is None
        else:
            np.testing.assert_array_equal(t.grad, grads[k])
    for k, v in opt.state_arrays().items():
        np.testing.assert_array_equal(v, state[k])
    assert opt.t == 1


def test_token_probe_layers_and_segments(model, examples):
    def run_fn(exs):
        p = cu.batch_loss(model, exs, 2)
        return p.total, p.output, p.embeds, p.tags

    recs = dg.token_probe(model, run_fn, examples[0], epoch=5)
    n_tokens = len({r.token_index for r in recs})
    assert sorted({r.layer for r in recs}) == list(range(-1, model.cfg.n_layers))
    assert len(recs) == n_tokens * (model.cfg.n_layers + 1)
    segs = {r.segment for r in recs}
    assert {"question", "visual", "visual-latent", "thought-latent", "answer"} <= segs
    # latent and visual tokens influence the loss through attention
    assert any(r.fro_norm > 0 for r in recs if r.segment == "visual")
