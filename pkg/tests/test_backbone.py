import numpy as np
import pytest

from latentvr.autograd import Tensor
from latentvr.backbone import Backbone, KVCache, SequenceTooLongError

from conftest import randomize, tiny_config
from oracles import worst_grad_error


def random_embeds(model, n, seed=0, batch=None):
    shape = (n, model.cfg.d_model) if batch is None else (batch, n, model.cfg.d_model)
    return Tensor(np.random.default_rng(seed).normal(size=shape))


class TestEncodeImage:
    def test_zero_image_gives_identical_rows(self, model):
        cfg = model.cfg
        v = model.encode_image(np.zeros((cfg.image_side, cfg.image_side, 3))).data
        np.testing.assert_array_equal(v, np.broadcast_to(v[0], v.shape))

    def test_swapping_two_patches_swaps_two_rows(self, model):
        cfg, c = model.cfg, model.cfg.cell
        img = np.random.default_rng(1).random((cfg.image_side, cfg.image_side, 3))
        swapped = img.copy()
        a, b = (0, 1), (3, 2)             # (row, col) of the two patches
        pa = img[a[0] * c:(a[0] + 1) * c, a[1] * c:(a[1] + 1) * c].copy()
        pb = img[b[0] * c:(b[0] + 1) * c, b[1] * c:(b[1] + 1) * c].copy()
        swapped[a[0] * c:(a[0] + 1) * c, a[1] * c:(a[1] + 1) * c] = pb
        swapped[b[0] * c:(b[0] + 1) * c, b[1] * c:(b[1] + 1) * c] = pa
        v0, v1 = model.encode_image(img).data, model.encode_image(swapped).data
        ia, ib = a[0] * cfg.grid + a[1], b[0] * cfg.grid + b[1]
        changed = np.nonzero(np.any(v0 != v1, axis=1))[0]
        assert changed.tolist() == sorted([ia, ib])
        np.testing.assert_array_equal(v1[ia], v0[ib])
        np.testing.assert_array_equal(v1[ib], v0[ia])

    def test_full_size_grid(self):
        cfg = tiny_config(grid=10, image_side=80, replay_k=8, window=3)
        m = Backbone(cfg)
        assert cfg.cell == 8
        assert m.encode_image(np.zeros((80, 80, 3))).shape == (100, cfg.d_model)

    def test_wrong_image_shape(self, model):
        with pytest.raises(ValueError):
            model.encode_image(np.zeros((5, 5, 3)))


class TestForward:
    def test_single_token(self, model):
        out = model.forward(random_embeds(model, 1), trace=True)
        assert out.logits.shape == (model.cfg.vocab_size,)
        assert len(out.trace.layers) == model.cfg.n_layers
        for a in out.trace.layers:
            assert a.shape == (model.cfg.n_heads, 1, 1)
            np.testing.assert_array_equal(a, 1.0)

    def test_causal(self, model):
        x = random_embeds(model, 7)
        short = model.forward(x[:6], logits="all").logits.data
        full = model.forward(x, logits="all").logits.data
        np.testing.assert_allclose(full[:6], short, rtol=0, atol=1e-12)

    def test_trace_rows_are_distributions(self, model):
        out = model.forward(random_embeds(model, 9), trace=True, logits=None)
        for a in out.trace.layers:
            np.testing.assert_allclose(a.sum(-1), 1.0, rtol=1e-12)
            assert np.all(np.triu(a, 1) == 0)

    def test_router_selecting_everything_with_zero_encoding(self, cfg):
        m = Backbone(tiny_config(alpha=64))
        for l in range(cfg.n_layers):
            m[f"layers.{l}.depth_enc"].data[:] = 0.0
        x = random_embeds(m, 20, seed=3)
        on = m.forward(x, router=True, logits="all").logits.data
        off = m.forward(x, router=False, logits="all").logits.data
        assert np.max(np.abs(on - off)) <= 1e-10

    def test_zero_B_factor_gives_base_projection(self, cfg):
        m = Backbone(cfg)
        for l in range(cfg.n_layers):
            for p in "qkvo":
                np.testing.assert_array_equal(m.effective_projection(l, p),
                                              m[f"layers.{l}.{p}.base"].data)

    def test_logits_linear_in_hidden(self, model):
        d = model.cfg.d_model
        w = np.zeros((model.cfg.vocab_size, d))
        w[:d] = np.eye(d)
        model["w_out"].data = w
        out = model.forward(random_embeds(model, 4), logits="all")
        np.testing.assert_allclose(out.logits.data[:, :d], out.hidden.data, atol=1e-14)
        assert np.all(out.logits.data[:, d:] == 0)

    def test_batch_matches_single(self, model):
        x = random_embeds(model, 10, seed=4, batch=3)
        for router in (False, True):
            batched = model.forward(x, router=router, logits="all").logits.data
            for b in range(3):
                single = model.forward(x[b], router=router, logits="all").logits.data
                np.testing.assert_allclose(batched[b], single, rtol=0, atol=1e-12)

    def test_cached_steps_match_full_forward(self, model):
        x = random_embeds(model, 9, seed=5)
        cache = KVCache(model.cfg.n_layers)
        first = model.step(x[:6], cache)
        rest = [model.step(x[i:i + 1], cache) for i in range(6, 9)]
        full = model.forward(x, logits="all").logits.data
        np.testing.assert_allclose(first, full[5], atol=1e-12)
        for i, r in enumerate(rest):
            np.testing.assert_allclose(r, full[6 + i], atol=1e-12)

    def test_deterministic(self, model):
        x = random_embeds(model, 12, seed=6)
        a = model.forward(x, router=True, trace=True, logits="all")
        b = model.forward(x, router=True, trace=True, logits="all")
        np.testing.assert_array_equal(a.logits.data, b.logits.data)
        for la, lb in zip(a.trace.layers, b.trace.layers):
            np.testing.assert_array_equal(la, lb)

    def test_too_long(self, model):
        with pytest.raises(SequenceTooLongError):
            model.forward(random_embeds(model, model.cfg.max_len + 1))

    def test_bad_token_id(self, model):
        with pytest.raises(IndexError):
            model.embed_text([0, model.cfg.vocab_size])

    def test_parameter_gradients(self):
        m = randomize(Backbone(tiny_config(n_layers=1, d_model=8, ffn_mult=1, rank=1,
                                           max_len=8, alpha=2)), seed=2)
        x = random_embeds(m, 5, seed=7)
        w = np.random.default_rng(8).normal(size=(5, m.cfg.vocab_size))
        names = ["layers.0.q.A", "layers.0.v.B", "layers.0.fc1.w", "layers.0.router.w1",
                 "layers.0.depth_enc", "layers.0.attn_norm", "pos_emb"]
        tensors = [m[n] for n in names]
        fn = lambda: (m.forward(x, router=True, logits="all").logits * w).sum()
        assert worst_grad_error(fn, tensors) <= 1e-5


def test_clone_is_independent(model):
    c = model.clone()
    c["tok_emb"].data[0, 0] += 1.0
    assert model["tok_emb"].data[0, 0] != c["tok_emb"].data[0, 0]


def test_init_is_seeded(cfg):
    a, b = Backbone(cfg, seed=3), Backbone(cfg, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert not np.array_equal(Backbone(cfg, seed=4)["tok_emb"].data, a["tok_emb"].data)


def test_float32_model_runs():
    m = Backbone(tiny_config(dtype="float32"))
    out = m.forward(Tensor(np.zeros((3, m.cfg.d_model), np.float32)), router=True)
    assert out.logits.dtype == np.float32
