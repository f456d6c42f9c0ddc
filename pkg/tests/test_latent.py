import numpy as np
import pytest

from latentvr import latent as lt
from latentvr.backbone import Backbone
from latentvr.data import EOA, TOKEN_ID

from conftest import randomize, tiny_config

CIRCLE = TOKEN_ID["circle"]


def scripted_model(latent_steps=4):
    """A model whose layers are exact identities and whose head emits "circle </a>".

    Visual tokens all equal e_1, so every thought latent points along e_1 and
    the head maps that direction to "circle"; the "circle" embedding is e_0,
    which the head maps to the end-of-answer token.
    """
    cfg = tiny_config(latent_steps=latent_steps, replay_k=2)
    m = Backbone(cfg)
    d = cfg.d_model
    for name, t in m.params.items():
        if name.endswith(("o.base", "o.A", "fc2.w", "fc2.b", "depth_enc")) or name in (
                "pos_emb", "patch.w", "w_out", "tok_emb"):
            t.data[...] = 0.0
    m["patch.b"].data[:] = np.eye(d)[1]
    m["tok_emb"].data[CIRCLE] = np.eye(d)[0]
    m["final_norm"].data[:] = 0.0
    m["final_norm"].data[:2] = 1.0
    m["w_out"].data[CIRCLE, 1] = 10.0
    m["w_out"].data[EOA, 0] = 10.0
    return m


def question(n=5):
    return list(range(4, 4 + n))


def image(cfg, seed=0):
    return np.random.default_rng(seed).random((cfg.image_side, cfg.image_side, 3))


class TestPrefill:
    def test_length(self):
        cfg = tiny_config(grid=10, image_side=80, replay_k=8, window=3)
        m = Backbone(cfg)
        st = lt.prefill(m, question(12), np.zeros((80, 80, 3)))
        assert st.P == 112
        assert st.tags()[:12] == ["question"] * 12 and st.tags()[12:] == ["visual"] * 100

    def test_empty_question(self, model):
        with pytest.raises(ValueError):
            lt.prefill(model, [], image(model.cfg))

    def test_trace_shape(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        out = model.forward(st.embeds()[0], trace=True)
        for a in out.trace.layers:
            assert a.shape == (model.cfg.n_heads, st.P, st.P)


class TestImplicitStep:
    def test_context_grows_by_k_plus_one(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        p0 = st.P
        z, rep = lt.implicit_step(model, st)
        assert st.P == p0 + model.cfg.replay_k + 1
        assert z.shape == (model.cfg.d_model,)
        assert rep.block.shape == (model.cfg.replay_k, model.cfg.d_model)

    def test_z_is_last_hidden_row(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        lt.implicit_step(model, st)
        embeds = st.embeds()[0]
        z, _ = lt.implicit_step(model, st)
        direct = model.forward(embeds, router=True, logits=None).hidden.data[-1]
        np.testing.assert_array_equal(z.data, direct)

    def test_context_length_after_phase(self, model):
        cfg = model.cfg
        _, st = lt.run_latent(model, question(7), image(cfg), cfg.latent_steps)
        assert st.P == 7 + cfg.n_visual + cfg.latent_steps * (cfg.replay_k + 1)
        assert st.ar_steps == cfg.latent_steps

    def test_too_many_steps(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        for _ in range(model.cfg.latent_steps):
            lt.implicit_step(model, st)
        with pytest.raises(ValueError):
            lt.implicit_step(model, st)

    def test_no_latent_steps(self):
        m = randomize(Backbone(tiny_config(latent_steps=0)))
        dec, st = lt.run_latent(m, question(), image(m.cfg), 0, max_tokens=3)
        assert st.P == 5 + m.cfg.n_visual
        assert dec.ar_steps == len(dec.tokens)

    def test_visited_tokens_never_repeat(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        for _ in range(model.cfg.latent_steps):
            lt.implicit_step(model, st)
        picked = np.concatenate([r.indices[0] for r in st.replays])
        assert len(set(picked.tolist())) == len(picked)


class TestDecode:
    def test_answer_and_counter(self):
        m = scripted_model(latent_steps=4)
        dec, _ = lt.run_latent(m, question(), image(m.cfg), 4)
        assert dec.tokens == [CIRCLE, EOA]
        assert dec.ar_steps == 6
        assert not dec.truncated
        assert lt.answer_of(dec.tokens) == CIRCLE

    def test_truncation_flag(self):
        m = scripted_model(latent_steps=4)
        dec, _ = lt.run_latent(m, question(), image(m.cfg), 4, max_tokens=1)
        assert dec.tokens == [CIRCLE] and dec.truncated
        assert lt.answer_of(dec.tokens) is None

    def test_deterministic(self, model):
        a, _ = lt.run_latent(model, question(), image(model.cfg), 2)
        b, _ = lt.run_latent(model, question(), image(model.cfg), 2)
        assert a.tokens == b.tokens and a.ar_steps == b.ar_steps

    def test_cache_matches_recompute(self, model):
        st = lt.prefill(model, question(), image(model.cfg))
        for _ in range(2):
            lt.implicit_step(model, st)
        a = lt.decode_answer(model, st, max_tokens=6)
        b = lt.decode_answer(model, st, max_tokens=6, cache=False)
        assert a.tokens == b.tokens and a.ar_steps == b.ar_steps

    def test_batch_matches_single(self, model):
        cfg = model.cfg
        qs = np.array([question(), list(range(9, 14)), list(range(20, 25))])
        imgs = np.stack([image(cfg, s) for s in range(3)])
        st = lt.prefill(model, qs, imgs)
        for _ in range(2):
            lt.implicit_step(model, st)
        batch = lt.decode_answer(model, st, max_tokens=5)
        for b in range(3):
            single, _ = lt.run_latent(model, qs[b], imgs[b], 2, max_tokens=5)
            assert batch[b].tokens == single.tokens
            assert batch[b].ar_steps == single.ar_steps


def test_unknown_tag(model):
    st = lt.prefill(model, question(), image(model.cfg))
    with pytest.raises(ValueError):
        st.append("mystery", st.visual)
