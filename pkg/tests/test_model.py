import numpy as np
import pytest

from statetrack.block import BlockState
from statetrack.checkpoint import load_params, restore_into, save_params
from statetrack.errors import ContractError
from statetrack.head import Box
from statetrack.model import (
    Model,
    ModelConfig,
    TrainingSample,
    backbone_forward,
    compose_inputs,
    config_from_preset,
    flatten_params,
    init_params,
    patch_embed,
    patch_tokens,
    target_embedding,
    target_mask,
)
from statetrack.scan import FrameSequence

from oracles import fd_grad, global_rel_err


def tiny_config(**kw):
    return config_from_preset("tiny", **kw)


def make_model(seed=0, dtype=np.float64, **kw):
    cfg = tiny_config(**kw)
    return Model(cfg, rng=np.random.default_rng(seed), dtype=dtype)


def make_sample(cfg, rng):
    k = cfg.n_templates
    templates = rng.uniform(0, 1, (k, cfg.image_channels,
                                   cfg.template_size, cfg.template_size))
    boxes = [Box(float(rng.uniform(10, 22)), float(rng.uniform(10, 22)),
                 float(rng.uniform(8, 16)), float(rng.uniform(8, 16)))
             for _ in range(k)]
    search = rng.uniform(0, 1, (cfg.image_channels,
                                cfg.search_size, cfg.search_size))
    gt = Box(float(rng.uniform(16, 48)), float(rng.uniform(16, 48)),
             float(rng.uniform(8, 24)), float(rng.uniform(8, 24)))
    return TrainingSample(templates, boxes, search, gt)


class TestPatchEmbed:
    def test_single_patch(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(3, 8, 8))
        w = rng.normal(size=(5, 3 * 64))
        tok = patch_embed(img, 8, w, np.zeros(5))
        assert tok.shape == (1, 5)

    def test_constant_image_equal_tokens(self):
        rng = np.random.default_rng(1)
        img = np.full((3, 16, 16), 0.7)
        w = rng.normal(size=(5, 3 * 16))
        tok = patch_embed(img, 4, w, np.zeros(5))
        assert np.allclose(tok, tok[0])

    def test_row_major_patch_order_index_oracle(self):
        # encode each pixel as 100*c + 10*y + x on a 4x4 image, 2x2 patches
        img = np.zeros((2, 4, 4))
        for c in range(2):
            for y in range(4):
                for x in range(4):
                    img[c, y, x] = 100 * c + 10 * y + x
        cols = patch_tokens(img, 2)
        assert cols.shape == (4, 2 * 4)
        for idx in range(4):
            pi, pj = divmod(idx, 2)
            expect = [100 * c + 10 * (2 * pi + dy) + (2 * pj + dx)
                      for c in range(2) for dy in range(2) for dx in range(2)]
            assert cols[idx].tolist() == expect

    def test_divisibility_contract(self):
        with pytest.raises(ContractError):
            patch_tokens(np.zeros((3, 9, 9)), 2)


class TestTargetEmbedding:
    def setup_method(self):
        self.cfg = tiny_config()
        self.embed = init_params(self.cfg, np.random.default_rng(2)).embed

    def test_box_covering_template_all_inside(self):
        e = target_embedding(Box(16, 16, 32, 32), self.cfg, self.embed)
        assert np.allclose(e, self.embed.e_b_in)

    def test_tiny_box_clamped_to_one_patch(self):
        mask = target_mask(Box(17.0, 17.0, 0.5, 0.5), 32, 8)
        assert int(mask.sum()) == 1
        assert mask.reshape(4, 4)[2, 2]

    def test_centered_half_box_inner_quad(self):
        mask = target_mask(Box(16.0, 16.0, 16.0, 16.0), 32, 8)
        assert np.array_equal(
            mask.reshape(4, 4),
            np.array([[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]],
                     dtype=bool))


class TestComposeInputs:
    def test_frame_layout(self):
        cfg = tiny_config()
        prm = init_params(cfg, np.random.default_rng(3), dtype=np.float64)
        rng = np.random.default_rng(4)
        k = 2
        t_tok = rng.normal(size=(k, cfg.l_template, cfg.d_model))
        masks = np.zeros((k, cfg.l_template), dtype=bool)
        s_tok = rng.normal(size=(cfg.l_search, cfg.d_model))
        seq, _ = compose_inputs(t_tok, masks, s_tok, prm.embed)
        assert seq.frame_lengths == (cfg.l_template,) * 2 + (cfg.l_search,)
        assert seq.length == 2 * cfg.l_template + cfg.l_search

    def test_zero_embeddings_passthrough(self):
        cfg = tiny_config()
        prm = init_params(cfg, np.random.default_rng(5), dtype=np.float64)
        for _, arr in prm.embed.named():
            arr[:] = 0
        rng = np.random.default_rng(6)
        t_tok = rng.normal(size=(1, cfg.l_template, cfg.d_model))
        masks = np.ones((1, cfg.l_template), dtype=bool)
        s_tok = rng.normal(size=(cfg.l_search, cfg.d_model))
        seq, _ = compose_inputs(t_tok, masks, s_tok, prm.embed)
        assert np.allclose(seq.tokens[:cfg.l_template], t_tok[0])
        assert np.allclose(seq.tokens[cfg.l_template:], s_tok)

    def test_four_templates_training_default(self):
        cfg = config_from_preset("gate")
        assert cfg.n_templates == 4
        prm = init_params(cfg, np.random.default_rng(7), dtype=np.float64)
        rng = np.random.default_rng(8)
        t_tok = rng.normal(size=(4, cfg.l_template, cfg.d_model))
        masks = np.zeros((4, cfg.l_template), dtype=bool)
        s_tok = rng.normal(size=(cfg.l_search, cfg.d_model))
        seq, _ = compose_inputs(t_tok, masks, s_tok, prm.embed)
        assert len(seq.frame_lengths) == 5

    def test_ordinal_overflow_rejected(self):
        cfg = tiny_config()
        prm = init_params(cfg, np.random.default_rng(9), dtype=np.float64)
        t_tok = np.zeros((1, cfg.l_template, cfg.d_model))
        masks = np.zeros((1, cfg.l_template), dtype=bool)
        s_tok = np.zeros((cfg.l_search, cfg.d_model))
        with pytest.raises(ContractError):
            compose_inputs(t_tok, masks, s_tok, prm.embed, ordinals=[99])


class TestBackbone:
    def test_zero_out_proj_passthrough(self):
        cfg = tiny_config(n_blocks=1)
        prm = init_params(cfg, np.random.default_rng(10), dtype=np.float64)
        prm.blocks[0].w_out[:] = 0
        rng = np.random.default_rng(11)
        tokens = rng.normal(size=(cfg.l_template + cfg.l_search, cfg.d_model))
        seq = FrameSequence(tokens, (cfg.l_template, cfg.l_search))
        feats, states = backbone_forward(seq, None, prm.blocks)
        assert np.array_equal(feats, tokens[cfg.l_template:])
        assert len(states) == 1

    def test_states_out_count(self):
        cfg = tiny_config()
        prm = init_params(cfg, np.random.default_rng(12), dtype=np.float64)
        seq = FrameSequence(np.zeros((cfg.l_search, cfg.d_model)), (cfg.l_search,))
        _, states = backbone_forward(seq, None, prm.blocks)
        assert len(states) == cfg.n_blocks

    def test_state_count_mismatch_rejected(self):
        cfg = tiny_config()
        prm = init_params(cfg, np.random.default_rng(13), dtype=np.float64)
        seq = FrameSequence(np.zeros((cfg.l_search, cfg.d_model)), (cfg.l_search,))
        with pytest.raises(ContractError):
            backbone_forward(seq, [], prm.blocks)

    @pytest.mark.parametrize("n_templates", [1, 2, 3, 4])
    def test_end_to_end_propagation_equivalence(self, n_templates):
        cfg = tiny_config(max_templates=4)
        prm = init_params(cfg, np.random.default_rng(14), dtype=np.float32)
        rng = np.random.default_rng(15)
        lt, ls, d = cfg.l_template, cfg.l_search, cfg.d_model
        t_tok = rng.normal(size=(n_templates, lt, d)).astype(np.float32)
        s_tok = rng.normal(size=(ls, d)).astype(np.float32)

        concat = FrameSequence(
            np.concatenate([t_tok.reshape(-1, d), s_tok]),
            (lt,) * n_templates + (ls,))
        feats_cat, states_cat = backbone_forward(concat, None, prm.blocks)

        states = None
        for j in range(n_templates):
            _, states = backbone_forward(FrameSequence(t_tok[j], (lt,)),
                                         states, prm.blocks)
        feats_seeded, states_seeded = backbone_forward(
            FrameSequence(s_tok, (ls,)), states, prm.blocks)

        assert np.array_equal(feats_cat, feats_seeded)
        for a, b in zip(states_cat, states_seeded):
            assert np.array_equal(a.forward.h, b.forward.h)
            assert np.array_equal(a.backward.h, b.backward.h)


class TestModelTraining:
    def test_loss_and_grads_shapes(self):
        model = make_model(seed=20)
        rng = np.random.default_rng(21)
        samples = [make_sample(model.cfg, rng) for _ in range(2)]
        breakdown, grads = model.batch_loss_and_grads(samples)
        assert breakdown.total > 0
        flat = flatten_params(model.params)
        assert set(grads) == set(flat)
        for name, arr in grads.items():
            assert arr.shape == flat[name].shape

    def test_full_model_gradients_match_fd(self):
        # tiny config, double precision, a few sampled entries per group
        model = make_model(seed=22, dtype=np.float64)
        rng = np.random.default_rng(23)
        samples = [make_sample(model.cfg, rng)]
        flat = flatten_params(model.params)

        def loss():
            b, _ = model.batch_loss_and_grads(samples)
            return b.total

        _, grads = model.batch_loss_and_grads(samples)
        worst = 0.0
        pick = np.random.default_rng(24)
        for name, arr in flat.items():
            n_entries = min(2, arr.size)
            for flat_idx in pick.choice(arr.size, n_entries, replace=False):
                idx = np.unravel_index(int(flat_idx), arr.shape)
                orig = arr[idx]
                eps = 1e-5
                arr[idx] = orig + eps
                f_plus = loss()
                arr[idx] = orig - eps
                f_minus = loss()
                arr[idx] = orig
                num = (f_plus - f_minus) / (2 * eps)
                ana = float(grads[name][idx])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                worst = max(worst, err)
        assert worst < 1e-4

    def test_seed_determinism(self):
        m1 = make_model(seed=30)
        m2 = make_model(seed=30)
        rng1, rng2 = np.random.default_rng(31), np.random.default_rng(31)
        s1 = [make_sample(m1.cfg, rng1)]
        s2 = [make_sample(m2.cfg, rng2)]
        b1, g1 = m1.batch_loss_and_grads(s1)
        b2, g2 = m2.batch_loss_and_grads(s2)
        assert b1.total == b2.total
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = make_model(seed=40, dtype=np.float32)
        flat = flatten_params(model.params)
        path = tmp_path / "model.ckpt"
        save_params(path, flat)
        loaded = load_params(path)
        assert set(loaded) == set(flat)
        for name in flat:
            assert np.array_equal(loaded[name], flat[name])
            assert loaded[name].dtype == flat[name].dtype

    def test_byte_identical_for_same_params(self, tmp_path):
        model = make_model(seed=41)
        flat = flatten_params(model.params)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_params(p1, flat)
        save_params(p2, flat)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_and_mismatch_guards(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ContractError):
            load_params(path)
        model = make_model(seed=42)
        flat = flatten_params(model.params)
        save_params(tmp_path / "ok.ckpt", flat)
        loaded = load_params(tmp_path / "ok.ckpt")
        del loaded["patch.w"]
        with pytest.raises(ContractError):
            restore_into(flat, loaded)


class TestPresets:
    def test_published_geometries(self):
        s256 = config_from_preset("s256")
        assert (s256.n_blocks, s256.d_model, s256.d_state) == (24, 384, 16)
        assert s256.search_grid == (16, 16)
        m256 = config_from_preset("m256")
        assert (m256.n_blocks, m256.d_model) == (32, 576)
        m384 = config_from_preset("m384")
        assert m384.search_size == 384 and m384.template_size == 192

    def test_unknown_preset_rejected(self):
        with pytest.raises(ContractError):
            config_from_preset("nope")

    def test_divisibility_guard(self):
        with pytest.raises(ContractError):
            ModelConfig(template_size=30, search_size=64, patch=8)
