import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statetrack.block import (
    BlockParams,
    BlockState,
    block_backward,
    block_forward,
    causal_conv1d,
    rms_norm,
    rms_norm_backward,
    temporal_causal_flip,
)
from statetrack.scan import FrameSequence, HiddenState

from oracles import fd_grad, global_rel_err, scalar_scan


def make_params(rng, d_model=6, d_inner=6, n=4, k=4, dtype=np.float64):
    p = BlockParams.init(d_model, d_inner, n, k, rng, dtype=dtype)
    p.scan_f.a = -np.abs(rng.uniform(0.2, 2.0, (d_inner, n))).astype(dtype)
    p.scan_b.a = -np.abs(rng.uniform(0.2, 2.0, (d_inner, n))).astype(dtype)
    p.h_init_f = rng.normal(0, 0.5, (d_inner, n)).astype(dtype)
    p.h_init_b = rng.normal(0, 0.5, (d_inner, n)).astype(dtype)
    return p


def make_seq(rng, d, lengths, dtype=np.float64):
    return FrameSequence(rng.normal(size=(sum(lengths), d)).astype(dtype),
                         tuple(lengths))


class TestTemporalCausalFlip:
    def test_two_frames(self):
        tokens = np.array([[1.0], [2.0], [3.0], [4.0]])
        out = temporal_causal_flip(FrameSequence(tokens, (2, 2)))
        assert out.tokens[:, 0].tolist() == [2.0, 1.0, 4.0, 3.0]
        assert out.frame_lengths == (2, 2)

    def test_single_frame_full_reversal(self):
        tokens = np.arange(3.0)[:, None]
        out = temporal_causal_flip(FrameSequence(tokens, (3,)))
        assert out.tokens[:, 0].tolist() == [2.0, 1.0, 0.0]

    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=5),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_involution(self, lengths, seed):
        rng = np.random.default_rng(seed)
        seq = make_seq(rng, 3, lengths)
        twice = temporal_causal_flip(temporal_causal_flip(seq))
        assert np.array_equal(twice.tokens, seq.tokens)
        assert twice.frame_lengths == seq.frame_lengths


class TestRmsNorm:
    def test_unit_weights_two_two(self):
        y, _ = rms_norm(np.array([[2.0, 2.0]]), np.ones(2))
        assert np.allclose(y, 1.0)

    def test_zero_token(self):
        y, _ = rms_norm(np.zeros((1, 4)), np.ones(4))
        assert np.array_equal(y, np.zeros((1, 4)))

    def test_output_rms_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 16))
        y, _ = rms_norm(x, np.ones(16))
        assert np.allclose(np.sqrt(np.mean(y ** 2, axis=-1)), 1.0, atol=1e-5)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 6))
        w = rng.normal(1.0, 0.2, 6)
        up = rng.normal(size=(5, 6))

        def loss():
            y, _ = rms_norm(x, w)
            return float(np.sum(y * up))

        y, inv = rms_norm(x, w)
        dx, dw = rms_norm_backward(up, x, inv, w)
        assert global_rel_err(dx, fd_grad(loss, x, 1e-5)) < 1e-6
        assert global_rel_err(dw, fd_grad(loss, w, 1e-5)) < 1e-6


class TestCausalConv:
    def test_k1_identity(self):
        rng = np.random.default_rng(2)
        seq = make_seq(rng, 3, (4,))
        out = causal_conv1d(seq, np.ones((3, 1)))
        assert np.allclose(out.tokens, seq.tokens)

    def test_k2_current_tap_no_leakage(self):
        w = np.array([[0.0, 1.0], [0.0, 1.0]])
        tokens = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = causal_conv1d(FrameSequence(tokens, (1, 1)), w, per_frame=True)
        assert np.array_equal(out.tokens, tokens)

    @pytest.mark.parametrize("seed", range(5))
    def test_frame_causal_receptive_field(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(3, 4))
        seq = make_seq(rng, 3, (5, 4))
        base = causal_conv1d(seq, w).tokens
        t = int(rng.integers(0, 9))
        bumped = seq.tokens.copy()
        bumped[t] += rng.normal(0, 5, 3)
        out = causal_conv1d(FrameSequence(bumped, (5, 4)), w).tokens
        frame_end = 5 if t < 5 else 9
        assert np.array_equal(out[:t], base[:t])
        assert np.array_equal(out[frame_end:], base[frame_end:])

    def test_per_frame_vs_global_padding(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3))
        seq = make_seq(rng, 2, (3, 3))
        per = causal_conv1d(seq, w, per_frame=True).tokens
        glob = causal_conv1d(seq, w, per_frame=False).tokens
        assert np.array_equal(per[:3], glob[:3])
        assert not np.allclose(per[3:5], glob[3:5])  # taps cross the boundary


def straight_line_block(tokens, lengths, params, hf0, hb0):
    """Independent re-implementation of the block equations: norm, two
    projections, per-frame causal conv, SiLU, forward and intra-frame-flipped
    scans (scalar-loop), re-flip, gating, output projection, residual."""
    def norm(v):
        return v / math.sqrt(float(np.mean(v ** 2)) + 1e-6) * params.norm_w

    def conv(xs, w, b, lens):
        k = w.shape[1]
        out = np.zeros_like(xs)
        start = 0
        for lf in lens:
            for t in range(lf):
                for d in range(xs.shape[1]):
                    acc = b[d]
                    for j in range(k):
                        src = t - (k - 1) + j
                        if src >= 0:
                            acc += w[d, j] * xs[start + src, d]
                    out[start + t, d] = acc
            start += lf
        return out

    def flip(xs, lens):
        out = np.zeros_like(xs)
        start = 0
        for lf in lens:
            out[start:start + lf] = xs[start:start + lf][::-1]
            start += lf
        return out

    def s(v):
        return v / (1.0 + np.exp(-v))

    xn = np.stack([norm(tok) for tok in tokens])
    fx = xn @ params.w_x.T
    fz = xn @ params.w_z.T
    af = s(conv(fx, params.conv_f_w, params.conv_f_b, lengths))
    ab = s(conv(flip(fx, lengths), params.conv_b_w, params.conv_b_b, lengths))
    sf, _, _ = scalar_scan(af, lengths, hf0, params.scan_f)
    sb_raw, _, _ = scalar_scan(ab, lengths, hb0, params.scan_b)
    sb = flip(sb_raw, lengths)
    out = (sf * s(fz) + sb * s(fz)) @ params.w_out.T + tokens
    return out


class TestBlockForward:
    def test_zero_out_proj_is_identity(self):
        rng = np.random.default_rng(4)
        p = make_params(rng)
        p.w_out[:] = 0
        seq = make_seq(rng, 6, (3, 4))
        out, _ = block_forward(seq, None, p)
        assert np.array_equal(out.tokens, seq.tokens)

    def test_zero_gate_is_identity(self):
        rng = np.random.default_rng(5)
        p = make_params(rng)
        p.w_z[:] = 0  # SiLU(0) = 0 kills both paths
        seq = make_seq(rng, 6, (3, 4))
        out, _ = block_forward(seq, None, p)
        assert np.allclose(out.tokens, seq.tokens)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(6)
        p = make_params(rng)
        seq = make_seq(rng, 6, (4, 4))
        out, _ = block_forward(seq, None, p)
        want = straight_line_block(seq.tokens, (4, 4), p, p.h_init_f, p.h_init_b)
        assert global_rel_err(out.tokens, want) < 1e-10

    def test_state_out_shapes_and_tags(self):
        rng = np.random.default_rng(7)
        p = make_params(rng)
        seq = make_seq(rng, 6, (2, 3))
        _, state = block_forward(seq, None, p)
        assert state.forward.h.shape == (6, 4)
        assert state.forward.tag == "post-interaction"
        assert state.backward.tag == "post-interaction"

    @pytest.mark.parametrize("seed", range(8))
    def test_cross_frame_causality(self, seed):
        rng = np.random.default_rng(20 + seed)
        p = make_params(rng)
        lengths = (3, 4, 2)
        seq = make_seq(rng, 6, lengths)
        base, _ = block_forward(seq, None, p)
        k = int(rng.integers(0, 3))
        starts = [0, 3, 7, 9]
        t = int(rng.integers(starts[k], starts[k + 1]))
        bumped = seq.tokens.copy()
        bumped[t] += rng.normal(0, 5, 6)
        out, _ = block_forward(FrameSequence(bumped, lengths), None, p)
        assert np.array_equal(out.tokens[:starts[k]], base.tokens[:starts[k]])

    @pytest.mark.parametrize("n_templates", [1, 2, 3])
    def test_propagation_equivalence_bit_exact(self, n_templates):
        rng = np.random.default_rng(30 + n_templates)
        p = make_params(rng, dtype=np.float32)
        lt, ls = 4, 6
        lengths = (lt,) * n_templates + (ls,)
        seq = make_seq(rng, 6, lengths, dtype=np.float32)

        concat_out, concat_state = block_forward(seq, None, p)

        state = None
        pos = 0
        for _ in range(n_templates):
            frame = FrameSequence(seq.tokens[pos:pos + lt], (lt,))
            _, state = block_forward(frame, state, p)
            pos += lt
        search = FrameSequence(seq.tokens[pos:], (ls,))
        seeded_out, seeded_state = block_forward(search, state, p)

        assert np.array_equal(concat_out.tokens[pos:], seeded_out.tokens)
        assert np.array_equal(concat_state.forward.h, seeded_state.forward.h)
        assert np.array_equal(concat_state.backward.h, seeded_state.backward.h)


class TestBlockBackward:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(40 + seed)
        p = make_params(rng, d_model=5, d_inner=4, n=4, k=3)
        lengths = (2, 3)
        seq = make_seq(rng, 5, lengths)
        up = rng.normal(size=(5, 5))
        up_f = rng.normal(size=(4, 4))
        up_b = rng.normal(size=(4, 4))

        def loss():
            out, state = block_forward(seq, None, p)
            return float(np.sum(out.tokens * up)
                         + np.sum(state.forward.h * up_f)
                         + np.sum(state.backward.h * up_b))

        out, state, tape = block_forward(seq, None, p, with_tape=True)
        dstate = BlockState(HiddenState(up_f.copy(), tag="initial"),
                            HiddenState(up_b.copy(), tag="initial"))
        g = block_backward(tape, up.copy(), dstate_out=dstate)

        worst = 0.0
        checks = [(g.dx, seq.tokens)]
        checks += [(dict(g.params.named())[name], arr) for name, arr in p.named()]
        for analytic, arr in checks:
            num = fd_grad(loss, arr, eps=1e-5)
            denom = max(np.max(np.abs(num)), np.max(np.abs(analytic)), 1e-6)
            worst = max(worst, float(np.max(np.abs(analytic - num))) / denom)
        assert worst < 1e-4

    def test_seeded_mode_returns_state_gradient(self):
        rng = np.random.default_rng(50)
        p = make_params(rng, d_model=5, d_inner=4, n=4, k=3)
        seq = make_seq(rng, 5, (3,))
        h0f = rng.normal(size=(4, 4))
        h0b = rng.normal(size=(4, 4))
        up = rng.normal(size=(3, 5))

        def loss():
            state = BlockState(HiddenState(h0f), HiddenState(h0b))
            out, _ = block_forward(seq, state, p)
            return float(np.sum(out.tokens * up))

        state = BlockState(HiddenState(h0f), HiddenState(h0b))
        out, _, tape = block_forward(seq, state, p, with_tape=True)
        g = block_backward(tape, up.copy())
        assert g.dstate_in is not None
        assert global_rel_err(g.dstate_in.forward.h, fd_grad(loss, h0f, 1e-5)) < 1e-6
        assert global_rel_err(g.dstate_in.backward.h, fd_grad(loss, h0b, 1e-5)) < 1e-6
