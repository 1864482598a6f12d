"""The gated dual-path scan block: RMS norm, input/gate projections, depthwise
causal convolution, forward and intra-frame-flipped scans with independent
parameters, and the output projection with a residual connection.

Every per-frame array op uses shapes that depend only on that frame's length,
so running the block over a concatenated [templates; search] sequence and
running it frame-by-frame with propagated states produce bit-identical search
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError
from .scan import (
    FrameSequence,
    HiddenState,
    ScanGrads,
    ScanParams,
    ScanTape,
    outer_grad,
    scan_backward,
    segmented_scan,
    silu,
    silu_grad,
)

RMS_EPS = 1e-6


@dataclass
class BlockState:
    forward: HiddenState
    backward: HiddenState


@dataclass
class BlockParams:
    norm_w: np.ndarray    # (Dm,)
    w_x: np.ndarray       # (D, Dm)
    w_z: np.ndarray       # (D, Dm)
    conv_f_w: np.ndarray  # (D, K)
    conv_f_b: np.ndarray  # (D,)
    conv_b_w: np.ndarray  # (D, K)
    conv_b_b: np.ndarray  # (D,)
    scan_f: ScanParams
    scan_b: ScanParams
    w_out: np.ndarray     # (Dm, D)
    h_init_f: np.ndarray  # (D, N)
    h_init_b: np.ndarray  # (D, N)

    @property
    def d_model(self) -> int:
        return self.norm_w.shape[0]

    @property
    def d_inner(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def init(cls, d_model: int, d_inner: int, n: int, kernel: int,
             rng: np.random.Generator, dtype=np.float32,
             delta_mode: str = "state_channel",
             use_interaction: bool = True) -> "BlockParams":
        std_in = 1.0 / np.sqrt(d_model)
        std_out = 1.0 / np.sqrt(d_inner)
        conv_s = 1.0 / np.sqrt(kernel)
        return cls(
            norm_w=np.ones(d_model, dtype=dtype),
            w_x=rng.normal(0, std_in, (d_inner, d_model)).astype(dtype),
            w_z=rng.normal(0, std_in, (d_inner, d_model)).astype(dtype),
            conv_f_w=rng.uniform(-conv_s, conv_s, (d_inner, kernel)).astype(dtype),
            conv_f_b=np.zeros(d_inner, dtype=dtype),
            conv_b_w=rng.uniform(-conv_s, conv_s, (d_inner, kernel)).astype(dtype),
            conv_b_b=np.zeros(d_inner, dtype=dtype),
            scan_f=ScanParams.init(d_inner, n, rng, dtype, delta_mode,
                                   use_interaction),
            scan_b=ScanParams.init(d_inner, n, rng, dtype, delta_mode,
                                   use_interaction),
            w_out=rng.normal(0, std_out, (d_model, d_inner)).astype(dtype),
            h_init_f=np.zeros((d_inner, n), dtype=dtype),
            h_init_b=np.zeros((d_inner, n), dtype=dtype),
        )

    def named(self, prefix: str = ""):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, ScanParams):
                yield from val.named(f"{prefix}{f.name}.")
            else:
                yield f"{prefix}{f.name}", val

    def zeros_like(self) -> "BlockParams":
        kw = {}
        for f in fields(self):
            val = getattr(self, f.name)
            kw[f.name] = val.zeros_like() if isinstance(val, ScanParams) \
                else np.zeros_like(val)
        return BlockParams(**kw)

    def initial_state(self) -> BlockState:
        return BlockState(HiddenState(self.h_init_f, tag="initial"),
                          HiddenState(self.h_init_b, tag="initial"))


def _flip_index(frame_lengths) -> np.ndarray:
    parts, start = [], 0
    for n in frame_lengths:
        parts.append(np.arange(start + n - 1, start - 1, -1))
        start += n
    return np.concatenate(parts)


def temporal_causal_flip(seq: FrameSequence) -> FrameSequence:
    """Reverse token order within each frame; frame order is preserved."""
    idx = _flip_index(seq.frame_lengths)
    return FrameSequence(seq.tokens[..., idx, :], seq.frame_lengths)


def _flip_tokens(tokens: np.ndarray, frame_lengths) -> np.ndarray:
    return tokens[..., _flip_index(frame_lengths), :]


def rms_norm(x: np.ndarray, weights: np.ndarray, eps: float = RMS_EPS):
    """Per-token x / sqrt(mean(x^2) + eps) * weights; returns (y, inv_rms)."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    return x * inv * weights, inv


def rms_norm_backward(dy, x, inv, weights):
    dxw = dy * weights
    proj = np.sum(dxw * x, axis=-1, keepdims=True)
    dim = x.shape[-1]
    dx = dxw * inv - x * (inv ** 3) * (proj / dim)
    axes = tuple(range(dy.ndim - 1))
    dw = np.sum(dy * x * inv, axis=axes)
    return dx, dw


def causal_conv1d(seq: FrameSequence, weights: np.ndarray,
                  bias: np.ndarray | None = None,
                  per_frame: bool = True) -> FrameSequence:
    """Depthwise causal 1-D convolution over the token axis.

    weights: (D, K).  With per_frame set, each frame is left-padded with
    K-1 zeros independently so no receptive field crosses a frame boundary.
    """
    lengths = seq.frame_lengths if per_frame else (seq.length,)
    out = _conv_forward(seq.tokens, lengths, weights, bias)
    return FrameSequence(out, seq.frame_lengths)


def _conv_forward(tokens, frame_lengths, w, b):
    kernel = w.shape[1]
    out = np.empty_like(tokens)
    start = 0
    for lf in frame_lengths:
        xf = tokens[..., start:start + lf, :]
        pad = np.zeros(xf.shape[:-2] + (kernel - 1, xf.shape[-1]), dtype=xf.dtype)
        xp = np.concatenate([pad, xf], axis=-2)
        acc = np.zeros_like(xf)
        for k in range(kernel):
            acc = acc + w[:, k] * xp[..., k:k + lf, :]
        if b is not None:
            acc = acc + b
        out[..., start:start + lf, :] = acc
        start += lf
    return out


def _conv_backward(dout, tokens, frame_lengths, w):
    kernel = w.shape[1]
    dx = np.zeros_like(tokens)
    dw = np.zeros_like(w)
    db = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    start = 0
    for lf in frame_lengths:
        xf = tokens[..., start:start + lf, :]
        df = dout[..., start:start + lf, :]
        pad_shape = xf.shape[:-2] + (kernel - 1, xf.shape[-1])
        xp = np.concatenate([np.zeros(pad_shape, dtype=xf.dtype), xf], axis=-2)
        dxp = np.zeros_like(xp)
        for k in range(kernel):
            dxp[..., k:k + lf, :] += w[:, k] * df
            dw[:, k] += (xp[..., k:k + lf, :] * df).reshape(-1, w.shape[0]).sum(axis=0)
        dx[..., start:start + lf, :] = dxp[..., kernel - 1:, :]
        start += lf
    return dx, dw, db


def _per_frame_matmul(tokens, frame_lengths, w_t):
    """tokens @ w_t computed frame by frame so result bits do not depend on
    how many frames share the call."""
    out = np.empty(tokens.shape[:-1] + (w_t.shape[1],), dtype=tokens.dtype)
    start = 0
    for lf in frame_lengths:
        out[..., start:start + lf, :] = tokens[..., start:start + lf, :] @ w_t
        start += lf
    return out


@dataclass
class BlockTape:
    params: BlockParams
    frame_lengths: tuple[int, ...]
    x: np.ndarray
    xn: np.ndarray
    inv: np.ndarray
    fx: np.ndarray
    fz: np.ndarray
    cf: np.ndarray
    cb: np.ndarray
    sf: np.ndarray
    sb: np.ndarray
    scan_tape_f: ScanTape
    scan_tape_b: ScanTape
    seeded: bool
    gated: np.ndarray


@dataclass
class BlockGrads:
    dx: np.ndarray
    params: BlockParams
    dstate_in: BlockState | None


def block_forward(seq: FrameSequence, state_in: BlockState | None,
                  params: BlockParams, with_tape: bool = False):
    """One SASM block pass.

    state_in None means training mode: both scans start from the block's
    learnable initial states.  Returns (seq_out, state_out[, tape]); the
    states in state_out are the post-interaction last states of each scan
    direction.
    """
    if seq.dim != params.d_model:
        raise ContractError(f"token dim {seq.dim} != d_model {params.d_model}")
    x = seq.tokens
    lengths = seq.frame_lengths
    xn, inv = rms_norm(x, params.norm_w)
    fx = _per_frame_matmul(xn, lengths, params.w_x.T)
    fz = _per_frame_matmul(xn, lengths, params.w_z.T)

    cf = _conv_forward(fx, lengths, params.conv_f_w, params.conv_f_b)
    fx_flip = _flip_tokens(fx, lengths)
    cb = _conv_forward(fx_flip, lengths, params.conv_b_w, params.conv_b_b)

    hf0 = params.h_init_f if state_in is None else state_in.forward.h
    hb0 = params.h_init_b if state_in is None else state_in.backward.h
    res_f = segmented_scan(FrameSequence(silu(cf), lengths), hf0, params.scan_f,
                           apply_interaction=params.scan_f.use_interaction,
                           with_tape=with_tape)
    res_b = segmented_scan(FrameSequence(silu(cb), lengths), hb0, params.scan_b,
                           apply_interaction=params.scan_b.use_interaction,
                           with_tape=with_tape)
    sf = res_f.y
    sb = _flip_tokens(res_b.y, lengths)

    gz = silu(fz)
    gated = (sf + sb) * gz
    out = _per_frame_matmul(gated, lengths, params.w_out.T) + x

    state_out = BlockState(res_f.h_last, res_b.h_last)
    seq_out = FrameSequence(out, lengths)
    if not with_tape:
        return seq_out, state_out
    tape = BlockTape(params, lengths, x, xn, inv, fx, fz, cf, cb, sf, res_b.y,
                     res_f.tape, res_b.tape, seeded=state_in is not None,
                     gated=gated)
    return seq_out, state_out, tape


def block_backward(tape: BlockTape, dout: np.ndarray,
                   dstate_out: BlockState | None = None) -> BlockGrads:
    p = tape.params
    g = p.zeros_like()
    lengths = tape.frame_lengths

    dgated = dout @ p.w_out
    g.w_out += outer_grad(dout, tape.gated)
    dx = dout.copy()  # residual branch

    gz = silu(tape.fz)
    dsum = dgated * gz
    dgz = dgated * (tape.sf + _flip_tokens(tape.sb, lengths))
    dfz = dgz * silu_grad(tape.fz)

    dh_f = dstate_out.forward.h if dstate_out is not None else None
    dh_b = dstate_out.backward.h if dstate_out is not None else None

    gs_f: ScanGrads = scan_backward(tape.scan_tape_f, dsum, dh_last=dh_f)
    dcf = gs_f.dx * silu_grad(tape.cf)
    dfx, dwf, dbf = _conv_backward(dcf, tape.fx, lengths, p.conv_f_w)
    g.conv_f_w += dwf
    g.conv_f_b += dbf

    gs_b: ScanGrads = scan_backward(tape.scan_tape_b, _flip_tokens(dsum, lengths),
                                    dh_last=dh_b)
    dcb = gs_b.dx * silu_grad(tape.cb)
    fx_flip = _flip_tokens(tape.fx, lengths)
    dfx_flip, dwb, dbb = _conv_backward(dcb, fx_flip, lengths, p.conv_b_w)
    dfx = dfx + _flip_tokens(dfx_flip, lengths)
    g.conv_b_w += dwb
    g.conv_b_b += dbb

    _accumulate_scan(g.scan_f, gs_f.params)
    _accumulate_scan(g.scan_b, gs_b.params)

    dxn = dfx @ p.w_x + dfz @ p.w_z
    g.w_x += outer_grad(dfx, tape.xn)
    g.w_z += outer_grad(dfz, tape.xn)

    dx_norm, dnw = rms_norm_backward(dxn, tape.x, tape.inv, p.norm_w)
    dx += dx_norm
    g.norm_w += dnw

    dstate_in = None
    if tape.seeded:
        dstate_in = BlockState(HiddenState(gs_f.dh_init, tag="initial"),
                               HiddenState(gs_b.dh_init, tag="initial"))
    else:
        g.h_init_f += gs_f.dh_init
        g.h_init_b += gs_b.dh_init
    return BlockGrads(dx, g, dstate_in)


def _accumulate_scan(dst: ScanParams, src: ScanParams):
    for (name, arr), (_, inc) in zip(dst.named(), src.named()):
        arr += inc
