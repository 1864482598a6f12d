"""Selective state-aware scan: discretization, state-wise timescales, the
frame-segmented recurrence, low-rank state interaction, and the analytic
backward pass for all of it.

Shapes follow the diagonal convention: the evolution parameter ``a`` is
(D, N) and the recurrence runs independently per channel,

    h_t[d, :] = abar_t[d, :] * h_{t-1}[d, :] + bbar_t[d, :] * x_t[d]
    y_t[d]    = sum_n c_t[n] * h_t[d, n]

All public functions accept an optional leading batch dimension: tokens may
be (L, D) or (B, L, D), hidden states (D, N) or (B, D, N).  A scan over one
sequence is sequential by definition; batching never changes per-sequence
results.  Every array op inside a frame uses shapes that depend only on that
frame's length, which is what makes seeded and concatenated scans agree
bit-for-bit (see ``tests/test_acceptance.py``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError, NumericError

DELTA_MODES = ("state_channel", "channel_only")


def outer_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of outer products over all leading axes: (..., M) x (..., K) -> (M, K).

    The workhorse for parameter gradients; batch and token axes fold together.
    """
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=np.asarray(x).dtype), x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x| and dtype-preserving
    half = np.asarray(0.5, dtype=np.asarray(x).dtype)
    return half * (np.tanh(half * x) + np.asarray(1, dtype=np.asarray(x).dtype))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


@dataclass
class FrameSequence:
    """A token sequence partitioned into frames (templates, then search).

    tokens: (..., L, D); frame_lengths must be positive and sum to L.
    """

    tokens: np.ndarray
    frame_lengths: tuple[int, ...]

    def __post_init__(self):
        self.frame_lengths = tuple(int(n) for n in self.frame_lengths)
        if self.tokens.ndim < 2:
            raise ContractError("tokens must be at least (L, D)")
        if not self.frame_lengths:
            raise ContractError("empty sequences are rejected")
        if any(n < 1 for n in self.frame_lengths):
            raise ContractError("every frame length must be >= 1")
        if sum(self.frame_lengths) != self.tokens.shape[-2]:
            raise ContractError(
                f"frame_lengths sum {sum(self.frame_lengths)} != L {self.tokens.shape[-2]}"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def frame_bounds(self) -> list[tuple[int, int]]:
        bounds, start = [], 0
        for n in self.frame_lengths:
            bounds.append((start, start + n))
            start += n
        return bounds


@dataclass
class HiddenState:
    """Per-direction, per-block state of shape (..., D, N)."""

    h: np.ndarray
    tag: str = "initial"  # initial | post-frame | post-interaction

    def __post_init__(self):
        if self.h.ndim < 2:
            raise ContractError("hidden state must be at least (D, N)")
        if not np.all(np.isfinite(self.h)):
            raise NumericError("hidden state contains non-finite entries")


@dataclass
class ScanParams:
    """Per-block, per-direction selective-scan parameters.

    a: (D, N) evolution parameter, strictly negative at init.
    w_b, w_c, w_ds: (N, D) projections for data-dependent B, C and the
    state-wise timescale logits; w_dc: (D, D) channel-wise timescale
    projection with bias d_bias: (D,).  inter_down: (N/4, N) and
    inter_up: (N, N/4) form the low-rank hidden-state interaction.
    """

    a: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    w_ds: np.ndarray
    w_dc: np.ndarray
    d_bias: np.ndarray
    inter_down: np.ndarray
    inter_up: np.ndarray
    delta_mode: str = field(default="state_channel")
    use_interaction: bool = field(default=True)

    def __post_init__(self):
        d, n = self.a.shape
        if n % 4 != 0:
            raise ContractError("state count N must be divisible by 4")
        if self.delta_mode not in DELTA_MODES:
            raise ContractError(f"unknown delta_mode {self.delta_mode!r}")
        expected = {
            "w_b": (n, d), "w_c": (n, d), "w_ds": (n, d), "w_dc": (d, d),
            "d_bias": (d,), "inter_down": (n // 4, n), "inter_up": (n, n // 4),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ContractError(f"{name} has shape {got}, expected {shape}")

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    @classmethod
    def init(cls, d: int, n: int, rng: np.random.Generator,
             dtype=np.float32, delta_mode: str = "state_channel",
             use_interaction: bool = True) -> "ScanParams":
        # a[d, n] = -(n+1): real diagonal init, stable decay for every state
        a = -np.broadcast_to(np.arange(1, n + 1, dtype=dtype), (d, n)).copy()
        std = 1.0 / np.sqrt(d)
        w_b = rng.normal(0.0, std, (n, d)).astype(dtype)
        w_c = rng.normal(0.0, std, (n, d)).astype(dtype)
        w_ds = rng.normal(0.0, std, (n, d)).astype(dtype)
        w_dc = rng.normal(0.0, std, (d, d)).astype(dtype)
        # softplus(d_bias) uniform in [1e-3, 1e-1] on a log scale
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d))
        d_bias = np.log(np.expm1(dt)).astype(dtype)
        # interaction starts as an orthogonal projection onto an N/4 subspace
        q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (n, n // 4)))
        inter_down = q.T.astype(dtype)
        inter_up = q.astype(dtype)
        return cls(a, w_b, w_c, w_ds, w_dc, d_bias, inter_down, inter_up,
                   delta_mode=delta_mode, use_interaction=use_interaction)

    _META = ("delta_mode", "use_interaction")

    def named(self, prefix: str = ""):
        for f in fields(self):
            if f.name in self._META:
                continue
            yield f"{prefix}{f.name}", getattr(self, f.name)

    def zeros_like(self) -> "ScanParams":
        kw = {f.name: np.zeros_like(getattr(self, f.name))
              for f in fields(self) if f.name not in self._META}
        return ScanParams(**kw, delta_mode=self.delta_mode,
                          use_interaction=self.use_interaction)


def discretize(a: np.ndarray, b_t: np.ndarray, delta_t: np.ndarray):
    """Zero-order-hold step: abar = exp(delta * a), bbar = delta * b.

    a: (D, N); b_t: (..., N); delta_t: (..., D, N).  The bbar formula is the
    first-order approximation of the exact ZOH inverse.
    """
    for arr in (a, b_t, delta_t):
        if not np.all(np.isfinite(arr)):
            raise NumericError("discretize received non-finite input")
    abar = np.exp(delta_t * a)
    bbar = delta_t * np.asarray(b_t)[..., None, :]
    return abar, bbar


def state_wise_delta(x: np.ndarray, params: ScanParams) -> np.ndarray:
    """Timescale tensor (..., D, N): softplus of channel-wise logits plus,
    in state_channel mode, state-wise logits broadcast across channels."""
    dc = x @ params.w_dc.T + params.d_bias
    if params.delta_mode == "channel_only":
        z = np.broadcast_to(dc[..., :, None], dc.shape + (params.n,))
    else:
        ds = x @ params.w_ds.T
        z = dc[..., :, None] + ds[..., None, :]
    return softplus(z)


def state_interaction(h, params: ScanParams):
    """Low-rank mixing along the state dimension: h <- up(down(h)).

    Accepts a HiddenState or a bare (..., D, N) array and returns the same
    kind; output rank along states is at most N/4.
    """
    arr = h.h if isinstance(h, HiddenState) else h
    mid = arr @ params.inter_down.T
    out = mid @ params.inter_up.T
    if isinstance(h, HiddenState):
        return HiddenState(out, tag="post-interaction")
    return out


@dataclass
class _FrameTape:
    x: np.ndarray        # (..., Lf, D)
    bs: np.ndarray       # (..., Lf, N)
    cs: np.ndarray       # (..., Lf, N)
    dc: np.ndarray       # (..., Lf, D) channel-wise logits
    ds: np.ndarray | None  # (..., Lf, N) state-wise logits, None in channel_only
    h_enter: np.ndarray  # (..., D, N) state entering the frame
    hs: np.ndarray       # (..., Lf, D, N) state after each token


@dataclass
class ScanTape:
    params: ScanParams
    frame_tapes: list[_FrameTape]
    apply_interaction: bool
    h_init_shape: tuple[int, ...]


@dataclass
class ScanResult:
    y: np.ndarray
    h_last: HiddenState
    per_frame_states: list[HiddenState]
    tape: ScanTape | None = None


@dataclass
class ScanGrads:
    """Gradients produced by scan_backward; params holds dL/d(each array)."""

    dx: np.ndarray
    params: ScanParams
    dh_init: np.ndarray


def _check_state(h: np.ndarray, params: ScanParams):
    if h.shape[-2:] != (params.d, params.n):
        raise ContractError(
            f"hidden state trailing shape {h.shape[-2:]} != {(params.d, params.n)}"
        )


def segmented_scan(seq: FrameSequence, h_init, params: ScanParams,
                   apply_interaction: bool = True,
                   with_tape: bool = False) -> ScanResult:
    """Run the selective recurrence token by token, frame by frame.

    When apply_interaction is set, the state interaction is applied at every
    frame boundary including after the final frame, and per_frame_states
    records the post-interaction state at each boundary; h_last equals the
    final recorded state.
    """
    h0 = h_init.h if isinstance(h_init, HiddenState) else h_init
    _check_state(h0, params)
    if seq.dim != params.d:
        raise ContractError(f"token dim {seq.dim} != channel count {params.d}")
    x = seq.tokens
    batch = x.shape[:-2]
    dtype = x.dtype
    h = np.broadcast_to(h0.astype(dtype, copy=False), batch + h0.shape[-2:]).copy()

    ys = []
    per_frame: list[HiddenState] = []
    frame_tapes: list[_FrameTape] = []
    for start, stop in seq.frame_bounds():
        xf = x[..., start:stop, :]
        lf = stop - start
        bs = xf @ params.w_b.T
        cs = xf @ params.w_c.T
        dc = xf @ params.w_dc.T + params.d_bias
        if params.delta_mode == "channel_only":
            ds = None
            z = np.broadcast_to(dc[..., :, None], dc.shape + (params.n,))
        else:
            ds = xf @ params.w_ds.T
            z = dc[..., :, None] + ds[..., None, :]
        delta = softplus(z)
        abar, bbar = discretize(params.a, bs, delta)
        bx = bbar * xf[..., :, :, None]

        h_enter = h
        hs = np.empty(batch + (lf, params.d, params.n), dtype=dtype)
        yf = np.empty(batch + (lf, params.d), dtype=dtype)
        for t in range(lf):
            h = abar[..., t, :, :] * h + bx[..., t, :, :]
            hs[..., t, :, :] = h
            yf[..., t, :] = np.einsum("...dn,...n->...d", h, cs[..., t, :],
                                      optimize=False)
        ys.append(yf)

        if with_tape:
            frame_tapes.append(_FrameTape(xf, bs, cs, dc, ds, h_enter, hs))

        if apply_interaction:
            h = state_interaction(h, params)
            per_frame.append(HiddenState(h.copy(), tag="post-interaction"))
        else:
            per_frame.append(HiddenState(h.copy(), tag="post-frame"))

    y = np.concatenate(ys, axis=-2)
    tape = None
    if with_tape:
        tape = ScanTape(params, frame_tapes, apply_interaction, h0.shape)
    return ScanResult(y, per_frame[-1], per_frame, tape)


def scan_backward(tape: ScanTape, dy: np.ndarray,
                  dh_last: np.ndarray | None = None) -> ScanGrads:
    """Reverse-mode gradients for segmented_scan.

    dy: upstream gradient of the per-token output, (..., L, D); dh_last:
    optional gradient of the final propagated state, (..., D, N).
    """
    p = tape.params
    first = tape.frame_tapes[0]
    batch = first.x.shape[:-2]
    total_l = sum(ft.x.shape[-2] for ft in tape.frame_tapes)
    if dy.shape != batch + (total_l, p.d):
        raise ContractError(f"dy shape {dy.shape} does not match the tape")

    g = p.zeros_like()
    dh = np.zeros(batch + (p.d, p.n), dtype=dy.dtype)
    if dh_last is not None:
        dh = dh + dh_last
    dxs: list[np.ndarray] = []

    pos = total_l
    for ft in reversed(tape.frame_tapes):
        lf = ft.x.shape[-2]
        dyf = dy[..., pos - lf:pos, :]
        pos -= lf

        if tape.apply_interaction:
            # out = (h_post @ down.T) @ up.T; dh currently holds dL/d out
            h_post = ft.hs[..., -1, :, :]
            mid = h_post @ p.inter_down.T
            g.inter_up += outer_grad(dh, mid)
            dmid = dh @ p.inter_up
            g.inter_down += outer_grad(dmid, h_post)
            dh = dmid @ p.inter_down

        # recompute frame-local discretization tensors
        if p.delta_mode == "channel_only":
            z = np.broadcast_to(ft.dc[..., :, None], ft.dc.shape + (p.n,))
        else:
            z = ft.dc[..., :, None] + ft.ds[..., None, :]
        delta = softplus(z)
        sig = sigmoid(z)
        abar = np.exp(delta * p.a)
        bbar = delta * ft.bs[..., None, :]

        # sequential sweep: G[t] = dL/d h_t including recurrence flow-back
        dh_y = dyf[..., :, :, None] * ft.cs[..., :, None, :]
        big_g = np.empty_like(dh_y)
        big_g[..., lf - 1, :, :] = dh_y[..., lf - 1, :, :] + dh
        for t in range(lf - 2, -1, -1):
            big_g[..., t, :, :] = (
                dh_y[..., t, :, :] + abar[..., t + 1, :, :] * big_g[..., t + 1, :, :]
            )
        dh = abar[..., 0, :, :] * big_g[..., 0, :, :]  # flows to prior frame

        h_prev = np.concatenate(
            [ft.h_enter[..., None, :, :], ft.hs[..., :-1, :, :]], axis=-3
        )
        dabar = big_g * h_prev
        dbx = big_g
        dbbar = dbx * ft.x[..., :, :, None]
        ddelta = dabar * abar * p.a + dbbar * ft.bs[..., None, :]
        g.a += (dabar * abar * delta).reshape(-1, p.d, p.n).sum(axis=0)

        dz = ddelta * sig
        ddc = np.einsum("...ldn->...ld", dz, optimize=False)
        dbs = np.einsum("...ldn->...ln", dbbar * delta, optimize=False)
        dcs = np.einsum("...ldn,...ld->...ln", ft.hs, dyf, optimize=False)

        dxf = np.einsum("...ldn,...ldn->...ld", dbx, bbar, optimize=False)
        dxf = dxf + dbs @ p.w_b + dcs @ p.w_c + ddc @ p.w_dc
        g.w_b += outer_grad(dbs, ft.x)
        g.w_c += outer_grad(dcs, ft.x)
        g.w_dc += outer_grad(ddc, ft.x)
        g.d_bias += ddc.reshape(-1, p.d).sum(axis=0)
        if p.delta_mode != "channel_only":
            dds = np.einsum("...ldn->...ln", dz, optimize=False)
            dxf = dxf + dds @ p.w_ds
            g.w_ds += outer_grad(dds, ft.x)
        dxs.append(dxf)

    dx = np.concatenate(dxs[::-1], axis=-2)
    dh_init = dh
    # h_init may have been broadcast across batch dims; fold the extra axes
    extra = dh_init.ndim - len(tape.h_init_shape)
    if extra > 0:
        dh_init = dh_init.sum(axis=tuple(range(extra)))
    return ScanGrads(dx, g, dh_init)
