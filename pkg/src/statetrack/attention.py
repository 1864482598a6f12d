"""Softmax-attention baseline of matched width and depth, used only for the
cost comparison and the temporal-paradigm ablation.  Forward-only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import rms_norm
from .errors import ContractError


@dataclass
class AttnBlockParams:
    norm1: np.ndarray   # (D,)
    w_qkv: np.ndarray   # (3D, D)
    w_proj: np.ndarray  # (D, D)
    norm2: np.ndarray   # (D,)
    w_up: np.ndarray    # (4D, D)
    b_up: np.ndarray    # (4D,)
    w_down: np.ndarray  # (D, 4D)
    b_down: np.ndarray  # (D,)


@dataclass
class AttentionParams:
    blocks: list[AttnBlockParams]
    n_heads: int

    @classmethod
    def init(cls, d_model: int, depth: int, rng: np.random.Generator,
             n_heads: int | None = None, dtype=np.float32) -> "AttentionParams":
        if n_heads is None:
            n_heads = max(1, d_model // 16)
        if d_model % n_heads:
            raise ContractError("d_model must divide evenly into heads")
        std = 1.0 / np.sqrt(d_model)
        blocks = []
        for _ in range(depth):
            blocks.append(AttnBlockParams(
                norm1=np.ones(d_model, dtype=dtype),
                w_qkv=rng.normal(0, std, (3 * d_model, d_model)).astype(dtype),
                w_proj=rng.normal(0, std, (d_model, d_model)).astype(dtype),
                norm2=np.ones(d_model, dtype=dtype),
                w_up=rng.normal(0, std, (4 * d_model, d_model)).astype(dtype),
                b_up=np.zeros(4 * d_model, dtype=dtype),
                w_down=rng.normal(0, 0.5 / np.sqrt(d_model),
                                  (d_model, 4 * d_model)).astype(dtype),
                b_down=np.zeros(d_model, dtype=dtype),
            ))
        return cls(blocks, n_heads)


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      n_heads: int):
    """Multi-head softmax attention over (L, D) projections; returns the
    (L, D) mix and the (heads, L, L) weight tensor."""
    length, d = q.shape
    dh = d // n_heads

    def split(x):
        return np.moveaxis(x.reshape(length, n_heads, dh), 1, 0)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ np.swapaxes(kh, -1, -2) / np.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores)
    weights = expd / expd.sum(axis=-1, keepdims=True)
    out = weights @ vh
    return np.moveaxis(out, 0, 1).reshape(length, d), weights


def attention_forward(tokens: np.ndarray, params: AttentionParams,
                      return_weights: bool = False):
    """Pre-norm encoder stack: attention + MLP with residuals, full
    (non-causal) attention over the whole concatenated sequence."""
    x = tokens
    last_weights = None
    for blk in params.blocks:
        xn, _ = rms_norm(x, blk.norm1)
        qkv = xn @ blk.w_qkv.T
        d = x.shape[-1]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        mixed, last_weights = softmax_attention(q, k, v, params.n_heads)
        x = x + mixed @ blk.w_proj.T
        xn, _ = rms_norm(x, blk.norm2)
        hidden = np.maximum(xn @ blk.w_up.T + blk.b_up, 0)
        x = x + hidden @ blk.w_down.T + blk.b_down
    if return_weights:
        return x, last_weights
    return x


def attention_flops(length: int, d_model: int, depth: int) -> int:
    """Exact FLOP count for the baseline stack.

    Convention: one multiply-add = 2 FLOPs; quadratic terms come from the
    L x L score and mix products; norms and the softmax are counted with
    explicit per-element constants (5 and 6 FLOPs respectively).
    """
    per_block = (
        2 * length * d_model * 3 * d_model      # qkv projection
        + 2 * length * length * d_model         # scores
        + 6 * length * length                   # softmax (exp, sum, divide)
        + 2 * length * length * d_model         # weighted mix
        + 2 * length * d_model * d_model        # output projection
        + 2 * 2 * length * d_model * 4 * d_model  # MLP up + down
        + length * 4 * d_model                  # ReLU + biases
        + 2 * 5 * length * d_model              # two norms
        + 2 * length * d_model                  # residual adds
    )
    return depth * per_block
