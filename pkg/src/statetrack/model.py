"""Full network assembly: patch embedding, positional/temporal/target
embeddings, the block stack, the box head, and the training objective with
its hand-chained backward pass.

Parameter tensors live in plain dataclasses; ``flatten_params`` produces the
name -> array mapping used by the optimizer and the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import BlockParams, BlockState, block_backward, block_forward
from .errors import ContractError
from .head import (
    Box,
    HeadMaps,
    HeadParams,
    LossBreakdown,
    decode_box,
    gaussian_target,
    head_backward,
    head_forward,
    training_loss,
)
from .scan import FrameSequence, outer_grad


@dataclass
class ModelConfig:
    template_size: int = 32
    search_size: int = 64
    patch: int = 8
    n_blocks: int = 4
    d_model: int = 64
    d_state: int = 16
    n_templates: int = 4          # templates per training sample
    max_templates: int = 4        # temporal-embedding table length
    image_channels: int = 3
    conv_kernel: int = 4
    head_width: int = 64
    template_factor: float = 2.0  # crop side = factor * sqrt(box area)
    search_factor: float = 4.0
    delta_mode: str = "state_channel"
    state_interaction: bool = True
    size_axis_swap: bool = False
    lambda_l1: float = 2.0
    lambda_giou: float = 5.0

    def __post_init__(self):
        if self.template_size % self.patch or self.search_size % self.patch:
            raise ContractError("image sizes must be divisible by the patch size")
        if self.n_templates > self.max_templates:
            raise ContractError("n_templates exceeds the temporal table length")

    @property
    def template_grid(self) -> tuple[int, int]:
        g = self.template_size // self.patch
        return (g, g)

    @property
    def search_grid(self) -> tuple[int, int]:
        g = self.search_size // self.patch
        return (g, g)

    @property
    def l_template(self) -> int:
        return (self.template_size // self.patch) ** 2

    @property
    def l_search(self) -> int:
        return (self.search_size // self.patch) ** 2


PRESETS: dict[str, dict] = {
    # desk-scale configs sized for CPU minutes
    "tiny": dict(template_size=32, search_size=64, patch=8, n_blocks=2,
                 d_model=16, d_state=8, head_width=16, n_templates=2,
                 max_templates=4),
    "gate": dict(template_size=32, search_size=64, patch=8, n_blocks=2,
                 d_model=32, d_state=8, head_width=32, n_templates=4,
                 max_templates=4),
    "desk": dict(template_size=32, search_size=64, patch=8, n_blocks=4,
                 d_model=64, d_state=16, head_width=64, n_templates=4,
                 max_templates=4),
    # published geometries
    "s256": dict(template_size=256, search_size=256, patch=16, n_blocks=24,
                 d_model=384, d_state=16, head_width=256, n_templates=4,
                 max_templates=4, template_factor=4.0, search_factor=4.0),
    "m256": dict(template_size=128, search_size=256, patch=16, n_blocks=32,
                 d_model=576, d_state=16, head_width=256, n_templates=4,
                 max_templates=4, template_factor=2.0, search_factor=4.0),
    "m384": dict(template_size=192, search_size=384, patch=16, n_blocks=32,
                 d_model=576, d_state=16, head_width=256, n_templates=4,
                 max_templates=4, template_factor=2.0, search_factor=4.0),
}


def config_from_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class EmbeddingParams:
    e_t: np.ndarray      # (L_t, D)
    e_s: np.ndarray      # (L_s, D)
    e_a: np.ndarray      # (max_templates, D)
    e_b_in: np.ndarray   # (D,)
    e_b_out: np.ndarray  # (D,)

    def named(self, prefix: str = ""):
        yield f"{prefix}e_t", self.e_t
        yield f"{prefix}e_s", self.e_s
        yield f"{prefix}e_a", self.e_a
        yield f"{prefix}e_b_in", self.e_b_in
        yield f"{prefix}e_b_out", self.e_b_out

    def zeros_like(self) -> "EmbeddingParams":
        return EmbeddingParams(*(np.zeros_like(a) for _, a in self.named()))


@dataclass
class ModelParams:
    patch_w: np.ndarray  # (D, C*p*p)
    patch_b: np.ndarray  # (D,)
    embed: EmbeddingParams
    blocks: list[BlockParams]
    head: HeadParams

    def named(self):
        yield "patch.w", self.patch_w
        yield "patch.b", self.patch_b
        yield from self.embed.named("embed.")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"block{i}.")
        yield from self.head.named("head.")

    def zeros_like(self) -> "ModelParams":
        return ModelParams(np.zeros_like(self.patch_w), np.zeros_like(self.patch_b),
                           self.embed.zeros_like(),
                           [b.zeros_like() for b in self.blocks],
                           self.head.zeros_like())


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> ModelParams:
    c, p, d = cfg.image_channels, cfg.patch, cfg.d_model
    patch_w = rng.normal(0, 1.0 / np.sqrt(c * p * p), (d, c * p * p)).astype(dtype)
    patch_b = np.zeros(d, dtype=dtype)
    embed = EmbeddingParams(
        e_t=rng.normal(0, 0.02, (cfg.l_template, d)).astype(dtype),
        e_s=rng.normal(0, 0.02, (cfg.l_search, d)).astype(dtype),
        e_a=rng.normal(0, 0.02, (cfg.max_templates, d)).astype(dtype),
        e_b_in=rng.normal(0, 0.02, d).astype(dtype),
        e_b_out=rng.normal(0, 0.02, d).astype(dtype),
    )
    blocks = [BlockParams.init(d, d, cfg.d_state, cfg.conv_kernel, rng, dtype,
                               cfg.delta_mode, cfg.state_interaction)
              for _ in range(cfg.n_blocks)]
    head = HeadParams.init(d, cfg.head_width, rng, dtype)
    return ModelParams(patch_w, patch_b, embed, blocks, head)


def flatten_params(params: ModelParams) -> dict[str, np.ndarray]:
    return dict(params.named())


# ---------------------------------------------------------------------------
# patch embedding


def patch_tokens(image: np.ndarray, patch: int) -> np.ndarray:
    """(..., C, H, W) -> (..., H*W/p^2, C*p*p), patches row-major."""
    c, h, w = image.shape[-3:]
    if h % patch or w % patch:
        raise ContractError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    lead = image.shape[:-3]
    x = image.reshape(lead + (c, gh, patch, gw, patch))
    k = len(lead)
    # [C, gh, py, gw, px] -> [gh, gw, C, py, px]
    perm = tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4)
    x = x.transpose(perm)
    return x.reshape(lead + (gh * gw, c * patch * patch))


def patch_embed(image: np.ndarray, patch: int, w: np.ndarray,
                b: np.ndarray) -> np.ndarray:
    """Non-overlapping patches, flattened row-major, linearly projected."""
    return patch_tokens(image, patch) @ w.T + b


def patch_embed_backward(dtokens: np.ndarray, image: np.ndarray, patch: int,
                         w: np.ndarray):
    cols = patch_tokens(image, patch)
    dw = outer_grad(dtokens, cols)
    db = dtokens.reshape(-1, dtokens.shape[-1]).sum(axis=0)
    return dw, db


def patch_centers(size: int, patch: int) -> np.ndarray:
    """(L, 2) pixel centers of the row-major patch grid of a square image."""
    g = size // patch
    ys, xs = np.mgrid[0:g, 0:g]
    cx = (xs + 0.5) * patch
    cy = (ys + 0.5) * patch
    return np.stack([cx.ravel(), cy.ravel()], axis=-1)


def target_mask(box: Box, template_size: int, patch: int) -> np.ndarray:
    """Boolean (L_t,) mask of patch centers inside the box; degenerate boxes
    are clamped so at least the patch holding the box center is marked."""
    centers = patch_centers(template_size, patch)
    x0, y0, x1, y1 = box.corners()
    inside = ((centers[:, 0] >= x0) & (centers[:, 0] <= x1)
              & (centers[:, 1] >= y0) & (centers[:, 1] <= y1))
    if not inside.any():
        g = template_size // patch
        xc = min(max(int(box.cx // patch), 0), g - 1)
        yc = min(max(int(box.cy // patch), 0), g - 1)
        inside[yc * g + xc] = True
    return inside


def target_embedding(box: Box, cfg: ModelConfig,
                     embed: EmbeddingParams) -> np.ndarray:
    """(L_t, D): e_b_in on tokens whose patch center lies inside the box,
    e_b_out elsewhere."""
    mask = target_mask(box, cfg.template_size, cfg.patch)
    return np.where(mask[:, None], embed.e_b_in, embed.e_b_out)


# ---------------------------------------------------------------------------
# input composition and the backbone


@dataclass
class ComposeTape:
    masks: np.ndarray      # (..., k, L_t) target masks
    ordinals: list[int]


def compose_inputs(template_tokens: np.ndarray, template_masks: np.ndarray,
                   search_tokens: np.ndarray, embed: EmbeddingParams,
                   ordinals: list[int] | None = None):
    """Assemble the frame sequence [t_1 .. t_k, search].

    template_tokens: (..., k, L_t, D) raw patch embeddings; template_masks:
    (..., k, L_t) target masks; search_tokens: (..., L_s, D).  Positional
    embeddings broadcast over templates, temporal embeddings over tokens.
    """
    k = template_tokens.shape[-3]
    if ordinals is None:
        ordinals = list(range(k))
    if max(ordinals) >= embed.e_a.shape[0]:
        raise ContractError("template count exceeds the temporal table length")
    e_b = np.where(template_masks[..., None], embed.e_b_in, embed.e_b_out)
    ft = template_tokens + embed.e_t + e_b
    ft = ft + embed.e_a[ordinals][:, None, :]
    fs = search_tokens + embed.e_s
    lt, ls = template_tokens.shape[-2], search_tokens.shape[-2]
    lead = template_tokens.shape[:-3]
    tokens = np.concatenate(
        [ft.reshape(lead + (k * lt, ft.shape[-1])), fs], axis=-2)
    seq = FrameSequence(tokens, (lt,) * k + (ls,))
    return seq, ComposeTape(template_masks, list(ordinals))


@dataclass
class BackboneTape:
    block_tapes: list
    frame_lengths: tuple[int, ...]


def backbone_forward(seq: FrameSequence, states_in: list[BlockState] | None,
                     blocks: list[BlockParams], with_tape: bool = False):
    """Run the block stack; states_in None means every block starts from its
    learnable initial states.  Returns the final-block features restricted to
    the last (search) frame plus the per-block last states."""
    if states_in is not None and len(states_in) != len(blocks):
        raise ContractError(
            f"got {len(states_in)} states for {len(blocks)} blocks")
    tapes = []
    states_out: list[BlockState] = []
    cur = seq
    for i, blk in enumerate(blocks):
        state = None if states_in is None else states_in[i]
        if with_tape:
            cur, st, tape = block_forward(cur, state, blk, with_tape=True)
            tapes.append(tape)
        else:
            cur, st = block_forward(cur, state, blk)
        states_out.append(st)
    ls = seq.frame_lengths[-1]
    feats = cur.tokens[..., -ls:, :]
    if with_tape:
        return feats, states_out, BackboneTape(tapes, seq.frame_lengths)
    return feats, states_out


def backbone_backward(tape: BackboneTape, dfeats: np.ndarray,
                      blocks: list[BlockParams]):
    """Chain the block backwards; dfeats covers only the last frame."""
    lengths = tape.frame_lengths
    total = sum(lengths)
    dtokens = np.zeros(dfeats.shape[:-2] + (total, dfeats.shape[-1]),
                       dtype=dfeats.dtype)
    dtokens[..., total - lengths[-1]:, :] = dfeats
    block_grads = []
    for blk_tape in reversed(tape.block_tapes):
        g = block_backward(blk_tape, dtokens)
        dtokens = g.dx
        block_grads.append(g.params)
    return dtokens, block_grads[::-1]


# ---------------------------------------------------------------------------
# the assembled model


@dataclass
class TrainingSample:
    """One training unit: k template crops with their boxes (in template-crop
    coordinates) and a search crop with its ground-truth box."""

    templates: np.ndarray       # (k, C, Ht, Wt)
    template_boxes: list[Box]
    search: np.ndarray          # (C, Hs, Ws)
    gt_box: Box                 # in search-crop pixels


class Model:
    """Config + parameters + the forward/backward plumbing between them."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng or np.random.default_rng(0), dtype)
        self.params = params

    # -- training ----------------------------------------------------------

    def batch_loss_and_grads(self, samples: list[TrainingSample]):
        """Mean loss over the batch plus flat gradient dict."""
        cfg, prm = self.cfg, self.params
        dtype = prm.patch_w.dtype
        k = samples[0].templates.shape[0]
        t_imgs = np.stack([s.templates for s in samples]).astype(dtype)   # (B,k,C,H,W)
        s_imgs = np.stack([s.search for s in samples]).astype(dtype)      # (B,C,H,W)
        masks = np.stack([
            np.stack([target_mask(b, cfg.template_size, cfg.patch)
                      for b in s.template_boxes])
            for s in samples])                                            # (B,k,L_t)

        t_tok = patch_embed(t_imgs, cfg.patch, prm.patch_w, prm.patch_b)
        s_tok = patch_embed(s_imgs, cfg.patch, prm.patch_w, prm.patch_b)
        seq, ctape = compose_inputs(t_tok, masks, s_tok, prm.embed)
        feats, _, btape = backbone_forward(seq, None, prm.blocks, with_tape=True)
        maps, htape = head_forward(feats, cfg.search_grid, prm.head,
                                   with_tape=True)

        batch = len(samples)
        totals = np.zeros(4)
        dcls = np.zeros_like(maps.cls)
        doff = np.zeros_like(maps.offset)
        dsize = np.zeros_like(maps.size)
        for b, sample in enumerate(samples):
            gt_map = gaussian_target(sample.gt_box, cfg.search_grid, cfg.patch)
            per = HeadMaps(maps.cls[b], maps.offset[b], maps.size[b])
            breakdown, dm = training_loss(
                per, gt_map, sample.gt_box, cfg.patch,
                (cfg.search_size, cfg.search_size),
                cfg.lambda_l1, cfg.lambda_giou, cfg.size_axis_swap)
            totals += [breakdown.total, breakdown.focal, breakdown.l1,
                       breakdown.giou]
            dcls[b], doff[b], dsize[b] = dm.cls, dm.offset, dm.size
        totals /= batch
        scale = np.asarray(1.0 / batch, dtype=dtype)

        dfeats, g_head = head_backward(
            htape, HeadMaps(dcls * scale, doff * scale, dsize * scale))
        dtokens, g_blocks = backbone_backward(btape, dfeats, prm.blocks)

        grads = prm.zeros_like()
        g = flatten_params(grads)
        for name, arr in g_head.named("head."):
            g[name] += arr
        for i, gb in enumerate(g_blocks):
            for name, arr in gb.named(f"block{i}."):
                g[name] += arr

        lt, ls = cfg.l_template, cfg.l_search
        dt_tok = dtokens[..., :k * lt, :].reshape(t_tok.shape)
        ds_tok = dtokens[..., k * lt:, :]
        ge = grads.embed
        ge.e_s += ds_tok.reshape(-1, ls, cfg.d_model).sum(axis=0)
        ge.e_t += dt_tok.reshape(-1, lt, cfg.d_model).sum(axis=0)
        for j, ordinal in enumerate(ctape.ordinals):
            ge.e_a[ordinal] += dt_tok[:, j].sum(axis=(0, 1))
        m = ctape.masks[..., None]
        ge.e_b_in += (dt_tok * m).reshape(-1, cfg.d_model).sum(axis=0)
        ge.e_b_out += (dt_tok * ~m).reshape(-1, cfg.d_model).sum(axis=0)

        dw_t, db_t = patch_embed_backward(dt_tok, t_imgs, cfg.patch, prm.patch_w)
        dw_s, db_s = patch_embed_backward(ds_tok, s_imgs, cfg.patch, prm.patch_w)
        grads.patch_w += dw_t + dw_s
        grads.patch_b += db_t + db_s

        breakdown = LossBreakdown(*totals)
        return breakdown, flatten_params(grads)

    # -- inference protocol used by the tracker -----------------------------

    def template_states(self, template: np.ndarray, box: Box,
                        states: list[BlockState] | None,
                        ordinal: int) -> list[BlockState]:
        """Scan one template crop (seeded by ``states`` or by the learnable
        initial states) and return the per-block propagated states."""
        cfg, prm = self.cfg, self.params
        tok = patch_embed(template.astype(prm.patch_w.dtype), cfg.patch,
                          prm.patch_w, prm.patch_b)
        mask = target_mask(box, cfg.template_size, cfg.patch)
        e_b = np.where(mask[:, None], prm.embed.e_b_in, prm.embed.e_b_out)
        tok = tok + prm.embed.e_t + e_b + prm.embed.e_a[ordinal % cfg.max_templates]
        seq = FrameSequence(tok, (cfg.l_template,))
        _, states_out = backbone_forward(seq, states, prm.blocks)
        return states_out

    def search_maps(self, search: np.ndarray,
                    states: list[BlockState]) -> tuple[HeadMaps, list[BlockState]]:
        cfg, prm = self.cfg, self.params
        tok = patch_embed(search.astype(prm.patch_w.dtype), cfg.patch,
                          prm.patch_w, prm.patch_b)
        tok = tok + prm.embed.e_s
        seq = FrameSequence(tok, (cfg.l_search,))
        feats, states_out = backbone_forward(seq, states, prm.blocks)
        maps = head_forward(feats, cfg.search_grid, prm.head)
        return maps, states_out

    def search_box(self, search: np.ndarray,
                   states: list[BlockState]) -> tuple[Box, float]:
        """Locate the target in a search crop: decoded box in crop pixels
        plus the classification peak value."""
        maps, _ = self.search_maps(search, states)
        box = decode_box(maps, self.cfg.patch,
                         (self.cfg.search_size, self.cfg.search_size),
                         self.cfg.size_axis_swap)
        return box, float(np.max(maps.cls))

    def initial_states(self) -> None:
        return None
