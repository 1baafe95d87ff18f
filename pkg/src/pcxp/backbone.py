"""Transformer trunk: shared multi-head self-attention, per-modality experts.

Every block applies shared pre-norm attention with a residual, then routes
the result through the expert (LayerNorm + feed-forward) belonging to the
sequence's modality, with a second residual. In "shared" mode both
modalities pass through the same attention parameters; in "separate" mode
the point path gets its own full-width tower (own attention, own FFN) and
only the image path uses the shared trunk.

Ownership determines freezing: after image warm-up the shared and image
parameters are frozen, and self-supervised training updates only the
point-owned and head-owned parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .embed import IMAGE, POINT, EmbedView, TokenSequence, embed_param_specs, mlp2
from .params import ParamCount, ParamStore, count_params
from .rng import Rng
from .tensor import Tensor

SSRL_TRAINABLE_OWNERS = ("point", "heads")
WARMUP_TRAINABLE_OWNERS = ("shared", "image")
FROZEN_OWNERS = WARMUP_TRAINABLE_OWNERS  # frozen during the self-supervised stage


@dataclass
class BlockParams:
    ln_attn: tuple  # (gain, bias)
    attn: tuple  # (wq, bq, wk, bk, wv, bv, wo, bo)
    experts: dict  # modality -> (ln_gain, ln_bias, w0, b0, w1, b1)


def block_param_specs(cfg: ModelConfig) -> list:
    d = cfg.d_model
    specs = []
    for i in range(cfg.n_blocks):
        p = f"block{i:02d}."
        specs += [
            (p + "ln_attn.gain", (d,), "shared", "ones"),
            (p + "ln_attn.bias", (d,), "shared", "zeros"),
        ]
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            specs.append((p + f"attn.{w}", (d, d), "shared", "tn"))
            specs.append((p + f"attn.{b}", (d,), "shared", "zeros"))
        for mod, hidden, owner in ((POINT, cfg.d_expert, "point"), (IMAGE, cfg.ffn_mult_image * d, "image")):
            q = f"{p}{mod}."
            specs += [
                (q + "ln.gain", (d,), owner, "ones"),
                (q + "ln.bias", (d,), owner, "zeros"),
                (q + "ffn.w0", (d, hidden), owner, "tn"),
                (q + "ffn.b0", (hidden,), owner, "zeros"),
                (q + "ffn.w1", (hidden, d), owner, "tn"),
                (q + "ffn.b1", (d,), owner, "zeros"),
            ]
    if cfg.sharing == "separate":
        hidden = cfg.ffn_mult_image * d
        for i in range(cfg.n_blocks):
            p = f"sep{i:02d}."
            specs += [
                (p + "ln_attn.gain", (d,), "point", "ones"),
                (p + "ln_attn.bias", (d,), "point", "zeros"),
            ]
            for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
                specs.append((p + f"attn.{w}", (d, d), "point", "tn"))
                specs.append((p + f"attn.{b}", (d,), "point", "zeros"))
            specs += [
                (p + "point.ln.gain", (d,), "point", "ones"),
                (p + "point.ln.bias", (d,), "point", "zeros"),
                (p + "point.ffn.w0", (d, hidden), "point", "tn"),
                (p + "point.ffn.b0", (hidden,), "point", "zeros"),
                (p + "point.ffn.w1", (hidden, d), "point", "tn"),
                (p + "point.ffn.b1", (d,), "point", "zeros"),
            ]
    return specs


def model_param_specs(cfg: ModelConfig) -> list:
    from .objectives import head_param_specs  # late import; objectives builds on this module

    return embed_param_specs(cfg) + block_param_specs(cfg) + head_param_specs(cfg)


def count_model_params(cfg: ModelConfig, phase: str = "ssrl") -> ParamCount:
    """Parameter accounting straight from shapes; nothing is allocated.

    phase picks the freeze rule: 'ssrl' trains point + heads owners,
    'warmup' trains shared + image owners.
    """
    owners = SSRL_TRAINABLE_OWNERS if phase == "ssrl" else WARMUP_TRAINABLE_OWNERS
    rows = [
        (name, shape, owner, owner in owners)
        for name, shape, owner, _init in model_param_specs(cfg)
    ]
    return count_params(rows)


# model ---------------------------------------------------------------------------


@dataclass
class Model:
    cfg: ModelConfig
    store: ParamStore
    embed: EmbedView
    blocks: list
    sep_blocks: list = field(default_factory=list)

    def blocks_for(self, modality: str) -> list:
        if self.cfg.sharing == "separate" and modality == POINT:
            return self.sep_blocks
        return self.blocks


def _block_views(store: ParamStore, prefix: str, modalities) -> BlockParams:
    g = store.__getitem__
    return BlockParams(
        ln_attn=(g(prefix + "ln_attn.gain"), g(prefix + "ln_attn.bias")),
        attn=tuple(
            g(prefix + f"attn.{n}") for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        ),
        experts={
            mod: tuple(
                g(f"{prefix}{mod}.{n}")
                for n in ("ln.gain", "ln.bias", "ffn.w0", "ffn.b0", "ffn.w1", "ffn.b1")
            )
            for mod in modalities
        },
    )


def model_from_store(cfg: ModelConfig, store: ParamStore) -> Model:
    """Wrap an already-populated store (checkpoint load, precision twin)."""
    blocks = [_block_views(store, f"block{i:02d}.", (POINT, IMAGE)) for i in range(cfg.n_blocks)]
    sep = []
    if cfg.sharing == "separate":
        sep = [_block_views(store, f"sep{i:02d}.", (POINT,)) for i in range(cfg.n_blocks)]
    return Model(cfg, store, EmbedView(store), blocks, sep)


def build_model(cfg: ModelConfig, rng: Rng) -> Model:
    """Materialize every parameter in spec order from one derived stream."""
    store = ParamStore()
    init = rng.child("init")
    for name, shape, owner, kind in model_param_specs(cfg):
        if kind == "tn":
            data = init.trunc_normal(shape, cfg.init_std)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store.add(name, data, owner)
    return model_from_store(cfg, store)


def set_phase(store: ParamStore, phase: str):
    """Flip trainable flags for 'warmup' (image tower) or 'ssrl' (experts+heads)."""
    if phase == "warmup":
        store.set_trainable_owners(WARMUP_TRAINABLE_OWNERS)
    elif phase == "ssrl":
        store.set_trainable_owners(SSRL_TRAINABLE_OWNERS)
    else:
        raise ValueError(f"unknown phase {phase!r}")


# forward ---------------------------------------------------------------------------


def msa_forward(seq: TokenSequence, bp: BlockParams, cfg: ModelConfig) -> Tensor:
    """Pre-norm multi-head self-attention with a residual connection."""
    x = seq.tokens
    b, t, d = x.shape
    nh, dh = cfg.n_heads, cfg.d_head
    gain, bias = bp.ln_attn
    wq, bq, wk, bk, wv, bv, wo, bo = bp.attn
    h = T.layernorm(x, gain, bias, cfg.ln_eps)

    def heads(w, bvec):
        proj = T.matmul(h, w) + bvec
        return proj.reshape((b, t, nh, dh)).swapaxes(1, 2)

    q, k, v = heads(wq, bq), heads(wk, bk), heads(wv, bv)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * float(1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v).swapaxes(1, 2).reshape((b, t, d))
    return T.matmul(ctx, wo) + bo + x


def block_forward(seq: TokenSequence, bp: BlockParams, cfg: ModelConfig) -> TokenSequence:
    """Shared attention, then the expert FFN owned by the sequence's modality."""
    y = msa_forward(seq, bp, cfg)
    ln_g, ln_b, w0, b0, w1, b1 = bp.experts[seq.modality]
    h = T.layernorm(y, ln_g, ln_b, cfg.ln_eps)
    return TokenSequence(mlp2(h, w0, b0, w1, b1) + y, seq.modality)


def encode(seq: TokenSequence, model: Model) -> TokenSequence:
    for bp in model.blocks_for(seq.modality):
        seq = block_forward(seq, bp, model.cfg)
    return seq


def cls_token(seq: TokenSequence) -> Tensor:
    return seq.tokens[:, 0, :]
