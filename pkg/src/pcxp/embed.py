"""Input representations: point patches and image patches become token rows.

Point side: farthest-point sampling picks patch centroids, kNN gathers each
patch, and a two-stage set encoder (pointwise MLP + max-pool, twice) turns
every patch into one token. A small MLP on the centroid coordinates supplies
position information; the class token sits at position (0, 0, 0).

Image side: non-overlapping square patches in row-major order, flattened
pixel-major with channels interleaved, linearly projected, plus a learned
per-slot position table.

Both sequences get a modality-type embedding added to every token; that type
row is the only thing distinguishing otherwise identical token content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .geom import PointCloud, farthest_point_sample, knn_group
from .params import ParamStore
from .rng import Rng
from .tensor import Tensor

POINT = "point"
IMAGE = "image"


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, seq_len, d_model)
    modality: str


def seq_check(seq: TokenSequence, cfg: ModelConfig):
    want = cfg.point_seq_len if seq.modality == POINT else cfg.image_seq_len
    if seq.tokens.shape[-2] != want:
        raise ValueError(f"{seq.modality} sequence length {seq.tokens.shape[-2]}, expected {want}")


# parameters ----------------------------------------------------------------------


def embed_param_specs(cfg: ModelConfig) -> list:
    """(name, shape, owner, init) rows; materialized by the model builder."""
    f1h, d, ph = cfg.f1_hidden, cfg.d_model, cfg.pos_hidden
    pdim = cfg.patch * cfg.patch * cfg.channels
    return [
        ("embed.point.f1.w0", (6, f1h), "point", "tn"),
        ("embed.point.f1.b0", (f1h,), "point", "zeros"),
        ("embed.point.f1.w1", (f1h, f1h), "point", "tn"),
        ("embed.point.f1.b1", (f1h,), "point", "zeros"),
        ("embed.point.f2.w0", (3 + f1h, d), "point", "tn"),
        ("embed.point.f2.b0", (d,), "point", "zeros"),
        ("embed.point.f2.w1", (d, d), "point", "tn"),
        ("embed.point.f2.b1", (d,), "point", "zeros"),
        ("embed.point.pos.w0", (3, ph), "point", "tn"),
        ("embed.point.pos.b0", (ph,), "point", "zeros"),
        ("embed.point.pos.w1", (ph, d), "point", "tn"),
        ("embed.point.pos.b1", (d,), "point", "zeros"),
        ("embed.point.cls", (1, 1, d), "point", "tn"),
        ("embed.point.type", (d,), "point", "tn"),
        ("embed.image.proj", (pdim, d), "image", "tn"),
        ("embed.image.cls", (1, 1, d), "image", "tn"),
        ("embed.image.type", (d,), "image", "tn"),
        ("embed.image.pos", (cfg.image_seq_len, d), "image", "tn"),
    ]


class EmbedView:
    """Name-resolved handles into the store for the embedding parameters."""

    def __init__(self, store: ParamStore):
        g = store.__getitem__
        self.f1 = (g("embed.point.f1.w0"), g("embed.point.f1.b0"), g("embed.point.f1.w1"), g("embed.point.f1.b1"))
        self.f2 = (g("embed.point.f2.w0"), g("embed.point.f2.b0"), g("embed.point.f2.w1"), g("embed.point.f2.b1"))
        self.pos = (g("embed.point.pos.w0"), g("embed.point.pos.b0"), g("embed.point.pos.w1"), g("embed.point.pos.b1"))
        self.cls_p = g("embed.point.cls")
        self.type_p = g("embed.point.type")
        self.proj_i = g("embed.image.proj")
        self.cls_i = g("embed.image.cls")
        self.type_i = g("embed.image.type")
        self.pos_i = g("embed.image.pos")

    @property
    def dtype(self):
        # the whole forward graph runs at the store's precision
        return self.cls_p.dtype


def mlp2(x: Tensor, w0, b0, w1, b1) -> Tensor:
    return T.matmul(T.gelu(T.matmul(x, w0) + b0), w1) + b1


# point side ----------------------------------------------------------------------


def tokenize_cloud(cloud: PointCloud, cfg: ModelConfig, token_seed: int):
    """FPS + kNN grouping; returns (groups, centroids) as float32 arrays."""
    if cloud.points.shape[0] < cfg.group_size:
        raise ValueError(
            f"cloud has {cloud.points.shape[0]} points, fewer than group size {cfg.group_size}"
        )
    rng = Rng(token_seed)
    idx = farthest_point_sample(cloud, cfg.n_point_patches, rng)
    pg = knn_group(cloud, idx, cfg.group_size)
    return pg.groups, pg.centroids


def batch_tokenize(clouds, cfg: ModelConfig, token_seeds):
    groups = np.empty((len(clouds), cfg.n_point_patches, cfg.group_size + 1, 3), np.float32)
    centroids = np.empty((len(clouds), cfg.n_point_patches, 3), np.float32)
    for i, (cloud, seed) in enumerate(zip(clouds, token_seeds)):
        groups[i], centroids[i] = tokenize_cloud(cloud, cfg, seed)
    return groups, centroids


def point_patch_embed(groups: np.ndarray, centroids: np.ndarray, view: EmbedView) -> Tensor:
    """Two-stage set encoder over each patch; order-invariant via max-pool.

    Stage one sees (absolute ; centroid-relative) coordinates and pools to a
    patch sketch; stage two sees (absolute ; sketch) and pools to the token.
    """
    groups = np.asarray(groups, view.dtype)
    centroids = np.asarray(centroids, view.dtype)
    g = Tensor(groups)
    rel = g - Tensor(centroids[:, :, None, :])
    x1 = T.concat([g, rel], axis=-1)
    h = mlp2(x1, *view.f1)
    sketch = T.max_reduce(h, axis=2)  # (B, NP, f1_hidden)
    k1 = groups.shape[2]
    sk = T.broadcast_to(sketch.reshape((sketch.shape[0], sketch.shape[1], 1, sketch.shape[2])),
                        (sketch.shape[0], sketch.shape[1], k1, sketch.shape[2]))
    x2 = T.concat([g, sk], axis=-1)
    return T.max_reduce(mlp2(x2, *view.f2), axis=2)  # (B, NP, d_model)


def assemble_sequence(patch_tokens: Tensor, cls: Tensor, pos: Tensor, type_vec: Tensor, modality: str) -> TokenSequence:
    b = patch_tokens.shape[0]
    d = patch_tokens.shape[-1]
    cls_row = T.broadcast_to(cls, (b, 1, d))
    tokens = T.concat([cls_row, patch_tokens], axis=1)
    return TokenSequence(tokens + pos + type_vec, modality)


def point_input_repr_batch(groups: np.ndarray, centroids: np.ndarray, view: EmbedView, cfg: ModelConfig) -> TokenSequence:
    emb = point_patch_embed(groups, centroids, view)
    b = centroids.shape[0]
    ext = np.concatenate([np.zeros((b, 1, 3), view.dtype), np.asarray(centroids, view.dtype)], axis=1)
    pos = mlp2(Tensor(ext), *view.pos)  # class token carries the origin's position
    seq = assemble_sequence(emb, view.cls_p, pos, view.type_p, POINT)
    seq_check(seq, cfg)
    return seq


def point_input_repr(cloud: PointCloud, view: EmbedView, cfg: ModelConfig, rng: Rng) -> TokenSequence:
    """Single-cloud convenience: tokenized with a seed drawn from rng."""
    token_seed = int(rng.integers(2**63 - 1))
    groups, centroids = batch_tokenize([cloud], cfg, [token_seed])
    return point_input_repr_batch(groups, centroids, view, cfg)


# image side ----------------------------------------------------------------------


def image_patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major everywhere."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not tile {h}x{w}")
    ph, pw = h // patch, w // patch
    x = images.reshape(b, ph, patch, pw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, ph * pw, patch * patch * c)


def image_input_repr(images: np.ndarray, view: EmbedView, cfg: ModelConfig) -> TokenSequence:
    patches = image_patchify(np.asarray(images, view.dtype), cfg.patch)
    z = T.matmul(Tensor(patches), view.proj_i)  # linear projection, no bias
    seq = assemble_sequence(z, view.cls_i, view.pos_i, view.type_i, IMAGE)
    seq_check(seq, cfg)
    return seq
