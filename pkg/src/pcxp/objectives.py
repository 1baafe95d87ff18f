"""Self-supervised objectives over class-token representations.

Three terms, summed unweighted:
  cm  - symmetric InfoNCE between projected point and image tokens,
  im  - symmetric InfoNCE between a cloud and its y-rotated twin,
  reg - rotation identification: the difference of the twin projections,
        linearly mapped and L2-normalized, should match the one-hot angle
        bin; the penalty is one minus their dot product, averaged.

Temperature is fixed; both InfoNCE directions are averaged so each batch
row contributes twice. Terms can be disabled individually; in trace mode a
disabled term is still evaluated, but on detached inputs so it cannot leak
gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Model, cls_token, encode
from .config import ModelConfig
from .embed import batch_tokenize, image_input_repr, mlp2, point_input_repr_batch
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


def head_param_specs(cfg: ModelConfig) -> list:
    d, dp = cfg.d_model, cfg.d_proj
    rows = []
    for side in ("point", "image"):
        rows += [
            (f"head.{side}.w0", (d, d), "heads", "tn"),
            (f"head.{side}.b0", (d,), "heads", "zeros"),
            (f"head.{side}.w1", (d, dp), "heads", "tn"),
            (f"head.{side}.b1", (dp,), "heads", "zeros"),
        ]
    rows += [
        ("head.angle.w", (dp, cfg.n_angle_bins), "heads", "tn"),
        ("head.angle.b", (cfg.n_angle_bins,), "heads", "zeros"),
    ]
    return rows


class HeadView:
    def __init__(self, store):
        g = store.__getitem__
        self.point = tuple(g(f"head.point.{n}") for n in ("w0", "b0", "w1", "b1"))
        self.image = tuple(g(f"head.image.{n}") for n in ("w0", "b0", "w1", "b1"))
        self.angle = (g("head.angle.w"), g("head.angle.b"))


def project(cls: Tensor, head: tuple) -> Tensor:
    """Standardize, two-layer MLP, then L2 normalization onto the unit sphere.

    The entry standardization keeps the head input O(1) whatever scale the
    encoder emits, which matters most right after initialization.
    """
    h = mlp2(T.standardize(cls), *head)
    dead = int((np.abs(h.data).sum(axis=-1) == 0.0).sum())
    if dead:
        log.warning("projection head produced %d all-zero rows (degenerate input)", dead)
    return T.l2_normalize(h, axis=-1)


# loss terms ---------------------------------------------------------------------


def contrastive_loss(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE; a[i] and b[i] are the positive pair.

    Mean over both softmax directions of the negative diagonal
    log-likelihood at temperature tau.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = a.shape[0]
    sim = T.matmul(a, b.swapaxes(0, 1)) * float(1.0 / tau)
    diag = np.arange(n)
    fwd = T.take_rows(T.log_softmax(sim, axis=-1), diag)
    bwd = T.take_rows(T.log_softmax(sim.swapaxes(0, 1), axis=-1), diag)
    return (T.mean_(fwd) + T.mean_(bwd)) * -0.5


def angle_bin(theta_deg, n_bins: int) -> np.ndarray:
    """Index of the bin containing theta; bins tile [0, 360) evenly."""
    t = np.asarray(theta_deg, dtype=np.float64)
    return (np.floor(t / (360.0 / n_bins)).astype(np.int64)) % n_bins


def angle_onehot(theta_deg, n_bins: int) -> np.ndarray:
    bins = np.atleast_1d(angle_bin(theta_deg, n_bins))
    out = np.zeros((bins.shape[0], n_bins), dtype=np.float32)
    out[np.arange(bins.shape[0]), bins] = 1.0
    return out


def regression_loss(h: Tensor, h_prime: Tensor, target_onehot: np.ndarray, angle_head: tuple) -> Tensor:
    """mean(1 - <target, normalize(W (h - h'))>) over the batch."""
    w, b = angle_head
    pred = T.l2_normalize(T.matmul(h - h_prime, w) + b, axis=-1)
    agree = T.sum_(pred * Tensor(np.asarray(target_onehot, h.dtype)), axis=-1)
    return 1.0 + T.mean_(agree) * -1.0


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return T.mean_(T.take_rows(T.log_softmax(logits, axis=-1), labels)) * -1.0


# batch loss ----------------------------------------------------------------------


@dataclass
class LossBundle:
    l_cm: float | None
    l_im: float | None
    l_reg: float | None
    total: Tensor | None  # gradient-carrying sum of the enabled terms

    @property
    def total_value(self) -> float | None:
        return None if self.total is None else self.total.item()


def total_loss(
    model: Model,
    triplets,
    enabled=("cm", "im", "reg"),
    trace_all: bool = False,
    cached_image_cls: np.ndarray | None = None,
) -> LossBundle:
    """Full objective over a batch of triplets.

    The original and rotated clouds are encoded as one stacked batch.
    cached_image_cls short-circuits the image tower; that is only valid
    while every image-path parameter is frozen (the caller asserts so).
    """
    cfg = model.cfg
    heads = HeadView(model.store)
    need_image = "cm" in enabled or trace_all
    b = len(triplets)

    clouds = [t.cloud for t in triplets] + [t.rotated for t in triplets]
    seeds = [t.token_seed for t in triplets] * 2
    groups, centroids = batch_tokenize(clouds, cfg, seeds)
    seq = point_input_repr_batch(groups, centroids, model.embed, cfg)
    out = cls_token(encode(seq, model))
    h = project(out[:b], heads.point)
    h_prime = project(out[b:], heads.point)

    h_img = None
    if need_image:

        def image_side():
            if cached_image_cls is None:
                images = np.stack([t.image.data for t in triplets])
                img_cls = cls_token(encode(image_input_repr(images, model.embed, cfg), model))
            else:
                img_cls = Tensor(np.asarray(cached_image_cls, model.embed.dtype))
            return project(img_cls, heads.image)

        if "cm" in enabled:
            h_img = image_side()
        else:  # trace only: skip graph recording entirely
            with no_grad():
                h_img = image_side()

    def term(name, fn):
        if name in enabled:
            return fn(False)
        if trace_all:
            with no_grad():
                return fn(True)
        return None

    onehot = angle_onehot([t.theta_deg for t in triplets], cfg.n_angle_bins)
    l_cm = term("cm", lambda det: contrastive_loss(h.detach() if det else h, h_img.detach() if det else h_img, cfg.tau))
    l_im = term("im", lambda det: contrastive_loss(h.detach() if det else h, h_prime.detach() if det else h_prime, cfg.tau))
    l_reg = term("reg", lambda det: regression_loss(h.detach() if det else h, h_prime.detach() if det else h_prime, onehot, heads.angle))

    parts = [v for name, v in (("cm", l_cm), ("im", l_im), ("reg", l_reg)) if name in enabled and v is not None]
    total = None
    if parts:
        total = parts[0]
        for p in parts[1:]:
            total = total + p
    return LossBundle(
        l_cm=None if l_cm is None else l_cm.item(),
        l_im=None if l_im is None else l_im.item(),
        l_reg=None if l_reg is None else l_reg.item(),
        total=total,
    )
