"""Downstream evaluation of a pre-trained checkpoint.

Three fine-tuning protocols with strictly scoped trainable sets:

  linear - one affine layer on frozen class-token features,
  mlp3   - a three-layer GELU head on the same frozen features,
  full   - the three-layer head plus every point-owned backbone parameter.

The two frozen protocols precompute features once, then train only the
head; 'full' re-encodes every batch. Few-shot evaluation runs episodic
w-way s-shot classification over the test split with per-episode seeds.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os

import numpy as np

from . import tensor as T
from .backbone import Model, cls_token, encode, model_from_store, model_param_specs, set_phase
from .config import Settings
from .embed import batch_tokenize, point_input_repr_batch
from .errors import CheckpointError, DataError
from .params import ParamStore, load_store, save_store
from .rng import Rng
from .tensor import Tensor, matmul, no_grad
from .train import AdamW, clip_global_norm, lr_at
from .objectives import cross_entropy

log = logging.getLogger(__name__)

PROTOCOLS = ("full", "linear", "mlp3")


# feature extraction ---------------------------------------------------------------


def sample_token_seed(eval_seed: int, split: str, index: int, fps_seeding: str) -> int:
    """Stable per-sample tokenizer seed; 'fixed' collapses them all to zero."""
    if fps_seeding == "fixed":
        return 0
    return int(Rng(eval_seed).child("tok", split, str(index)).integers(2**63 - 1))


def extract_cls(model: Model, samples, settings: Settings, batch: int = 64) -> np.ndarray:
    """Standardized class-token features for a list of samples, (N, D)."""
    cfg = settings.model
    seeds = [
        sample_token_seed(settings.eval.seed, s.split, s.index, settings.train.fps_seeding)
        for s in samples
    ]
    feats = []
    with no_grad():
        for i in range(0, len(samples), batch):
            part = samples[i : i + batch]
            groups, cents = batch_tokenize([s.cloud for s in part], cfg, seeds[i : i + batch])
            seq = point_input_repr_batch(groups, cents, model.embed, cfg)
            feats.append(T.standardize(cls_token(encode(seq, model))).data)
    return np.concatenate(feats, axis=0)


# protocol heads -------------------------------------------------------------------


def head_param_rows(protocol: str, d: int, n_classes: int, rng: Rng, init_std: float):
    if protocol == "linear":
        return [
            ("clf.w", rng.trunc_normal((d, n_classes), init_std)),
            ("clf.b", np.zeros(n_classes)),
        ]
    if protocol in ("mlp3", "full"):
        return [
            ("clf.w0", rng.trunc_normal((d, d), init_std)),
            ("clf.b0", np.zeros(d)),
            ("clf.w1", rng.trunc_normal((d, d), init_std)),
            ("clf.b1", np.zeros(d)),
            ("clf.w2", rng.trunc_normal((d, n_classes), init_std)),
            ("clf.b2", np.zeros(n_classes)),
        ]
    raise ValueError(f"unknown protocol {protocol!r}")


def build_head(protocol: str, d: int, n_classes: int, rng: Rng, init_std: float) -> ParamStore:
    head = ParamStore()
    for name, data in head_param_rows(protocol, d, n_classes, rng, init_std):
        head.add(name, data, "heads")
    return head


def head_logits(head: ParamStore, feats: Tensor, protocol: str) -> Tensor:
    if protocol == "linear":
        return matmul(feats, head["clf.w"]) + head["clf.b"]
    h = T.gelu(matmul(feats, head["clf.w0"]) + head["clf.b0"])
    h = T.gelu(matmul(h, head["clf.w1"]) + head["clf.b1"])
    return matmul(h, head["clf.w2"]) + head["clf.b2"]


def head_trainable_count(protocol: str, d: int, n_classes: int) -> int:
    rows = head_param_rows(protocol, d, n_classes, Rng(0), 0.02)
    return sum(int(np.prod(v.shape)) for _n, v in rows)


# fine-tuning ----------------------------------------------------------------------


def _full_forward(model: Model, samples, seeds, head: ParamStore) -> Tensor:
    groups, cents = batch_tokenize([s.cloud for s in samples], model.cfg, seeds)
    seq = point_input_repr_batch(groups, cents, model.embed, model.cfg)
    feats = T.standardize(cls_token(encode(seq, model)))
    return head_logits(head, feats, "full")


def finetune(model: Model, dataset, protocol: str, settings: Settings) -> ParamStore:
    """Train the protocol's trainable set on the train split; returns the head.

    linear/mlp3 freeze the whole backbone and fit the head on precomputed
    features; full unfreezes the point-owned parameters as well. The model
    store is mutated only under the full protocol.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    ev, cfg = settings.eval, settings.model
    train_s = dataset.split("train")
    if not train_s:
        raise DataError("fine-tuning needs a train split")
    rng = Rng(ev.seed).child("finetune", protocol)
    head = build_head(protocol, cfg.d_model, dataset.n_classes, rng.child("head"), cfg.init_std)
    labels = np.asarray([s.label for s in train_s], np.int64)
    n = len(train_s)
    spe = max(n // ev.batch_size, 1)
    total = ev.epochs * spe

    if protocol == "full":
        set_phase(model.store, "ssrl")  # point + heads owners trainable
        trainables = [
            (nm, p) for nm, p in model.store.trainable_items() if p.owner == "point"
        ] + head.trainable_items()
        seeds = [
            sample_token_seed(ev.seed, s.split, s.index, settings.train.fps_seeding)
            for s in train_s
        ]
    else:
        trainables = head.trainable_items()
        feats = extract_cls(model, train_s, settings)

    opt = AdamW(trainables, weight_decay=ev.weight_decay)
    step = 0
    for epoch in range(ev.epochs):
        order = rng.child("order", str(epoch)).permutation(n)
        for s in range(spe):
            idx = order[s * ev.batch_size : (s + 1) * ev.batch_size]
            if protocol == "full":
                batch = [train_s[i] for i in idx]
                logits = _full_forward(model, batch, [seeds[i] for i in idx], head)
            else:
                logits = head_logits(head, Tensor(feats[idx]), protocol)
            loss = cross_entropy(logits, labels[idx])
            loss.backward()
            clip_global_norm(trainables, settings.train.clip_norm)
            opt.step(lr_at(step, total, ev.lr, ev.warmup_steps))
            head.zero_grads()
            model.store.zero_grads()
            step += 1
    return head


# evaluation -----------------------------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    protocol: str
    oa_pct: float
    correct: int
    total: int
    per_class: dict
    seed: int
    config_hash: str
    episodes: dict | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1) + "\n"


def evaluate(model: Model, head: ParamStore, dataset, split: str, settings: Settings, protocol: str) -> EvalReport:
    """Argmax classification over a split; exact integer accounting."""
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"empty split {split!r}")
    labels = np.asarray([s.label for s in samples], np.int64)
    feats = extract_cls(model, samples, settings)
    with no_grad():
        logits = head_logits(head, Tensor(feats), "full" if protocol == "full" else protocol)
    pred = np.argmax(logits.data, axis=-1)
    correct = int((pred == labels).sum())
    per_class = {}
    for c, name in enumerate(dataset.class_names):
        mask = labels == c
        if mask.any():
            per_class[name] = round(100.0 * float((pred[mask] == c).mean()), 4)
    return EvalReport(
        protocol=protocol,
        oa_pct=round(100.0 * correct / len(samples), 4),
        correct=correct,
        total=len(samples),
        per_class=per_class,
        seed=settings.eval.seed,
        config_hash=settings.config_hash(),
    )


# few-shot episodes ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EpisodeSpec:
    way: int
    shot: int
    query: int
    episodes: int


def few_shot(model: Model, dataset, spec: EpisodeSpec, settings: Settings) -> EvalReport:
    """w-way s-shot episodes over the test split with a linear head each.

    Features are extracted once; each episode samples disjoint support and
    query sets, fits a fresh head on the support, and scores the queries.
    """
    test_s = dataset.split("test")
    if not test_s:
        raise DataError("few-shot evaluation needs a test split")
    by_class = {}
    for i, s in enumerate(test_s):
        by_class.setdefault(s.label, []).append(i)
    min_count = min(len(v) for v in by_class.values())
    if spec.way > len(by_class):
        raise DataError(f"{spec.way}-way exceeds {len(by_class)} available classes")
    if spec.shot + spec.query > min_count:
        raise DataError(
            f"shot+query ({spec.shot}+{spec.query}) exceeds smallest class ({min_count})"
        )
    if spec.episodes < 1:
        raise DataError("need at least one episode")

    ev, cfg = settings.eval, settings.model
    feats = extract_cls(model, test_s, settings)
    class_ids = sorted(by_class)
    accs = []
    for e in range(spec.episodes):
        er = Rng(ev.seed).child("episode", str(e))
        chosen = [class_ids[int(i)] for i in er.child("way").choice(len(class_ids), spec.way, replace=False)]
        sup_idx, sup_y, qry_idx, qry_y = [], [], [], []
        for new_label, c in enumerate(chosen):
            pool = by_class[c]
            perm = er.child("cls", str(c)).permutation(len(pool))
            take = [pool[int(j)] for j in perm[: spec.shot + spec.query]]
            sup_idx += take[: spec.shot]
            sup_y += [new_label] * spec.shot
            qry_idx += take[spec.shot :]
            qry_y += [new_label] * spec.query

        head = build_head("linear", cfg.d_model, spec.way, er.child("head"), cfg.init_std)
        trainables = head.trainable_items()
        opt = AdamW(trainables, weight_decay=ev.weight_decay)
        x = Tensor(feats[sup_idx])
        y = np.asarray(sup_y, np.int64)
        total = max(ev.epochs * 2, 2)
        for step in range(total):  # full-batch on the tiny support set
            loss = cross_entropy(head_logits(head, x, "linear"), y)
            loss.backward()
            clip_global_norm(trainables, settings.train.clip_norm)
            opt.step(lr_at(step, total, ev.lr, ev.warmup_steps))
            head.zero_grads()
        with no_grad():
            pred = np.argmax(head_logits(head, Tensor(feats[qry_idx]), "linear").data, axis=-1)
        accs.append(100.0 * float((pred == np.asarray(qry_y)).mean()))

    mean = float(np.mean(accs))
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    report = EvalReport(
        protocol="fewshot-linear",
        oa_pct=round(mean, 4),
        correct=-1,
        total=spec.way * spec.query * spec.episodes,
        per_class={},
        seed=ev.seed,
        config_hash=settings.config_hash(),
        episodes={
            "way": spec.way,
            "shot": spec.shot,
            "query": spec.query,
            "count": spec.episodes,
            "mean_pct": round(mean, 4),
            "std_pct": round(std, 4),
            "per_episode_pct": [round(a, 4) for a in accs],
        },
    )
    return report


# checkpoint plumbing --------------------------------------------------------------


def load_backbone(path: str, settings: Settings) -> Model:
    """Checkpoint -> Model, validating names and shapes against the preset."""
    store = load_store(path)
    cfg = settings.model
    expected = {name: tuple(shape) for name, shape, _o, _i in model_param_specs(cfg)}
    got = {n: tuple(p.tensor.data.shape) for n, p in store.items() if not n.startswith("clf.")}
    if got != expected:
        missing = sorted(set(expected) - set(got))[:3]
        extra = sorted(set(got) - set(expected))[:3]
        raise CheckpointError(
            f"{path} does not match preset {cfg.preset!r}"
            f" (missing {missing}, unexpected {extra})"
        )
    backbone = ParamStore()
    for name, p in store.items():
        if not name.startswith("clf."):
            backbone.add(name, p.tensor.data, p.owner, p.trainable)
    return model_from_store(cfg, backbone)


def split_finetuned(path: str, settings: Settings):
    """A finetuned container holds backbone plus clf.* head; split them."""
    store = load_store(path)
    head = ParamStore()
    for name, p in store.items():
        if name.startswith("clf."):
            head.add(name, p.tensor.data, p.owner, p.trainable)
    if not len(head):
        raise CheckpointError(f"{path} holds no classifier head")
    model = load_backbone(path, settings)
    return model, head


def save_finetuned(path: str, model: Model, head: ParamStore):
    merged = ParamStore()
    for name, p in model.store.items():
        merged.add(name, p.tensor.data, p.owner, p.trainable)
    for name, p in head.items():
        merged.add(name, p.tensor.data, p.owner, p.trainable)
    save_store(path, merged)


def infer_protocol(head: ParamStore) -> str:
    return "linear" if "clf.w" in head else "mlp3"
