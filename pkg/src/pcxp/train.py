"""Pre-training driver.

Two stages. First the image tower (shared attention plus image experts) is
warmed up on a supervised surrogate task, classifying rendered views, then
frozen. Second, the self-supervised stage trains only the point-owned
parameters and the projection heads against the frozen tower.

Everything downstream of the seed is deterministic: per-epoch RNG streams
are re-derived from (seed, epoch), so resuming from a checkpoint at an
epoch boundary reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os

import numpy as np

from . import kernels
from .backbone import FROZEN_OWNERS, Model, build_model, cls_token, encode, model_from_store, set_phase
from .config import Settings
from .embed import image_input_repr
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .geom import Dataset, ShapeSpec, load_dataset, synth_shape
from .objectives import cross_entropy, total_loss
from .params import ParamStore, load_into, load_store, save_store
from .render import RenderConfig, make_triplet, render_cloud
from .rng import Rng
from .tensor import Tensor, matmul, no_grad, standardize

log = logging.getLogger(__name__)

CKPT_FILE = "model.pcxp"
STATE_FILE = "state.pcxp"
TRACE_FILE = "trace.jsonl"
RUN_FILE = "run.json"
CONFIG_FILE = "config.ini"


# schedule -------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear ramp to peak over warmup_steps, then cosine decay to zero."""
    if total_steps <= warmup_steps:
        raise ConfigError(
            f"total steps ({total_steps}) must exceed warmup steps ({warmup_steps})"
        )
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


# optimizer ------------------------------------------------------------------------


def clip_global_norm(named_params, max_norm: float):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns (pre-clip norm, clipped flag). Non-finite gradients abort here
    with the offending parameter named.
    """
    sq = 0.0
    for name, p in named_params:
        g = p.tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        gf = g.ravel()
        sq += float(np.dot(gf, gf))
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        scale = np.float32(max_norm / norm)
        for _name, p in named_params:
            if p.tensor.grad is not None:
                p.tensor.grad *= scale
        return norm, True
    return norm, False


class AdamW:
    """Adaptive moments with decoupled weight decay and bias correction.

    Moment buffers exist only for the parameters handed in (the trainable
    set); parameters whose grad is None on a given step are skipped. Decay
    multiplies the parameter by (1 - lr*wd) before the moment update, so a
    zero-gradient step with wd > 0 is a pure shrink.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.01):
        self.params = list(named_params)  # [(name, Param)]
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.tensor.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.tensor.data) for n, p in self.params}

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = p.tensor.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            d = p.tensor.data
            if self.wd:
                d *= 1.0 - lr * self.wd
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            d -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def save_train_state(path: str, opt: AdamW, next_epoch: int, global_step: int):
    """Optimizer moments plus progress counters, in the checkpoint format."""
    st = ParamStore()
    for name, p in opt.params:
        st.add("adam.m." + name, opt.m[name], p.owner)
        st.add("adam.v." + name, opt.v[name], p.owner)
    st.add(
        "meta.progress",
        np.array([next_epoch, global_step, opt.t], np.float32),
        "heads",
    )
    save_store(path, st)


def load_train_state(path: str, opt: AdamW):
    """Restore moments into opt; returns (next_epoch, global_step)."""
    st = load_store(path)
    if "meta.progress" not in st:
        raise CheckpointError(f"{path}: not a training-state file")
    for name, _p in opt.params:
        for prefix, buf in (("adam.m.", opt.m), ("adam.v.", opt.v)):
            key = prefix + name
            if key not in st:
                raise CheckpointError(f"{path}: missing optimizer entry {key!r}")
            src = st[key].data
            if src.shape != buf[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {key!r}")
            buf[name][...] = src
    meta = st["meta.progress"].data
    opt.t = int(meta[2])
    return int(meta[0]), int(meta[1])


# image-tower warm-up --------------------------------------------------------------


def _render_views(samples, n_views: int, rng: Rng, rc: RenderConfig):
    """n_views random-yaw renders per sample; returns (images, labels)."""
    images, labels = [], []
    for i, s in enumerate(samples):
        vr = rng.child("views", str(i))
        for _ in range(n_views):
            theta = float(vr.uniform(0.0, 360.0))
            images.append(render_cloud(s.cloud, theta, rc).data)
            labels.append(s.label)
    return np.stack(images), np.asarray(labels, np.int64)


def _image_logits(model: Model, images: np.ndarray, head_w: Tensor, head_b: Tensor) -> Tensor:
    seq = image_input_repr(images, model.embed, model.cfg)
    return matmul(standardize(cls_token(encode(seq, model))), head_w) + head_b


def warmup_image_tower(model: Model, dataset: Dataset, settings: Settings, rng: Rng) -> dict:
    """Train shared+image parameters on view classification, then freeze them.

    The classifier head lives in its own store and is discarded afterward;
    it exists only to give the tower a supervised signal. In random-frozen
    mode no training happens: the tower freezes at its initialization.
    """
    tr, cfg = settings.train, settings.model
    if tr.surrogate == "random-frozen":
        set_phase(model.store, "ssrl")
        return {"mode": "random-frozen", "holdout_acc": None}

    train_s = dataset.split("train")
    test_s = dataset.split("test")
    if not train_s or not test_s:
        raise DataError("warm-up needs non-empty train and test splits")
    rc = RenderConfig(height=cfg.image_hw, width=cfg.image_hw)
    set_phase(model.store, "warmup")

    head = ParamStore()
    hw = head.add("warmup.head.w", rng.child("head").trunc_normal((cfg.d_model, dataset.n_classes), cfg.init_std), "heads")
    hb = head.add("warmup.head.b", np.zeros(dataset.n_classes), "heads")

    images, labels = _render_views(train_s, tr.warmup_views, rng.child("data"), rc)
    n = images.shape[0]
    spe = n // tr.batch_size
    if spe == 0:
        raise DataError(f"warm-up split too small: {n} views < batch {tr.batch_size}")
    total = tr.warmup_epochs * spe

    trainables = model.store.trainable_items() + head.trainable_items()
    opt = AdamW(trainables, tr.beta1, tr.beta2, tr.adam_eps, tr.weight_decay)
    step = 0
    first_loss = last_loss = None
    for epoch in range(tr.warmup_epochs):
        order = rng.child("order", str(epoch)).permutation(n)
        ep_losses = []
        for s in range(spe):
            idx = order[s * tr.batch_size : (s + 1) * tr.batch_size]
            loss = cross_entropy(_image_logits(model, images[idx], hw, hb), labels[idx])
            loss.backward()
            clip_global_norm(trainables, tr.clip_norm)
            opt.step(lr_at(step, total, tr.warmup_lr, tr.warmup_warmup_steps))
            model.store.zero_grads()
            head.zero_grads()
            ep_losses.append(loss.item())
            step += 1
        mean = sum(ep_losses) / len(ep_losses)
        if first_loss is None:
            first_loss = mean
        last_loss = mean
        log.info("warm-up epoch %d: mean loss %.4f", epoch, mean)

    vr = rng.child("holdout")
    test_imgs = np.stack(
        [render_cloud(s.cloud, float(vr.uniform(0.0, 360.0)), rc).data for s in test_s]
    )
    with no_grad():
        logits = _image_logits(model, test_imgs, hw, hb)
    pred = np.argmax(logits.data, axis=-1)
    acc = float((pred == np.asarray([s.label for s in test_s])).mean())
    log.info("warm-up held-out accuracy: %.3f", acc)

    set_phase(model.store, "ssrl")
    return {
        "mode": "warmup",
        "loss_first_epoch": first_loss,
        "loss_last_epoch": last_loss,
        "holdout_acc": acc,
    }


# SSRL loop ------------------------------------------------------------------------


def _epoch_triplets(samples, indices, ep_rng: Rng, rc: RenderConfig, fps_seeding: str):
    trips = []
    for i in indices:
        t = make_triplet(samples[i].cloud, ep_rng.child("trip", str(int(i))), rc)
        if fps_seeding == "fixed":
            t = dataclasses.replace(t, token_seed=0)
        trips.append(t)
    return trips


def _batch_image_cls(model: Model, trips) -> np.ndarray:
    """Class tokens of the rendered views, computed outside the graph.

    Valid while every image-path parameter is frozen: the values are
    identical to what an in-graph encode would produce, and no gradient
    may flow there anyway.
    """
    images = np.stack([t.image.data for t in trips])
    with no_grad():
        seq = image_input_repr(images, model.embed, model.cfg)
        return cls_token(encode(seq, model)).data


def pretrain(
    settings: Settings,
    data_dir: str,
    out_dir: str,
    resume: bool = False,
    stop_after: int | None = None,
) -> dict:
    """Warm-up (unless resuming) then the self-supervised loop.

    Writes into out_dir: the resolved config, a JSON-lines step trace, the
    model checkpoint, an optimizer-state sidecar, and a run summary. With
    stop_after=k the loop checkpoints and returns after epoch k, and a
    later resume=True call continues to cfg epochs with identical results.
    """
    cfg, tr = settings.model, settings.train
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(data_dir)
    train_s = dataset.split("train")
    if not train_s:
        raise DataError("dataset has no train split")

    rng = Rng(tr.seed)
    model = build_model(cfg, rng)
    rc = RenderConfig(height=cfg.image_hw, width=cfg.image_hw)

    ckpt_path = os.path.join(out_dir, CKPT_FILE)
    state_path = os.path.join(out_dir, STATE_FILE)
    trace_path = os.path.join(out_dir, TRACE_FILE)
    run_path = os.path.join(out_dir, RUN_FILE)

    n = len(train_s)
    spe = n // tr.batch_size
    if spe == 0:
        raise DataError(f"train split ({n}) smaller than batch size {tr.batch_size}")
    total_steps = tr.epochs * spe
    if total_steps <= tr.warmup_steps:
        raise ConfigError(
            f"schedule needs epochs*steps_per_epoch ({total_steps}) > warmup_steps ({tr.warmup_steps})"
        )

    run: dict = {
        "config_hash": settings.config_hash(),
        "seed": tr.seed,
        "backend": kernels.backend(),
        "losses": list(tr.losses),
        "sharing": cfg.sharing,
    }

    if resume:
        if not (os.path.exists(ckpt_path) and os.path.exists(state_path)):
            raise CheckpointError(f"nothing to resume in {out_dir}")
        load_into(ckpt_path, model.store)
        set_phase(model.store, "ssrl")
        opt = AdamW(model.store.trainable_items(), tr.beta1, tr.beta2, tr.adam_eps, tr.weight_decay)
        start_epoch, global_step = load_train_state(state_path, opt)
        try:
            with open(run_path) as fh:
                prev = json.load(fh)
            run["warmup"] = prev.get("warmup")
            run["frozen_hash"] = prev.get("frozen_hash")
        except OSError as e:
            raise CheckpointError(f"missing run summary to resume from: {e}") from e
        if run["frozen_hash"] != model.store.bytes_hash(owners=FROZEN_OWNERS):
            raise CheckpointError("frozen parameters changed between save and resume")
        trace_mode = "a"
    else:
        run["warmup"] = warmup_image_tower(model, dataset, settings, rng.child("warmup"))
        run["frozen_hash"] = model.store.bytes_hash(owners=FROZEN_OWNERS)
        opt = AdamW(model.store.trainable_items(), tr.beta1, tr.beta2, tr.adam_eps, tr.weight_decay)
        start_epoch, global_step = 0, 0
        trace_mode = "w"
        with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
            fh.write(settings.resolved_text())

    trainables = model.store.trainable_items()
    need_images = "cm" in tr.losses or tr.trace_all
    epochs_to_run = tr.epochs if stop_after is None else min(stop_after, tr.epochs)

    def save_all(next_epoch: int):
        save_store(ckpt_path, model.store)
        save_train_state(state_path, opt, next_epoch, global_step)

    last_rec = None
    with open(trace_path, trace_mode) as trace:
        for epoch in range(start_epoch, epochs_to_run):
            ep_rng = rng.child("epoch", str(epoch))
            order = ep_rng.child("order").permutation(n)
            for s in range(spe):
                idx = order[s * tr.batch_size : (s + 1) * tr.batch_size]
                trips = _epoch_triplets(train_s, idx, ep_rng, rc, tr.fps_seeding)
                img_cls = _batch_image_cls(model, trips) if need_images else None
                bundle = total_loss(model, trips, tr.losses, tr.trace_all, img_cls)
                lr = lr_at(global_step, total_steps, tr.lr, tr.warmup_steps)
                grad_norm, clipped = 0.0, False
                if bundle.total is not None:
                    bundle.total.backward()
                    grad_norm, clipped = clip_global_norm(trainables, tr.clip_norm)
                    if clipped:
                        log.info("step %d: gradient norm %.3f clipped to %.2f", global_step, grad_norm, tr.clip_norm)
                    opt.step(lr)
                    model.store.zero_grads()
                last_rec = {
                    "epoch": epoch,
                    "step": global_step,
                    "lr": lr,
                    "l_cm": bundle.l_cm,
                    "l_im": bundle.l_im,
                    "l_reg": bundle.l_reg,
                    "total": bundle.total_value,
                    "grad_norm": grad_norm,
                    "clipped": clipped,
                }
                trace.write(json.dumps(last_rec, sort_keys=True) + "\n")
                global_step += 1
            trace.flush()
            if tr.ckpt_every > 0 and (epoch + 1) % tr.ckpt_every == 0:
                save_all(epoch + 1)
            if last_rec is not None:
                log.info(
                    "epoch %d done: total %.4f lr %.2e",
                    epoch,
                    -1.0 if last_rec["total"] is None else last_rec["total"],
                    last_rec["lr"],
                )

    save_all(epochs_to_run)
    run["epochs_run"] = epochs_to_run
    run["final"] = last_rec
    with open(run_path, "w") as fh:
        fh.write(json.dumps(run, sort_keys=True, indent=1) + "\n")
    return run


# gradient checking ----------------------------------------------------------------


def gradcheck(
    settings: Settings,
    n_samples: int = 2,
    entries_per_param: int = 3,
    h: float = 1e-5,
    tol: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Central finite differences against the recorded gradients, in 64-bit.

    Every trainable parameter tensor is probed at entries_per_param
    positions. The image class tokens are cached outside the graph, which
    is exact because no probed parameter can influence them (the image
    path is frozen during the self-supervised stage).
    """
    cfg = settings.model
    rng = Rng(seed)
    model32 = build_model(cfg, rng)
    model = model_from_store(cfg, model32.store.astype(np.float64))
    set_phase(model.store, "ssrl")

    rc = RenderConfig(height=cfg.image_hw, width=cfg.image_hw)
    trips = []
    for i in range(n_samples):
        spec = ShapeSpec(i % 6, cfg.n_points, 0.02, 0.1)
        cloud = synth_shape(spec, rng.child("cloud", str(i)))
        trips.append(make_triplet(cloud, rng.child("trip", str(i)), rc))

    img_cls = _batch_image_cls(model, trips).astype(np.float64)
    enabled = tuple(settings.train.losses)

    def forward() -> float:
        with no_grad():
            return total_loss(model, trips, enabled, False, img_cls).total_value

    bundle = total_loss(model, trips, enabled, False, img_cls)
    bundle.total.backward()

    worst = {"param": None, "rel_err": 0.0}
    n_entries = 0
    failures = []
    for name, p in model.store.trainable_items():
        g = p.tensor.grad
        if g is None:
            continue
        flat = p.tensor.data.reshape(-1)
        gflat = g.reshape(-1)
        picks = rng.child("pick", name).permutation(flat.size)[:entries_per_param]
        for j in picks:
            j = int(j)
            keep = flat[j]
            flat[j] = keep + h
            up = forward()
            flat[j] = keep - h
            down = forward()
            flat[j] = keep
            fd = (up - down) / (2.0 * h)
            an = float(gflat[j])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-11)
            n_entries += 1
            if rel > worst["rel_err"]:
                worst = {"param": name, "entry": j, "rel_err": rel, "analytic": an, "fd": fd}
            if rel > tol:
                failures.append((name, j, rel))
    report = {
        "n_params": len(model.store.trainable_items()),
        "n_entries": n_entries,
        "tolerance": tol,
        "max_rel_err": worst["rel_err"],
        "worst_param": worst["param"],
        "n_failures": len(failures),
        "passed": not failures,
    }
    if failures:
        log.warning("gradcheck failures: %s", failures[:10])
    return report
