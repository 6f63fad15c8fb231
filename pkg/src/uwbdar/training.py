"""Mini-batch training, few-shot adaptation and the toy pre-training task."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .adapt import GRID, K_ORIGINAL, IMAGE_SIDE, InputAdapter, PevGrid
from .model import BranchSpec, DarModel, EncoderConfig, ModelSpec, PretrainedBundle, build_model, random_bundle

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "train",
    "few_shot_adapt",
    "fresh_lr_scales",
    "PretrainConfig",
    "shapes_task",
    "toy_pretrain",
    "pev_similarity_stats",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    batch: int = 25
    adapt_epochs: int = 10
    adapt_batch: int = 5
    adapt_lr: float | None = None  # defaults to lr
    # multiplier on lr for parameters that do not come from the pretrained bundle
    fresh_lr_scale: float = 1.0

    def __post_init__(self):
        if not 1e-5 <= self.lr <= 1e-4:
            raise ValueError(f"lr must lie in [1e-5, 1e-4], got {self.lr}")
        if self.adapt_lr is not None and not 1e-5 <= self.adapt_lr <= 1e-4:
            raise ValueError(f"adapt_lr must lie in [1e-5, 1e-4], got {self.adapt_lr}")
        for name in ("epochs", "batch", "adapt_epochs", "adapt_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (math.isfinite(self.fresh_lr_scale) and self.fresh_lr_scale > 0):
            raise ValueError(f"fresh_lr_scale must be positive, got {self.fresh_lr_scale}")


def fresh_lr_scales(model: DarModel, factor: float) -> dict | None:
    """Per-parameter lr multipliers: ``factor`` for freshly initialized parameters, 1 otherwise."""
    if factor == 1.0:
        return None
    pretrained = set(model.pretrained_names())
    return {k: (1.0 if k in pretrained else factor) for k in model.params}


class TrainingDiverged(RuntimeError):
    def __init__(self, lr, epoch, batch_index, loss):
        self.lr, self.epoch, self.batch_index, self.loss = lr, epoch, batch_index, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch_index} (lr={lr})")


def _fit(model: DarModel, inputs, labels, lr, epochs, batch, seed, lr_scale=None):
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(lr)
    names = set(model.trainable())
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, s in enumerate(range(0, n, batch)):
            idx = order[s : s + batch]
            loss, grads = model.loss_and_grads([x[idx] for x in inputs], labels[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(lr, epoch, bi, loss)
            opt.step(model.params, {k: g for k, g in grads.items() if k in names}, lr_scale)
            total += loss * len(idx)
        trace.append(total / n)
    return trace


def train(model: DarModel, inputs, labels, cfg: TrainConfig = TrainConfig(), seed: int = 0, lr_scale=None):
    """Adam + cross-entropy on a copy of ``model``; returns ``(trained, per_epoch_loss)``."""
    if len(labels) == 0:
        raise ValueError("empty training set")
    out = model.copy()
    if lr_scale is None:
        lr_scale = fresh_lr_scales(out, cfg.fresh_lr_scale)
    trace = _fit(out, inputs, labels, cfg.lr, cfg.epochs, cfg.batch, seed, lr_scale)
    return out, trace


def few_shot_adapt(model: DarModel, inputs, labels, cfg: TrainConfig = TrainConfig(), seed: int = 0, lr_scale=None):
    """Fine-tune every parameter on held-out-subject shots; the input model is left untouched.

    All parameters use the adaptation rate: the head is no longer fresh, so
    ``fresh_lr_scale`` does not apply unless ``lr_scale`` is given.
    """
    out = model.copy()
    if len(labels) == 0:
        log.warning("few_shot_adapt called with no shots; returning an unchanged copy")
        return out, []
    lr = cfg.adapt_lr if cfg.adapt_lr is not None else cfg.lr
    trace = _fit(out, inputs, labels, lr, cfg.adapt_epochs, cfg.adapt_batch, seed, lr_scale)
    return out, trace


# ---------------------------------------------------------------------------
# toy pre-training: coloured shapes on 224x224 RGB canvases

SHAPES = ("disk", "square", "triangle", "ring")


@dataclass(frozen=True)
class PretrainConfig:
    n_images: int = 2400
    epochs: int = 4
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0


def shapes_task(n: int, seed: int = 0, side: int = IMAGE_SIDE):
    """Images ``(n, 3, side, side)`` float32 and labels in ``[0, 16)``.

    Label = shape (4 kinds) x quadrant of the shape centre (4), so both
    appearance and absolute position matter.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    imgs = np.empty((n, 3, side, side), np.float32)
    labels = np.empty(n, np.int64)
    for i in range(n):
        shape = int(rng.integers(len(SHAPES)))
        quad = int(rng.integers(4))
        r = rng.uniform(14, 34)
        half = side / 2
        cy = rng.uniform(r, half - 4) + half * (quad // 2)
        cx = rng.uniform(r, half - 4) + half * (quad % 2)
        dy, dx = yy - cy, xx - cx
        if shape == 0:
            mask = dy * dy + dx * dx <= r * r
        elif shape == 1:
            mask = np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * r
        elif shape == 2:
            mask = (dy <= 0.7 * r) & (dy >= -r + 2 * np.abs(dx))
        else:
            d2 = dy * dy + dx * dx
            mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
        color = rng.uniform(0.4, 1.0, size=3).astype(np.float32)
        img = rng.normal(0.0, 0.1, size=(3, side, side)).astype(np.float32)
        img += mask[None] * color[:, None, None]
        imgs[i] = img
        labels[i] = shape * 4 + quad
    return imgs, labels


def bundle_from_model(model: DarModel, cfg: EncoderConfig, provenance="toy-pretrained") -> PretrainedBundle:
    p = model.params
    d = cfg.d
    enc = {k[3:]: v.astype(np.float64).copy() for k, v in p.items() if k.startswith("b0.enc.")}
    return PretrainedBundle(
        config=cfg,
        kernel=p["b0.embed.w"].T.reshape(d, 3, K_ORIGINAL, K_ORIGINAL).astype(np.float64),
        kernel_bias=p["b0.embed.b"].astype(np.float64).copy(),
        pev=PevGrid(p["b0.pev"].reshape(GRID, GRID, d).astype(np.float64), p["b0.pev_cls"].astype(np.float64)),
        class_token=p["b0.cls"].astype(np.float64).copy(),
        encoder=enc,
        provenance=provenance,
    )


def toy_pretrain(cfg: EncoderConfig = EncoderConfig(), pcfg: PretrainConfig = PretrainConfig(), dtype=np.float32):
    """Train encoder, RGB 16x16 projection and PEVs on :func:`shapes_task`.

    Returns ``(bundle, loss_trace, accuracy_on_fresh_images)``.
    """
    start = random_bundle(cfg, seed=pcfg.seed)
    # the initial projection spans all three channels independently
    spec = ModelSpec((BranchSpec("vit", "image", InputAdapter("simple", (IMAGE_SIDE, IMAGE_SIDE), channels=3)),),
                     encoder=cfg, n_classes=4 * len(SHAPES))
    model = build_model(spec, start, seed=pcfg.seed, dtype=dtype)
    rng = np.random.default_rng(pcfg.seed)
    model.params["b0.embed.w"] = (rng.standard_normal(model.params["b0.embed.w"].shape)
                                  / math.sqrt(3 * K_ORIGINAL**2)).astype(dtype)
    ad = spec.branches[0].adapter
    imgs, labels = shapes_task(pcfg.n_images, seed=pcfg.seed)
    patches = ad.patches(imgs).astype(dtype)
    del imgs
    trace = _fit(model, [patches], labels, pcfg.lr, pcfg.epochs, pcfg.batch, pcfg.seed)
    test_imgs, test_labels = shapes_task(400, seed=pcfg.seed + 10_000)
    acc = float((model.predict([ad.patches(test_imgs).astype(dtype)]) == test_labels).mean())
    bundle = bundle_from_model(model, cfg)
    bundle.notes.update(task="shapes x quadrant", images=pcfg.n_images, epochs=pcfg.epochs, accuracy=acc)
    return bundle, trace, acc


def pev_similarity_stats(pev: PevGrid) -> dict:
    """Mean cosine similarity of 4-neighbour PEV pairs vs pairs at grid distance >= 7."""
    g = pev.grid
    gh, gw, d = g.shape
    flat = g.reshape(-1, d)
    unit = flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
    sim = unit @ unit.T
    r, c = np.divmod(np.arange(gh * gw), gw)
    dist = np.abs(r[:, None] - r[None]) + np.abs(c[:, None] - c[None])
    cheb = np.maximum(np.abs(r[:, None] - r[None]), np.abs(c[:, None] - c[None]))
    adjacent = sim[dist == 1].mean()
    far = sim[cheb >= 7].mean()
    return {"adjacent": float(adjacent), "far": float(far)}
