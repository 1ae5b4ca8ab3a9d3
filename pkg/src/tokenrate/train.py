"""Backbone pre-training with deterministic, resumable epochs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .optim import AdamW, cosine_lr
from .vit import ModelConfig, accuracy, cross_entropy, init_params, load_checkpoint, model_forward, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 2e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0
    augment_noise: float = 0.02  # std of Gaussian pixel noise added per batch


class Divergence(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float]
    val_accuracy: float
    epochs_done: int


def train_backbone(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    tcfg: TrainConfig | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    checkpoint: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
) -> TrainResult:
    """Train from scratch (or resume) with AdamW and a cosine schedule.

    Batch order and augmentation noise of epoch ``e`` depend only on
    ``(seed, e)``, and the checkpoint stores optimizer moments, so a resumed
    run reproduces an uninterrupted one bit for bit.  ``stop_after`` ends the
    run early after that many epochs (the schedule still spans ``epochs``).
    """
    tcfg = tcfg or TrainConfig()
    params = init_params(cfg, tcfg.seed)
    start = 0
    p = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    opt = AdamW(p, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    if resume and checkpoint is not None and Path(checkpoint).exists():
        ck_cfg, loaded, meta, extra = load_checkpoint(checkpoint)
        if ck_cfg != cfg:
            raise ValueError("checkpoint model config differs from the requested one")
        for k, v in loaded.items():
            p[k].data = v
        start = int(meta.get("epochs_done", 0))
        opt.load_state_arrays(extra, int(meta.get("optimizer_steps", 0)))
    n = len(images)
    steps_per_epoch = -(-n // tcfg.batch_size)
    total = max(tcfg.epochs * steps_per_epoch, 1)
    losses: list[float] = []
    end = tcfg.epochs if stop_after is None else min(tcfg.epochs, start + stop_after)
    for ep in range(start, end):
        rng = np.random.default_rng([tcfg.seed, ep])
        perm = rng.permutation(n)
        for i in range(0, n, tcfg.batch_size):
            idx = perm[i : i + tcfg.batch_size]
            x = images[idx]
            if tcfg.augment_noise:
                x = x + tcfg.augment_noise * rng.normal(size=x.shape)
            res = model_forward(x, p, cfg)
            loss = cross_entropy(res.logits, labels[idx])
            if not np.isfinite(loss.data):
                raise Divergence(f"non-finite loss at epoch {ep}, step {opt.step_count}; recent {losses[-5:]}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(opt.step_count, total, tcfg.lr, tcfg.min_lr))
            losses.append(float(loss.data))
        log.info("epoch %d loss %.4f", ep, np.mean(losses[-steps_per_epoch:]))
        if checkpoint is not None:
            meta = {"epochs_done": ep + 1, "optimizer_steps": opt.step_count, "train": asdict(tcfg)}
            save_checkpoint(checkpoint, cfg, {k: t.data for k, t in p.items()}, meta, opt.state_arrays())
    out = {k: t.data.copy() for k, t in p.items()}
    val_acc = accuracy(val[0], val[1], out, cfg) if val is not None else float("nan")
    return TrainResult(out, losses, val_acc, end)
