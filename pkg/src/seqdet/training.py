"""Adam training loop with dynamic matching.

Each scene with n objects runs n + 1 + k decoder iterations (k = 0 for the
standard sparse regime, k > 0 for the dense variant).  The Hungarian
matcher pairs the n targets with n of the first m - 1 predictions on
detached values; predictions left unmatched are ignored by the loss, and
the final prediction is always supervised toward end-of-sequence.
Gradients are accumulated over a fixed-size batch of images before each
bias-corrected Adam update.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import AnnotatedImage
from .loss import LossBreakdown, partition_matches, total_loss
from .matching import TargetLabel, build_cost_matrix, hungarian
from .model import SequentialDetector, save_checkpoint


class NonFiniteGradient(RuntimeError):
    """A parameter gradient went NaN/Inf; carries the parameter name."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    extra_predictions: int = 0  # k; m = n + 1 + k
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_cls: float = 0.1
    lambda_loc: float = 16.0
    mu_cls: float = 0.0
    mu_loc: float = 16.0
    seed: int = 0
    checkpoint_every: int = 1
    eval_iou_threshold: float = 0.5

    def __post_init__(self):
        if self.extra_predictions < 0:
            raise ValueError("extra_predictions must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, ad.Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def targets_of(scene: AnnotatedImage) -> list[TargetLabel]:
    return [TargetLabel(cls, np.asarray(box)) for cls, box in scene.objects]


def train_step(model: SequentialDetector, scene: AnnotatedImage, cfg: TrainConfig) -> LossBreakdown:
    """Forward, match, loss, backward for one scene.

    Leaves fresh gradients on the model parameters; the caller accumulates.
    """
    targets = targets_of(scene)
    n = len(targets)
    m = n + 1 + cfg.extra_predictions
    preds = model.decode_sequence(scene.image, m)
    if n > 0:
        costs = build_cost_matrix(targets, preds[: m - 1], cfg.mu_cls, cfg.mu_loc)
        assignment = hungarian(costs)
        matches = [(targets[i], preds[j]) for i, j in assignment.pairs()]
    else:
        matches = []
    ms = partition_matches(matches)
    breakdown = total_loss(
        ms,
        preds[-1],
        eos_index=model.config.eos_index,
        background_index=model.config.background_index,
        lambda_cls=cfg.lambda_cls,
        lambda_loc=cfg.lambda_loc,
    )
    breakdown.loss.backward()
    return breakdown


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_cls: float
    mean_loc: float
    val_map: Optional[float] = None


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_map: Optional[float] = None
    best_checkpoint: Optional[str] = None


def train(
    model: SequentialDetector,
    train_scenes: Sequence[AnnotatedImage],
    cfg: TrainConfig,
    val_scenes: Sequence[AnnotatedImage] = (),
    out_dir: Optional[str] = None,
    log: Optional[Callable[[str], None]] = None,
    step_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run the full training loop; serial and deterministic for a fixed seed.

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs plus a
    ``best.ckpt`` tracking the best validation mAP (when val scenes exist).
    """
    from .evaluation import evaluate_map  # late import: evaluation depends on model only

    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    result = TrainResult()
    accum = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    global_step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_scenes))
        in_batch = 0
        losses, cls_losses, loc_losses = [], [], []
        for idx in order:
            breakdown = train_step(model, train_scenes[int(idx)], cfg)
            for name, p in model.params.items():
                if p.grad is not None:
                    accum[name] += p.grad
            in_batch += 1
            losses.append(breakdown.total)
            cls_losses.append(breakdown.l_cls)
            loc_losses.append(breakdown.l_loc)
            result.step_losses.append(breakdown.total)
            if step_log:
                step_log(
                    {
                        "step": global_step,
                        "epoch": epoch,
                        "loss": breakdown.total,
                        "l_cls": breakdown.l_cls,
                        "l_loc": breakdown.l_loc,
                    }
                )
            global_step += 1
            if in_batch == cfg.batch_size:
                opt.step({k: a / in_batch for k, a in accum.items()})
                for a in accum.values():
                    a[...] = 0.0
                in_batch = 0
        if in_batch:
            opt.step({k: a / in_batch for k, a in accum.items()})
            for a in accum.values():
                a[...] = 0.0

        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            mean_cls=float(np.mean(cls_losses)) if cls_losses else 0.0,
            mean_loc=float(np.mean(loc_losses)) if loc_losses else 0.0,
        )
        if val_scenes:
            report = evaluate_map(model, val_scenes, iou_threshold=cfg.eval_iou_threshold)
            stats.val_map = report.map
            if result.best_val_map is None or report.map > result.best_val_map:
                result.best_val_map = report.map
                result.best_epoch = epoch
                if out_dir:
                    best_path = os.path.join(out_dir, "best.ckpt")
                    save_checkpoint(best_path, model)
                    result.best_checkpoint = best_path
        if out_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"), model)
        result.history.append(stats)
        if log:
            val_part = f" val_mAP={stats.val_map:.4f}" if stats.val_map is not None else ""
            log(
                f"epoch {epoch + 1}/{cfg.epochs} loss={stats.mean_loss:.4f} "
                f"cls={stats.mean_cls:.4f} loc={stats.mean_loc:.4f}{val_part}"
            )
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model)
        if result.best_checkpoint is None:
            result.best_checkpoint = os.path.join(out_dir, "final.ckpt")
    return result
