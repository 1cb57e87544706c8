"""Training objective: IoU-banded classification NLL plus L2 localization.

Matched pairs are partitioned by the IoU of their decoded boxes: at or
above 0.5 they are foreground, strictly below 0.3 background, and the
band in between is ignored for classification.  Localization is the
squared L2 distance between offset vectors over *all* matched pairs,
regardless of band.  The final decoder prediction (the one excluded from
matching) is always supervised toward the end-of-sequence class.

Band membership is decided on detached box values; gradients flow only
through the NLL and L2 terms themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import decode_offsets, iou
from .matching import TargetLabel

FOREGROUND_IOU = 0.5
BACKGROUND_IOU = 0.3


@dataclass
class MatchedPair:
    target: TargetLabel
    prediction: object  # model.Prediction
    iou: float


@dataclass
class MatchedSet:
    pairs: list[MatchedPair]
    foreground: list[MatchedPair]
    background: list[MatchedPair]
    ignored: list[MatchedPair]


def default_iou(target: TargetLabel, prediction) -> float:
    return iou(decode_offsets(target.t_loc), decode_offsets(prediction.loc_values()))


def partition_matches(
    matches: Sequence[tuple[TargetLabel, object]],
    iou_fn: Callable[[TargetLabel, object], float] = default_iou,
) -> MatchedSet:
    """Band each matched (target, prediction) pair by decoded-box IoU."""
    pairs = [MatchedPair(t, p, iou_fn(t, p)) for t, p in matches]
    fg = [m for m in pairs if m.iou >= FOREGROUND_IOU]
    bg = [m for m in pairs if m.iou < BACKGROUND_IOU]
    ignored = [m for m in pairs if BACKGROUND_IOU <= m.iou < FOREGROUND_IOU]
    return MatchedSet(pairs=pairs, foreground=fg, background=bg, ignored=ignored)


def classification_loss(
    ms: MatchedSet,
    last_pred,
    eos_index: int,
    background_index: Optional[int],
) -> ad.Tensor:
    """NLL over foreground pairs, background-band pairs, and the EoS slot.

    Foreground pairs are pushed toward their target class, background-band
    pairs toward the background class (skipped entirely when the model has
    no background class), and the final prediction toward end-of-sequence.
    Ignored-band pairs contribute nothing.  Returns a scalar graph tensor.
    """
    terms = [ad.nll_from_logits(m.prediction.cls_logits, m.target.class_id) for m in ms.foreground]
    if background_index is not None:
        terms += [ad.nll_from_logits(m.prediction.cls_logits, background_index) for m in ms.background]
    terms.append(ad.nll_from_logits(last_pred.cls_logits, eos_index))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def localization_loss(pairs: Sequence[MatchedPair]) -> ad.Tensor:
    """Sum of squared offset distances over all matched pairs, every band."""
    total = None
    for m in pairs:
        diff = ad.sub(m.prediction.p_loc, ad.tensor(m.target.t_loc))
        term = ad.sum_all(ad.hadamard(diff, diff))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.tensor(0.0)
    return total


@dataclass
class LossBreakdown:
    l_cls: float
    l_loc: float
    total: float
    n_foreground: int
    n_background: int
    n_ignored: int
    loss: ad.Tensor  # scalar graph tensor, ready for backward()


def total_loss(
    ms: MatchedSet,
    last_pred,
    eos_index: int,
    background_index: Optional[int],
    lambda_cls: float = 0.1,
    lambda_loc: float = 16.0,
) -> LossBreakdown:
    """Weighted sum of the classification and localization losses."""
    l_cls = classification_loss(ms, last_pred, eos_index, background_index)
    l_loc = localization_loss(ms.pairs)
    loss = ad.add(ad.scale(l_cls, lambda_cls), ad.scale(l_loc, lambda_loc))
    return LossBreakdown(
        l_cls=l_cls.item(),
        l_loc=l_loc.item(),
        total=loss.item(),
        n_foreground=len(ms.foreground),
        n_background=len(ms.background),
        n_ignored=len(ms.ignored),
        loss=loss,
    )
