"""Supervised depth loss, the weighted training objective, and the
evaluation metric suite (MAE, RMSE, AbsRel, log10, RMSElog, delta_1..3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import SupervisionPair
from .tensor import Tensor, ew_abs, ew_mul, ew_sub, reduce_sum

PRED_LOG_CLAMP = 1e-3  # metres; applied before logs in the metrics


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def depth_loss(pred: Tensor, sup: SupervisionPair) -> Tensor:
    """Sum of per-source masked mean absolute errors.

    Each supervision source is averaged over its own valid set; an empty
    mask contributes 0 (both empty is an error).
    """
    masks = [sup.single_mask, sup.dense_mask]
    targets = [sup.single, sup.dense]
    if not any(m.any() for m in masks):
        raise ValueError("both supervision masks are empty")
    total = None
    for m, t in zip(masks, targets):
        n = int(m.sum())
        if n == 0:
            continue
        err = ew_abs(ew_sub(Tensor(t), pred))
        term = reduce_sum(ew_mul(err, Tensor(m / n)))
        total = term if total is None else total + term
    return total


def total_loss(depth: Tensor, xkd: Tensor | None, d2kd: Tensor | None,
               w: LossWeights) -> Tensor:
    """lambda1*depth + lambda2*xkd + lambda3*d2kd.

    Zero-weighted (or absent) terms are skipped entirely, so disabling
    distillation is bit-exactly equivalent to the plain depth objective.
    """
    total = depth if w.lambda1 == 1.0 else depth * w.lambda1
    if xkd is not None and w.lambda2 != 0.0:
        total = total + xkd * w.lambda2
    if d2kd is not None and w.lambda3 != 0.0:
        total = total + d2kd * w.lambda3
    return total


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    absrel: float
    log10: float
    rmselog: float
    delta1: float
    delta2: float
    delta3: float
    pixels: int
    clamped: int  # predictions clamped to PRED_LOG_CLAMP before the logs
    cap: float

    FIELDS = ("mae", "rmse", "absrel", "log10", "rmselog", "delta1", "delta2", "delta3")

    def as_lines(self) -> list[str]:
        lines = [f"{name} {getattr(self, name):.9f}" for name in self.FIELDS]
        lines += [f"pixels {self.pixels}", f"clamped {self.clamped}", f"cap {self.cap:g}"]
        return lines


class MetricAccumulator:
    """Pools pixel statistics across scenes so split-level metrics are exact."""

    def __init__(self, cap: float):
        self.cap = cap
        self.n = 0
        self.clamped = 0
        self.abs_err = 0.0
        self.sq_err = 0.0
        self.abs_rel = 0.0
        self.log10_err = 0.0
        self.sq_log = 0.0
        self.d1 = 0
        self.d2 = 0
        self.d3 = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> None:
        m = mask & (gt > 0.0) & (gt <= self.cap)
        p = pred[m]
        g = gt[m]
        if p.size == 0:
            return
        self.n += p.size
        low = p < PRED_LOG_CLAMP
        self.clamped += int(low.sum())
        p_log = np.maximum(p, PRED_LOG_CLAMP)
        e = g - p
        self.abs_err += float(np.abs(e).sum())
        self.sq_err += float((e * e).sum())
        self.abs_rel += float((np.abs(e) / g).sum())
        self.log10_err += float(np.abs(np.log10(p_log) - np.log10(g)).sum())
        ln = np.log(p_log) - np.log(g)
        self.sq_log += float((ln * ln).sum())
        ratio = np.maximum(p_log / g, g / p_log)
        self.d1 += int((ratio < 1.25).sum())
        self.d2 += int((ratio < 1.25 ** 2).sum())
        self.d3 += int((ratio < 1.25 ** 3).sum())

    def report(self) -> MetricsReport:
        n = max(self.n, 1)
        return MetricsReport(
            mae=self.abs_err / n,
            rmse=float(np.sqrt(self.sq_err / n)),
            absrel=self.abs_rel / n,
            log10=self.log10_err / n,
            rmselog=float(np.sqrt(self.sq_log / n)),
            delta1=self.d1 / n,
            delta2=self.d2 / n,
            delta3=self.d3 / n,
            pixels=self.n,
            clamped=self.clamped,
            cap=self.cap,
        )


def eval_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                 cap: float) -> MetricsReport:
    """All eight metrics over valid ground-truth pixels within the cap."""
    acc = MetricAccumulator(cap)
    acc.add(np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64),
            np.asarray(mask, dtype=bool))
    return acc.report()


def param_count(model) -> int:
    """Total trainable scalars; works on anything exposing parameters()."""
    return sum(p.size for _, p in model.parameters())
