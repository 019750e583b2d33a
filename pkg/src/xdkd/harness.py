"""Teacher/student training and the distillation loop.

One step = forward the student on a scene, assemble the weighted objective
(masked-MAE depth term plus, when a teacher is given, the saliency-alignment
and depth-distribution terms), backward, accumulate over the batch, momentum
update. The teacher is frozen, so its per-scene targets (depth map and
normalized saliency vectors) are precomputed once per run; that is exactly
equivalent to re-running the teacher every step and far cheaper.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .depthdist import BinSpec, d2kd_loss, default_bins
from .model import DepthNet, ModelSpec, build_model, spec_without_daspp, student_spec
from .rng import FieldRng
from .saliency import (
    DEFAULT_DISTILL_LAYERS,
    alignment_loss,
    collect_alphas,
    normalized_teacher_vectors,
    student_saliency_vectors,
)
from .scenes import Scene
from .supervision import LossWeights, MetricAccumulator, MetricsReport, depth_loss, total_loss
from .tensor import Tensor, backward, new_tape, no_grad, reduce_mean

DEFAULT_CAPS = (50.0, 70.0, 80.0)
ABLATION_KINDS = ("add", "concat", "attention", "film", "film_no_daspp")


class TrainingDiverged(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    weights: LossWeights = LossWeights()
    bins: BinSpec = field(default_factory=default_bins)
    layers: tuple[str, ...] = DEFAULT_DISTILL_LAYERS
    lr: float = 3e-4
    momentum: float = 0.9
    grad_clip: float = 0.0  # global gradient-norm ceiling; 0 disables
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class EpochLosses:
    depth: float
    xkd: float
    d2kd: float
    total: float


@dataclass
class TrainReport:
    epochs: list[EpochLosses]
    metrics: dict[float, MetricsReport]
    param_count: int
    wall_time: float
    seed: int

    def fingerprint(self) -> str:
        """Deterministic serialization of everything except wall time."""
        rows = [f"params={self.param_count}", f"seed={self.seed}"]
        for i, e in enumerate(self.epochs):
            rows.append(f"epoch{i}:{e.depth.hex()},{e.xkd.hex()},{e.d2kd.hex()},{e.total.hex()}")
        for cap in sorted(self.metrics):
            m = self.metrics[cap]
            vals = ",".join(getattr(m, f).hex() if isinstance(getattr(m, f), float)
                            else str(getattr(m, f))
                            for f in (*MetricsReport.FIELDS, "pixels", "clamped"))
            rows.append(f"cap{cap:g}:{vals}")
        return "\n".join(rows)

    def loss_csv(self) -> str:
        lines = ["epoch,depth,xkd,d2kd,total"]
        for i, e in enumerate(self.epochs):
            lines.append(f"{i},{e.depth:.12g},{e.xkd:.12g},{e.d2kd:.12g},{e.total:.12g}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [f"param_count {self.param_count}",
                 f"seed {self.seed}",
                 f"epochs {len(self.epochs)}",
                 f"wall_time_s {self.wall_time:.3f}"]
        if self.epochs:
            lines.append(f"final_total_loss {self.epochs[-1].total:.9f}")
        for cap in sorted(self.metrics):
            for row in self.metrics[cap].as_lines():
                lines.append(f"eval{cap:g}.{row}")
        return "\n".join(lines) + "\n"


class Momentum:
    """Gradient descent with momentum and optional global-norm clipping;
    grads of None count as zero."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float,
                 momentum: float, grad_clip: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        scale = 1.0
        if self.grad_clip > 0.0:
            sq = sum(float((p.grad * p.grad).sum())
                     for _, p in self.params if p.grad is not None)
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for v, (_, p) in zip(self.velocity, self.params):
            g = p.grad * scale if p.grad is not None else 0.0
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


@dataclass
class TeacherTargets:
    """Frozen per-scene distillation targets."""

    depth: np.ndarray
    saliency_vecs: dict[str, np.ndarray]


def teacher_targets(teacher: DepthNet, scene: Scene,
                    layers: Sequence[str]) -> TeacherTargets:
    new_tape()
    pred, feats = teacher.forward(scene.image, scene.radar_depth)
    phi = reduce_mean(pred)
    vecs = normalized_teacher_vectors(phi, feats, layers)
    return TeacherTargets(depth=pred.data.copy(), saliency_vecs=vecs)


@dataclass
class StepLosses:
    total: Tensor
    depth: float
    xkd: float
    d2kd: float
    alphas: dict[str, np.ndarray] | None


def scene_losses(model: DepthNet, scene: Scene, config: DistillConfig,
                 targets: TeacherTargets | None = None,
                 frozen_alphas: dict[str, np.ndarray] | None = None) -> StepLosses:
    """Build the per-scene objective on a fresh region of the active tape.

    When `targets` is present the distillation terms are added; the
    student's saliency channel weights come from a targeted backward pass
    on the mean predicted depth (or from `frozen_alphas`, which keeps the
    objective fixed for finite-difference checks).
    """
    w = config.weights
    pred, feats = model.forward(scene.image, scene.radar_depth)
    l_depth = depth_loss(pred, scene.sup)

    l_xkd = None
    l_d2kd = None
    alphas = frozen_alphas
    if targets is not None and w.lambda2 != 0.0:
        if alphas is None:
            phi = reduce_mean(pred)
            alphas = collect_alphas(phi, feats, config.layers)
        vecs = student_saliency_vectors(feats, alphas, config.layers)
        l_xkd = alignment_loss(vecs, [targets.saliency_vecs[n] for n in config.layers])
    if targets is not None and w.lambda3 != 0.0:
        l_d2kd = d2kd_loss(targets.depth, pred, config.bins, scene.sup.dense_mask)

    total = total_loss(l_depth, l_xkd, l_d2kd, w)
    return StepLosses(total=total,
                      depth=l_depth.item(),
                      xkd=l_xkd.item() if l_xkd is not None else 0.0,
                      d2kd=l_d2kd.item() if l_d2kd is not None else 0.0,
                      alphas=alphas)


def evaluate(model: DepthNet, scenes: Iterable[Scene],
             caps: Sequence[float] = DEFAULT_CAPS) -> dict[float, MetricsReport]:
    """Metrics against the dense supervision map, pooled over all scenes."""
    accs = {cap: MetricAccumulator(cap) for cap in caps}
    with no_grad():
        for scene in scenes:
            new_tape()
            pred, _ = model.forward(scene.image, scene.radar_depth)
            for acc in accs.values():
                acc.add(pred.data, scene.sup.dense, scene.sup.dense_mask)
    return {cap: acc.report() for cap, acc in accs.items()}


def train(model: DepthNet, data: Iterable[Scene], config: DistillConfig,
          teacher: DepthNet | None = None,
          eval_data: Iterable[Scene] | None = None,
          caps: Sequence[float] = DEFAULT_CAPS) -> TrainReport:
    """Momentum-SGD training, optionally distilling from a frozen teacher.

    Deterministic given (model init, data, config). Aborts with
    TrainingDiverged if any step's total loss exceeds divergence_factor
    times the first step's.
    """
    scenes = list(data)
    if not scenes:
        raise ValueError("training data is empty")
    t0 = time.perf_counter()

    w = config.weights
    distilling = teacher is not None and (w.lambda2 != 0.0 or w.lambda3 != 0.0)
    targets = None
    teacher_sum = None
    if distilling:
        teacher_sum = teacher.checksum()
        targets = [teacher_targets(teacher, s, config.layers) for s in scenes]

    opt = Momentum(model.parameters(), config.lr, config.momentum, config.grad_clip)
    order_rng = FieldRng(config.seed, "epoch_order")
    initial_total = None
    rows = []

    for _ in range(config.epochs):
        order = order_rng.permutation(len(scenes))
        sums = np.zeros(3)  # depth, xkd, d2kd
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = [np.zeros_like(p.data) for _, p in opt.params]
            for idx in batch:
                idx = int(idx)
                model.zero_grads()
                new_tape()
                sl = scene_losses(model, scenes[idx], config,
                                  targets[idx] if targets is not None else None)
                step_total = sl.total.item()
                if not np.isfinite(step_total):
                    raise NumericalError("non-finite training loss")
                if initial_total is None:
                    initial_total = step_total
                elif step_total > config.divergence_factor * max(initial_total, 1e-12):
                    raise TrainingDiverged(
                        f"loss {step_total:.4g} exceeded {config.divergence_factor:g}x "
                        f"initial {initial_total:.4g}")
                backward(sl.total)
                for buf, (_, p) in zip(acc, opt.params):
                    if p.grad is not None:
                        buf += p.grad
                sums += (sl.depth, sl.xkd, sl.d2kd)
            inv = 1.0 / len(batch)
            for buf, (_, p) in zip(acc, opt.params):
                p.grad = buf * inv
            opt.step()
        means = sums / len(scenes)
        rows.append(EpochLosses(
            depth=float(means[0]), xkd=float(means[1]), d2kd=float(means[2]),
            total=float(w.lambda1 * means[0] + w.lambda2 * means[1] + w.lambda3 * means[2])))

    if distilling and teacher.checksum() != teacher_sum:
        raise RuntimeError("teacher parameters changed during distillation")

    metrics = evaluate(model, eval_data, caps) if eval_data is not None else {}
    return TrainReport(epochs=rows, metrics=metrics, param_count=model.param_count(),
                       wall_time=time.perf_counter() - t0, seed=config.seed)


# ---------------------------------------------------------------------------
# fusion ablation

@dataclass
class AblationRow:
    kind: str
    param_count: int
    metrics: dict[float, MetricsReport]


def _spec_for_kind(base: ModelSpec, kind: str) -> ModelSpec:
    if kind == "film_no_daspp":
        return spec_without_daspp(base)
    return replace(base, fusion=kind)


def ablate_fusion(kinds: Sequence[str], train_data: Sequence[Scene],
                  eval_data: Sequence[Scene], config: DistillConfig,
                  base: ModelSpec | None = None,
                  caps: Sequence[float] = DEFAULT_CAPS) -> list[AblationRow]:
    """Train one student per fusion kind from the same seed; no distillation.

    XDKD_THREADS > 1 runs variants on worker threads (each run owns its
    thread-local tape, so results are unchanged).
    """
    unknown = set(kinds) - set(ABLATION_KINDS)
    if unknown:
        raise ValueError(f"unknown fusion kind {sorted(unknown)[0]!r}")
    base = base if base is not None else student_spec()
    scenes = list(train_data)
    evals = list(eval_data)

    def run(kind: str) -> AblationRow:
        model = build_model(_spec_for_kind(base, kind), seed=config.seed)
        train(model, scenes, config)
        return AblationRow(kind=kind, param_count=model.param_count(),
                           metrics=evaluate(model, evals, caps))

    workers = int(os.environ.get("XDKD_THREADS", "1"))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, kinds))
    return [run(k) for k in kinds]
