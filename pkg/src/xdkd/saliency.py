"""Gradient-based saliency maps and the saliency-alignment distillation loss.

For a scalar objective phi (here: mean predicted depth), the saliency map of
a feature layer F (C,H,W) is ReLU(sum_c alpha_c F_c) with alpha_c the
spatial mean of dphi/dF_c. Teacher and student maps are flattened,
l2-normalized with an epsilon guard, and compared by cosine; the loss is the
mean over distilled layers of (1 - cosine).

Teacher quantities are detached: gradients from the loss reach only the
student. The student's channel weights alpha are treated as constants
during loss backprop (stop-gradient), so the tape stays first-order;
gradients flow through the student features themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import (
    Tensor,
    backward,
    ew_abs,  # noqa: F401  (re-exported for oracle-side helpers)
    ew_add,
    ew_mul,
    ew_sqrt,
    flatten,
    reduce_sum,
    relu,
)

NORM_EPS = 1e-8

# layers distilled by default: image encoder, radar encoder, decoder at 1/16
DEFAULT_DISTILL_LAYERS = ("image_enc_16", "radar_enc_16", "decoder_16")


class DistillationError(ValueError):
    pass


@dataclass
class SaliencyMap:
    """A rendered map plus provenance, for export and inspection."""

    values: np.ndarray  # (H,W), non-negative
    layer: str
    source: str  # "student" | "teacher"


@dataclass
class SaliencyBundle:
    """Everything the alignment loss needs for one sample.

    Teacher features must be detached; the loss verifies nothing flows back
    through them by construction (their values are snapshotted).
    """

    layers: tuple[str, ...]
    student_feats: Mapping[str, Tensor]
    teacher_feats: Mapping[str, Tensor]
    phi_student: Tensor
    phi_teacher: Tensor


def gradcam_weights(F_l: Tensor, dphi_dF: Tensor) -> Tensor:
    """Per-channel weights: spatial mean of the objective's gradient."""
    if F_l.shape != dphi_dF.shape:
        raise ValueError(f"feature/gradient shape mismatch: {F_l.shape} vs {dphi_dF.shape}")
    return Tensor(dphi_dF.data.mean(axis=(1, 2)))


def saliency_map(F_l: Tensor, alpha: Tensor) -> Tensor:
    """ReLU of the alpha-weighted channel sum; differentiable in F_l."""
    c = F_l.shape[0]
    if alpha.shape != (c,) and alpha.shape != (c, 1, 1):
        raise ValueError(f"alpha must have {c} channels, got {alpha.shape}")
    a = alpha if alpha.shape == (c, 1, 1) else alpha.reshape((c, 1, 1))
    return relu(reduce_sum(ew_mul(F_l, a), axes=(0,)))


def normalize_map(m: Tensor) -> Tensor:
    """Flatten row-major and divide by (l2 norm + eps); zero maps stay zero."""
    v = flatten(m)
    norm = ew_sqrt(reduce_sum(ew_mul(v, v)))
    return v / ew_add(norm, NORM_EPS)


def collect_alphas(phi: Tensor, feats: Mapping[str, Tensor],
                   layers: Sequence[str]) -> dict[str, np.ndarray]:
    """Backward phi onto the listed features and snapshot the channel weights.

    Leaves every gradient buffer on phi's tape zeroed afterwards, so a later
    training backward starts clean.
    """
    backward(phi, stops=[feats[name] for name in layers])
    alphas = {}
    for name in layers:
        f = feats[name]
        g = f.grad if f.grad is not None else np.zeros_like(f.data)
        alphas[name] = g.mean(axis=(1, 2))
    if phi.tape is not None:
        phi.tape.zero_grads()
    return alphas


def normalized_teacher_vectors(phi_teacher: Tensor, teacher_feats: Mapping[str, Tensor],
                               layers: Sequence[str]) -> dict[str, np.ndarray]:
    """Detached, normalized teacher saliency vectors, one per layer."""
    alphas = collect_alphas(phi_teacher, teacher_feats, layers)
    out = {}
    for name in layers:
        fd = teacher_feats[name].data
        m = np.maximum((alphas[name][:, None, None] * fd).sum(axis=0), 0.0)
        v = m.reshape(-1)
        out[name] = v / (np.linalg.norm(v) + NORM_EPS)
    return out


def alignment_loss(student_vecs: Sequence[Tensor],
                   teacher_vecs: Sequence[np.ndarray]) -> Tensor:
    """Mean over layers of (1 - <student, teacher>). Teacher side constant."""
    if not student_vecs:
        raise DistillationError("no distillation layers")
    acc = None
    for sv, tv in zip(student_vecs, teacher_vecs):
        dot = reduce_sum(ew_mul(sv, Tensor(tv)))
        term = 1.0 - dot
        acc = term if acc is None else ew_add(acc, term)
    return acc * (1.0 / len(student_vecs))


def student_saliency_vectors(feats: Mapping[str, Tensor], alphas: Mapping[str, np.ndarray],
                             layers: Sequence[str]) -> list[Tensor]:
    return [normalize_map(saliency_map(feats[name], Tensor(alphas[name]))) for name in layers]


def xkd_loss(bundle: SaliencyBundle) -> Tensor:
    """Saliency-alignment distillation loss for one sample.

    Runs the two targeted backward passes (teacher objective, student
    objective), builds and normalizes both map sets, and returns the mean
    cosine misalignment. Value lies in [0, 1] since both maps are
    non-negative. Gradients flow only into the student side.
    """
    if not bundle.layers:
        raise DistillationError("no distillation layers")
    teacher_vecs = normalized_teacher_vectors(bundle.phi_teacher, bundle.teacher_feats,
                                              bundle.layers)
    student_alphas = collect_alphas(bundle.phi_student, bundle.student_feats, bundle.layers)
    student_vecs = student_saliency_vectors(bundle.student_feats, student_alphas, bundle.layers)
    return alignment_loss(student_vecs, [teacher_vecs[n] for n in bundle.layers])


def render_saliency_maps(phi: Tensor, feats: Mapping[str, Tensor],
                         layers: Sequence[str], source: str) -> dict[str, SaliencyMap]:
    """Plain (detached) saliency maps for export."""
    alphas = collect_alphas(phi, feats, layers)
    out = {}
    for name in layers:
        fd = feats[name].data
        m = np.maximum((alphas[name][:, None, None] * fd).sum(axis=0), 0.0)
        out[name] = SaliencyMap(values=m, layer=name, source=source)
    return out
