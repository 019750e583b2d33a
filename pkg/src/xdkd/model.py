"""The dual-encoder depth network: image and radar pyramids at five scales,
per-scale fusion (add / concat / attention / film), a decoder with optional
point-wise DASPP blocks at 1/32, 1/16 and 1/8, and a single positive depth
head. Intermediate features are exposed by name so distillation can reach
them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import (
    Conv2dLayer,
    DASPPConfig,
    DASPPStage,
    DecoderStage,
    EncoderStage,
    PointwiseDASPP,
    film_fuse,
    make_film,
)
from .tensor import (
    ShapeError,
    Tensor,
    bilinear_upsample,
    concat,
    ew_mul,
    global_avg_pool,
    reshape,
    sigmoid,
    softplus,
)

FUSION_KINDS = ("add", "concat", "attention", "film")
SCALES = (2, 4, 8, 16, 32)

DEFAULT_DASPP_RATES = {32: (1, 2, 4), 16: (2, 4, 8), 8: (3, 6, 12)}


@dataclass(frozen=True)
class ModelSpec:
    image_widths: tuple[int, ...] = (4, 8, 16, 24, 32)
    radar_widths: tuple[int, ...] = (4, 8, 16, 24, 32)
    decoder_widths: tuple[int, ...] = (24, 16, 8, 4)
    fusion: str = "film"
    daspp_rates: dict[int, tuple[int, ...]] | None = field(
        default_factory=lambda: dict(DEFAULT_DASPP_RATES))
    input_depth_scale: float = 80.0  # radar depths are divided by this on entry

    def __post_init__(self):
        if len(self.image_widths) != 5 or len(self.radar_widths) != 5:
            raise ValueError("encoders need exactly five scale widths")
        if len(self.decoder_widths) != 4:
            raise ValueError("decoder needs exactly four stage widths")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion!r}")
        if self.fusion == "add" and self.image_widths != self.radar_widths:
            raise ShapeError("add fusion requires matching image/radar widths at every scale")

    def fused_widths(self) -> tuple[int, ...]:
        if self.fusion == "concat":
            return tuple(i + r for i, r in zip(self.image_widths, self.radar_widths))
        return self.image_widths


def student_spec(fusion: str = "film", daspp: bool = True) -> ModelSpec:
    return ModelSpec(fusion=fusion,
                     daspp_rates=dict(DEFAULT_DASPP_RATES) if daspp else None)


def teacher_spec() -> ModelSpec:
    """Same architecture widened 4x; widths dominate the student everywhere."""
    return ModelSpec(image_widths=(16, 32, 64, 96, 128),
                     radar_widths=(16, 32, 64, 96, 128),
                     decoder_widths=(96, 64, 32, 16))


def micro_spec(fusion: str = "film") -> ModelSpec:
    """Tiny configuration for finite-difference sweeps over every parameter."""
    return ModelSpec(image_widths=(2, 2, 2, 2, 2), radar_widths=(2, 2, 2, 2, 2),
                     decoder_widths=(2, 2, 2, 2), fusion=fusion,
                     daspp_rates={32: (1,), 16: (2,), 8: (2,)})


class DepthNet:
    """forward(image, radar_depth) -> (depth (H,W) tensor, named features)."""

    # depth = HEAD_SCALE * softplus(logits): O(1) logits span the full range,
    # and the bias starts predictions near mid-range (~20 m)
    HEAD_SCALE = 16.0
    HEAD_BIAS_INIT = 0.66

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        iw, rw, dw = spec.image_widths, spec.radar_widths, spec.decoder_widths
        fw = spec.fused_widths()

        self.image_stages = [EncoderStage(f"image_enc{SCALES[i]}",
                                          3 if i == 0 else iw[i - 1], iw[i], seed)
                             for i in range(5)]
        self.radar_stages = [EncoderStage(f"radar_enc{SCALES[i]}",
                                          2 if i == 0 else rw[i - 1], rw[i], seed)
                             for i in range(5)]

        self.film = None
        self.gates = None
        if spec.fusion == "film":
            self.film = [make_film(f"film{SCALES[i]}", rw[i], iw[i], seed) for i in range(5)]
        elif spec.fusion == "attention":
            self.gates = [Conv2dLayer(f"gate{SCALES[i]}", rw[i], iw[i], 1, seed=seed)
                          for i in range(5)]

        self.daspp = {}
        if spec.daspp_rates is not None:
            widths_at = {32: fw[4], 16: dw[0], 8: dw[1]}
            cfg = DASPPConfig(stages={
                s: DASPPStage(channels=widths_at[s], rates=tuple(r))
                for s, r in spec.daspp_rates.items()})
            self.daspp = {s: PointwiseDASPP(f"daspp{s}", st, seed)
                          for s, st in cfg.stages.items()}

        self.dec_stages = [
            DecoderStage("dec16", fw[4], fw[3], dw[0], seed),
            DecoderStage("dec8", dw[0], fw[2], dw[1], seed),
            DecoderStage("dec4", dw[1], fw[1], dw[2], seed),
            DecoderStage("dec2", dw[2], fw[0], dw[3], seed),
        ]
        self.head = Conv2dLayer("head", dw[3], 1, 3, padding=1, seed=seed,
                                bias_fill=self.HEAD_BIAS_INIT)

        self._params = []
        for st in self.image_stages + self.radar_stages:
            self._params += st.params()
        if self.film:
            for f in self.film:
                self._params += f.params()
        if self.gates:
            for g in self.gates:
                self._params += g.params()
        for s in sorted(self.daspp):
            self._params += self.daspp[s].params()
        for st in self.dec_stages:
            self._params += st.params()
        self._params += self.head.params()

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(p.size for _, p in self._params)

    def zero_grads(self) -> None:
        for _, p in self._params:
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        names = {name for name, _ in self._params}
        if names != set(state):
            missing = names - set(state)
            extra = set(state) - names
            raise ValueError(f"parameter mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, p in self._params:
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def _fuse(self, i: int, f_img: Tensor, f_rad: Tensor) -> Tensor:
        kind = self.spec.fusion
        if kind == "film":
            return film_fuse(f_rad, f_img, self.film[i])
        if kind == "add":
            return f_img + f_rad
        if kind == "concat":
            return concat([f_img, f_rad], axis=0)
        # attention: per-channel sigmoid gate from radar features
        gate = sigmoid(global_avg_pool(self.gates[i](f_rad)))
        return ew_mul(f_img, gate)

    def forward(self, image: np.ndarray, radar_depth: np.ndarray
                ) -> tuple[Tensor, dict[str, Tensor]]:
        H, W = image.shape[1], image.shape[2]
        if H % 32 != 0 or W % 32 != 0:
            raise ShapeError(f"input spatial size must be divisible by 32, got {H}x{W}")
        radar_in = np.stack([radar_depth / self.spec.input_depth_scale,
                             (radar_depth > 0.0).astype(np.float64)])

        feats: dict[str, Tensor] = {}
        x = Tensor(image)
        r = Tensor(radar_in)
        fused = []
        for i in range(5):
            x = self.image_stages[i](x)
            r = self.radar_stages[i](r)
            feats[f"image_enc_{SCALES[i]}"] = x
            feats[f"radar_enc_{SCALES[i]}"] = r
            f = self._fuse(i, x, r)
            feats[f"fused_{SCALES[i]}"] = f
            fused.append(f)

        d = fused[4]
        if 32 in self.daspp:
            d = self.daspp[32](d)
        d = self.dec_stages[0](d, fused[3])
        feats["decoder_16"] = d
        if 16 in self.daspp:
            d = self.daspp[16](d)
        d = self.dec_stages[1](d, fused[2])
        feats["decoder_8"] = d
        if 8 in self.daspp:
            d = self.daspp[8](d)
        d = self.dec_stages[2](d, fused[1])
        feats["decoder_4"] = d
        d = self.dec_stages[3](d, fused[0])
        feats["decoder_2"] = d

        # head predicts at 1/2 scale; the positive depth map is then upsampled
        # (bilinear weights are convex, so positivity survives)
        depth = bilinear_upsample(softplus(self.head(d)) * self.HEAD_SCALE, 2)
        depth = reshape(depth, (H, W))
        feats["depth"] = depth
        return depth, feats


def build_model(spec: ModelSpec, seed: int = 0) -> DepthNet:
    return DepthNet(spec, seed=seed)


def spec_without_daspp(spec: ModelSpec) -> ModelSpec:
    return replace(spec, daspp_rates=None)
