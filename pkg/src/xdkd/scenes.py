"""Synthetic radar-camera scenes at desk scale.

A scene is a procedural world: a ground plane seen under perspective plus a
few axis-aligned boxes at sampled depths. From the rendered true depth we
derive an intensity image (shading falls off with depth, so the camera
branch has real signal), a sparse noisy radar map biased toward the lower
image half, and two supervision maps: a dense one (light dropout) and a
single-scan one (heavy dropout). Invalid pixels are stored as 0.

All randomness flows through FieldRng streams named per field, so scenes
are bit-reproducible from their seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import FieldRng

# fixed benchmark split used by the training harness and the acceptance suite
TRAIN_SEED_START = 1000
TRAIN_COUNT = 200
EVAL_SEED_START = 9000
EVAL_COUNT = 50


@dataclass(frozen=True)
class SceneParams:
    """Difficulty knobs; these shape the data, never the tensor shapes."""

    d_min: float = 0.5
    d_max: float = 80.0
    min_boxes: int = 2
    max_boxes: int = 6
    radar_frac_lo: float = 0.005    # sampled per scene, inside the [0.1%, 5%] contract
    radar_frac_hi: float = 0.03
    radar_sigma: float = 0.3        # metres, additive noise on radar returns
    outlier_frac: float = 0.1       # fraction of radar points with 10x noise
    dense_dropout: float = 0.05
    single_scan_dropout: float = 0.70
    image_noise: float = 0.05


DEFAULT_PARAMS = SceneParams()


@dataclass
class SupervisionPair:
    """Dense accumulated depth and sparser single-scan depth, metres, 0=invalid."""

    dense: np.ndarray
    single: np.ndarray

    @property
    def dense_mask(self) -> np.ndarray:
        return self.dense > 0.0

    @property
    def single_mask(self) -> np.ndarray:
        return self.single > 0.0


@dataclass
class Scene:
    image: np.ndarray        # (3,H,W) in [0,1]
    radar_depth: np.ndarray  # (H,W) metres, sparse, 0=invalid
    sup: SupervisionPair
    seed: int


@dataclass
class SceneTruth:
    """Generator internals exposed for oracles and demos."""

    true_depth: np.ndarray
    radar_rows: np.ndarray
    radar_cols: np.ndarray
    outlier_mask: np.ndarray


def _render_depth(seed: int, H: int, W: int, p: SceneParams) -> np.ndarray:
    rng = FieldRng(seed, "boxes")
    depth = np.full((H, W), p.d_max)
    horizon = int(0.42 * H)
    rows = np.arange(horizon, H)
    # ground plane: far at the horizon, ~3 m at the bottom edge
    ground = p.d_max + (3.0 - p.d_max) * (rows - horizon) / max(H - 1 - horizon, 1)
    depth[horizon:, :] = ground[:, None]

    n_boxes = int(rng.integers(1, p.min_boxes, p.max_boxes + 1)[0])
    u = rng.uniform(5 * n_boxes).reshape(n_boxes, 5)
    for i in range(n_boxes):
        bw = int(W * (0.08 + 0.25 * u[i, 0]))
        bh = int(H * (0.10 + 0.30 * u[i, 1]))
        x0 = int(u[i, 2] * max(W - bw, 1))
        y0 = int(u[i, 3] * max(H - bh, 1))
        bd = 2.0 + u[i, 4] * (0.75 * p.d_max - 2.0)
        region = depth[y0:y0 + bh, x0:x0 + bw]
        # boxes occlude whatever is behind them
        np.minimum(region, bd, out=region)
    return np.clip(depth, p.d_min, p.d_max)


def _generate(seed: int, H: int, W: int, p: SceneParams) -> tuple[Scene, SceneTruth]:
    true_depth = _render_depth(seed, H, W, p)

    # image: shading from depth, per-box-ish albedo via a second depth pass,
    # plus uniform pixel noise
    alb_rng = FieldRng(seed, "albedo")
    img_rng = FieldRng(seed, "imgnoise")
    base = 1.0 - true_depth / p.d_max
    albedo = alb_rng.uniform(3) * 0.3 - 0.15
    noise = (img_rng.uniform(3 * H * W).reshape(3, H, W) * 2.0 - 1.0) * p.image_noise
    image = np.clip(base[None, :, :] * (0.85 + albedo)[:, None, None] + 0.1 + noise, 0.0, 1.0)

    # radar: sparse returns, concentrated in the lower image half
    pos_rng = FieldRng(seed, "radar_pos")
    noise_rng = FieldRng(seed, "radar_noise")
    frac = p.radar_frac_lo + pos_rng.uniform(1)[0] * (p.radar_frac_hi - p.radar_frac_lo)
    n_pts = max(int(round(frac * H * W)), 1)
    lower = pos_rng.uniform(n_pts) < 0.8
    rows_u = pos_rng.uniform(n_pts)
    rows = np.where(lower,
                    (H // 2 + rows_u * (H - H // 2)).astype(np.int64),
                    (rows_u * H).astype(np.int64))
    cols = (pos_rng.uniform(n_pts) * W).astype(np.int64)
    rows = np.minimum(rows, H - 1)
    cols = np.minimum(cols, W - 1)
    outlier = noise_rng.uniform(n_pts) < p.outlier_frac
    z = noise_rng.normal(n_pts)
    sigma = np.where(outlier, 10.0 * p.radar_sigma, p.radar_sigma)
    radar = np.zeros((H, W))
    radar[rows, cols] = np.clip(true_depth[rows, cols] + sigma * z, p.d_min, p.d_max)

    dd_rng = FieldRng(seed, "dense_drop")
    ds_rng = FieldRng(seed, "single_drop")
    dense = true_depth * (dd_rng.uniform(H * W).reshape(H, W) >= p.dense_dropout)
    single = true_depth * (ds_rng.uniform(H * W).reshape(H, W) >= p.single_scan_dropout)

    scene = Scene(image=image, radar_depth=radar,
                  sup=SupervisionPair(dense=dense, single=single), seed=seed)
    truth = SceneTruth(true_depth=true_depth, radar_rows=rows, radar_cols=cols,
                       outlier_mask=outlier)
    return scene, truth


def generate_scene(seed: int, H: int, W: int, params: SceneParams = DEFAULT_PARAMS) -> Scene:
    if H % 32 != 0 or W % 32 != 0:
        raise ValueError(f"scene dimensions must be divisible by 32, got {H}x{W}")
    scene, _ = _generate(seed, H, W, params)
    return scene


def generate_scene_debug(seed: int, H: int, W: int,
                         params: SceneParams = DEFAULT_PARAMS) -> tuple[Scene, SceneTruth]:
    """Scene plus generator internals (true depth, radar outlier flags)."""
    if H % 32 != 0 or W % 32 != 0:
        raise ValueError(f"scene dimensions must be divisible by 32, got {H}x{W}")
    return _generate(seed, H, W, params)


def dataset(seed: int, n: int, H: int, W: int,
            params: SceneParams = DEFAULT_PARAMS) -> Iterator[Scene]:
    """Stream n scenes from consecutive seeds seed..seed+n-1."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    for s in range(seed, seed + n):
        yield generate_scene(s, H, W, params)


def benchmark_split(H: int = 64, W: int = 128,
                    params: SceneParams = DEFAULT_PARAMS) -> tuple[list[Scene], list[Scene]]:
    """The fixed train/eval split used throughout the acceptance suite."""
    train = list(dataset(TRAIN_SEED_START, TRAIN_COUNT, H, W, params))
    evals = list(dataset(EVAL_SEED_START, EVAL_COUNT, H, W, params))
    return train, evals
