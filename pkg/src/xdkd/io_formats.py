"""File formats: XTD tensor dumps, PFM depth maps, PGM saliency images,
parameter checkpoints, and on-disk scene bundles.

XTD is the exact interchange format used everywhere: 8-byte magic
``XTDUMP01``, little-endian u32 rank, rank little-endian u64 dims, then the
row-major float64 payload (little-endian). PFM export is float32 and
therefore lossy; PGM is an 8-bit visualization with max normalization.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scenes import Scene, SupervisionPair

XTD_MAGIC = b"XTDUMP01"


class FormatError(IOError):
    pass


# ---------------------------------------------------------------------------
# XTD

def write_xtd(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(XTD_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_xtd(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != XTD_MAGIC:
            raise FormatError(f"{path}: bad XTD magic {magic!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = f.read(8 * n)
        if len(payload) != 8 * n:
            raise FormatError(f"{path}: truncated XTD payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian, scale -1.0; scanlines bottom-to-top)

def write_pfm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise FormatError("PFM export expects an (H,W) map")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise FormatError(f"{path}: not a grayscale PFM ({header!r})")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# PGM (binary 8-bit, max-normalized)

def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError("PGM export expects an (H,W) map")
    peak = arr.max()
    scaled = np.zeros_like(arr) if peak <= 0 else arr / peak
    pix = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pix.tobytes())


# ---------------------------------------------------------------------------
# checkpoints: directory of XTD files plus a manifest

MANIFEST_NAME = "manifest.txt"


def save_checkpoint(dirpath, params: dict[str, np.ndarray], config_text: str | None = None) -> None:
    d = Path(dirpath)
    (d / "params").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(params.items()):
        fname = f"params/p{i:04d}.xtd"
        write_xtd(d / fname, arr)
        dims = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{dims}\t{fname}")
    (d / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if config_text is not None:
        (d / "config.ini").write_text(config_text)


def load_checkpoint(dirpath) -> tuple[dict[str, np.ndarray], str | None]:
    d = Path(dirpath)
    manifest = d / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"{dirpath}: no checkpoint manifest")
    params = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, dims, fname = line.split("\t")
        arr = read_xtd(d / fname)
        want = tuple(int(s) for s in dims.split(",") if s)
        if arr.shape != want:
            raise FormatError(f"{dirpath}: {name} has shape {arr.shape}, manifest says {want}")
        params[name] = arr
    cfg = d / "config.ini"
    return params, (cfg.read_text() if cfg.exists() else None)


# ---------------------------------------------------------------------------
# scene bundles: one directory per scene with image/radar/dd/ds dumps

SCENE_FILES = ("image.xtd", "radar.xtd", "dd.xtd", "ds.xtd")


def save_scene(dirpath, scene: Scene) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_xtd(d / "image.xtd", scene.image)
    write_xtd(d / "radar.xtd", scene.radar_depth)
    write_xtd(d / "dd.xtd", scene.sup.dense)
    write_xtd(d / "ds.xtd", scene.sup.single)
    write_pfm(d / "dd.pfm", scene.sup.dense)
    (d / "seed.txt").write_text(f"{scene.seed}\n")


def load_scene(dirpath) -> Scene:
    d = Path(dirpath)
    for fname in SCENE_FILES:
        if not (d / fname).exists():
            raise FormatError(f"{dirpath}: missing {fname}")
    seed_file = d / "seed.txt"
    seed = int(seed_file.read_text()) if seed_file.exists() else -1
    return Scene(
        image=read_xtd(d / "image.xtd"),
        radar_depth=read_xtd(d / "radar.xtd"),
        sup=SupervisionPair(dense=read_xtd(d / "dd.xtd"), single=read_xtd(d / "ds.xtd")),
        seed=seed,
    )


def save_scene_dir(dirpath, scenes) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for scene in scenes:
        name = f"scene_{scene.seed:06d}"
        save_scene(d / name, scene)
        names.append(name)
    (d / MANIFEST_NAME).write_text("\n".join(names) + "\n")


def load_scene_dir(dirpath) -> list[Scene]:
    d = Path(dirpath)
    manifest = d / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"{dirpath}: no scene manifest")
    names = [n for n in manifest.read_text().splitlines() if n.strip()]
    return [load_scene(d / n) for n in names]
