"""On-disk formats: label PNGs, palette sidecar, warp records, UV maps."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (GARMENT_LABELS, POSE_LABELS, GarmentMap, PoseMap, RgbImage, SilhouetteMask,
                   UvAtlas, UvLabelMap, UvTextureMap, WarpField)

WARP_MAGIC = b"PWRP"
WARP_VERSION = 1
_WARP_RECORD = np.dtype([("part", "<i2"), ("u", "<u2"), ("v", "<u2")])


def _palette(n: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    cols = rng.integers(40, 256, size=(n, 3))
    cols[0] = 0
    return cols.tolist()


PALETTE = {
    "pose": {"labels": list(POSE_LABELS), "colors": _palette(len(POSE_LABELS), 1)},
    "garment": {"labels": list(GARMENT_LABELS),
                "colors": [[0, 0, 0], [90, 50, 20], [250, 200, 160], [200, 150, 120],
                           [40, 40, 40], [220, 40, 40], [40, 60, 200]]},
    "silhouette": {"labels": ["background", "foreground"], "colors": [[0, 0, 0], [255, 255, 255]]},
}


def write_palette(path) -> None:
    Path(path).write_text(json.dumps(PALETTE, indent=1))


def colorize(labels: np.ndarray, kind: str) -> np.ndarray:
    return np.asarray(PALETTE[kind]["colors"], dtype=np.uint8)[labels]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_image(path, img: RgbImage | np.ndarray) -> None:
    data = img.data if isinstance(img, RgbImage) else img
    Image.fromarray(to_uint8(data), "RGB").save(path, optimize=False)


def load_image(path) -> RgbImage:
    return RgbImage(np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0)


def save_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), "L").save(path, optimize=False)


def load_labels(path) -> np.ndarray:
    im = Image.open(path)
    if im.mode != "L":
        raise ValueError(f"{path}: expected 8-bit single-channel labels, got {im.mode}")
    return np.asarray(im, dtype=np.uint8)


def save_warp(path, warp: WarpField) -> None:
    """Little-endian header (magic, version, H, W) then int16 part, uint16 u, uint16 v."""
    h, w = warp.shape
    rec = np.zeros((h, w), _WARP_RECORD)
    rec["part"] = warp.part
    rec["u"] = np.round(np.clip(warp.u, 0, 1) * 65535).astype(np.uint16)
    rec["v"] = np.round(np.clip(warp.v, 0, 1) * 65535).astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(WARP_MAGIC + struct.pack("<HHH", WARP_VERSION, h, w))
        fh.write(rec.tobytes())


def load_warp(path, atlas: UvAtlas) -> WarpField:
    raw = Path(path).read_bytes()
    if raw[:4] != WARP_MAGIC:
        raise ValueError(f"{path}: not a warp file")
    version, h, w = struct.unpack("<HHH", raw[4:10])
    if version != WARP_VERSION:
        raise ValueError(f"{path}: unsupported warp version {version}")
    rec = np.frombuffer(raw[10:], _WARP_RECORD)
    if rec.size != h * w:
        raise ValueError(f"{path}: truncated warp file")
    rec = rec.reshape(h, w)
    return WarpField(rec["part"], rec["u"] / 65535.0, rec["v"] / 65535.0, atlas)


def write_pair(pdir, src, tgt) -> None:
    pdir = Path(pdir)
    pdir.mkdir(parents=True, exist_ok=True)
    for tag, sc in (("src", src), ("tgt", tgt)):
        save_image(pdir / f"{tag}_img.png", sc.image)
        save_labels(pdir / f"{tag}_pose.png", sc.pose.data)
        save_labels(pdir / f"{tag}_sil.png", sc.sil.data)
        save_labels(pdir / f"{tag}_gar.png", sc.gar.data)
        save_warp(pdir / f"warp_{tag}.bin", sc.warp)


def read_scene(pdir, tag: str, atlas: UvAtlas | None = None, with_warp: bool = False) -> dict:
    pdir = Path(pdir)
    out = {"image": load_image(pdir / f"{tag}_img.png"),
           "pose": PoseMap(load_labels(pdir / f"{tag}_pose.png")),
           "sil": SilhouetteMask(load_labels(pdir / f"{tag}_sil.png")),
           "gar": GarmentMap(load_labels(pdir / f"{tag}_gar.png"))}
    if with_warp:
        out["warp"] = load_warp(pdir / f"warp_{tag}.bin", atlas)
    return out


def save_uv(path, labels: UvLabelMap | None = None, texture: UvTextureMap | None = None) -> None:
    arrays = {}
    if labels is not None:
        arrays["labels"] = labels.labels
        arrays["label_valid"] = labels.valid
    if texture is not None:
        arrays["texture"] = texture.texture
        arrays["texture_valid"] = texture.valid
    np.savez_compressed(path, **arrays)


def load_uv(path) -> tuple[UvLabelMap | None, UvTextureMap | None]:
    z = np.load(path)
    lab = UvLabelMap(z["labels"], z["label_valid"]) if "labels" in z else None
    tex = UvTextureMap(z["texture"], z["texture_valid"]) if "texture" in z else None
    return lab, tex
