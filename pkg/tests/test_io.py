import json

import numpy as np
import pytest

from poseanim import io as pio
from poseanim.core import N_GARMENT_CLASSES, N_POSE_CLASSES, UvAtlas


def test_palette_sidecar(tmp_path):
    pio.write_palette(tmp_path / "palette.json")
    pal = json.loads((tmp_path / "palette.json").read_text())
    assert len(pal["pose"]["labels"]) == N_POSE_CLASSES == len(pal["pose"]["colors"])
    assert len(pal["garment"]["labels"]) == N_GARMENT_CLASSES == len(pal["garment"]["colors"])


def test_label_png_roundtrip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 15, (9, 11)).astype(np.uint8)
    pio.save_labels(tmp_path / "l.png", lab)
    assert np.array_equal(pio.load_labels(tmp_path / "l.png"), lab)


def test_label_loader_rejects_rgb(tmp_path):
    pio.save_image(tmp_path / "rgb.png", np.zeros((4, 4, 3)))
    with pytest.raises(ValueError, match="single-channel"):
        pio.load_labels(tmp_path / "rgb.png")


def test_image_roundtrip_is_8bit(tmp_path):
    img = np.random.default_rng(1).random((6, 6, 3))
    pio.save_image(tmp_path / "i.png", img)
    back = pio.load_image(tmp_path / "i.png").data
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6


def test_warp_file_roundtrip(tmp_path, scene):
    pio.save_warp(tmp_path / "w.bin", scene.warp)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == b"PWRP" and len(raw) == 10 + 6 * scene.warp.part.size
    w = pio.load_warp(tmp_path / "w.bin", scene.atlas)
    assert np.array_equal(w.part, scene.warp.part)
    assert np.abs(w.u - scene.warp.u).max() <= 0.5 / 65535 + 1e-7
    assert np.abs(w.v - scene.warp.v).max() <= 0.5 / 65535 + 1e-7


def test_warp_file_errors(tmp_path, scene):
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a warp"):
        pio.load_warp(tmp_path / "bad.bin", scene.atlas)
    pio.save_warp(tmp_path / "w.bin", scene.warp)
    (tmp_path / "t.bin").write_bytes((tmp_path / "w.bin").read_bytes()[:-6])
    with pytest.raises(ValueError, match="truncated"):
        pio.load_warp(tmp_path / "t.bin", scene.atlas)


def test_uv_roundtrip(tmp_path, scene):
    from poseanim.uvwarp import project_to_uv

    lab = project_to_uv(scene.gar, scene.warp)
    tex = project_to_uv(scene.image, scene.warp)
    pio.save_uv(tmp_path / "uv.npz", lab, tex)
    l2, t2 = pio.load_uv(tmp_path / "uv.npz")
    assert l2 == lab and t2 == tex
    assert UvAtlas.grid(*lab.shape).shape == lab.shape
