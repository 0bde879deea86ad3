import json

import pytest

from poseanim import cli
from poseanim import training as tr
from poseanim.losses import PerceptualExtractor
from poseanim.networks import NetConfig, build

NC = NetConfig(width=4, depth=2, latent=8, disc_depth=2)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    for i, k in enumerate(("sil", "gar", "render", "disc")):
        tr.save_checkpoint(d / f"{k}_final.npz", build(k, NC, i), k, i)
    tr.save_checkpoint(d / "extractor.npz", PerceptualExtractor(4).freeze(), "extractor", 0)
    return d


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    src = root / "src"
    assert cli.main(["make-source", "--figure-seed", "3", "--size", "32", "--uv", "64", "96",
                     "--extra-views", "back", "--out", str(src)]) == 0
    assert cli.main(["make-poses", "--source", str(src), "--kind", "clip", "--n", "3", "--gt",
                     "--out", str(root / "poses")]) == 0
    return root


def _run(root):
    return json.loads((root / "run.json").read_text())


def test_make_source_bundle(bundle):
    src = bundle / "src"
    for f in ("image.png", "background.png", "pose.png", "sil.png", "gar.png", "warp.bin", "source.json"):
        assert (src / f).exists(), f
    assert (src / "extra_back" / "warp.bin").exists()
    rec = _run(src)
    assert rec["command"] == "make-source" and rec["seed"] == 0 and rec["args"]["figure_seed"] == 3


def test_make_poses_records_input_hash(bundle):
    man = json.loads((bundle / "poses" / "poses.json").read_text())
    assert len(man["frames"]) == 3 and len(list((bundle / "poses" / "gt").glob("*.png"))) == 3
    rec = _run(bundle / "poses")
    assert len(rec["inputs"]["source"]) == 64


def test_build_animate_ablate_eval(bundle, ckpt, tmp_path):
    src, poses = str(bundle / "src"), str(bundle / "poses" / "poses.json")
    assert cli.main(["build-uv", "--source", src, "--ckpt", str(ckpt), "--out", str(tmp_path / "uv")]) == 0
    assert (tmp_path / "uv" / "unified.npz").exists() and (tmp_path / "uv" / "uv_texture.png").exists()
    assert cli.main(["animate", "--source", src, "--ckpt", str(ckpt), "--poses", poses,
                     "--out", str(tmp_path / "anim")]) == 0
    frames = sorted((tmp_path / "anim" / "frames").glob("*.png"))
    assert [f.name for f in frames] == ["0000.png", "0001.png", "0002.png"]
    meta = json.loads((tmp_path / "anim" / "animation.json").read_text())
    assert len(meta["frames"]) == 3 and "unified_sha256" in meta
    assert cli.main(["ablate", "--id", "SGR+2view", "--source", src, "--ckpt", str(ckpt), "--poses", poses,
                     "--gt", str(bundle / "poses" / "gt"), "--out", str(tmp_path / "abl")]) == 0
    assert (tmp_path / "abl" / "scores.json").exists()
    assert cli.main(["eval", "--pred", str(tmp_path / "anim" / "frames"), "--gt", str(bundle / "poses" / "gt"),
                     "--ckpt", str(ckpt), "--method", "SGR", "--out", str(tmp_path / "ev")]) == 0
    for f in ("report_perceptual.csv", "report_perceptual.md", "report_cs.csv", "report_cs.md", "scores.json"):
        assert (tmp_path / "ev" / f).exists(), f
    assert _run(tmp_path / "ev")["command"] == "eval"


def test_animation_is_reproducible(bundle, ckpt, tmp_path):
    args = ["animate", "--source", str(bundle / "src"), "--ckpt", str(ckpt),
            "--poses", str(bundle / "poses" / "poses.json")]
    for d in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / d)]) == 0
    for f in sorted((tmp_path / "a" / "frames").glob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / "frames" / f.name).read_bytes()


def test_config_file_overrides_flags(bundle, tmp_path):
    (tmp_path / "c.toml").write_text("n = 2\nkind = \"identity\"\n")
    (tmp_path / "c.json").write_text(json.dumps({"n": 4}))
    assert cli.main(["make-poses", "--source", str(bundle / "src"), "--n", "7", "--config", str(tmp_path / "c.toml"),
                     "--out", str(tmp_path / "p1")]) == 0
    assert cli.main(["make-poses", "--source", str(bundle / "src"), "--n", "7", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "p2")]) == 0
    assert len(json.loads((tmp_path / "p1" / "poses.json").read_text())["frames"]) == 2
    assert len(json.loads((tmp_path / "p2" / "poses.json").read_text())["frames"]) == 4
    assert _run(tmp_path / "p1")["config"] == {"n": 2, "kind": "identity"}


def test_exit_codes(bundle, ckpt, tmp_path, monkeypatch, capsys):
    # 2: validation
    assert cli.main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path), "--out", str(tmp_path / "e")]) == 2
    assert cli.main(["ablate", "--id", "SGR-L_KL", "--source", str(bundle / "src"), "--ckpt", str(ckpt),
                     "--poses", str(bundle / "poses" / "poses.json"), "--out", str(tmp_path / "k")]) == 2
    assert "without the KL" in capsys.readouterr().err
    # 4: missing input
    assert cli.main(["build-uv", "--source", str(tmp_path / "nope"), "--ckpt", str(ckpt),
                     "--out", str(tmp_path / "x")]) == 4
    assert cli.main(["build-uv", "--source", str(bundle / "src"), "--ckpt", str(tmp_path / "nock"),
                     "--out", str(tmp_path / "y")]) == 4
    # 3: divergence
    monkeypatch.setattr(tr, "l_sil", lambda p, g: (p - g).abs().mean() * float("nan"))
    (tmp_path / "t.json").write_text(json.dumps({
        "data": {"n_figures": 1, "pairs_per_figure": 2, "size": 32, "uv_shape": [64, 96]},
        "net": {"width": 4, "depth": 2, "latent": 8, "disc_depth": 2}}))
    assert cli.main(["train", "--net", "sil", "--steps", "2", "--config", str(tmp_path / "t.json"),
                     "--out", str(tmp_path / "tr")]) == 3
    assert (tmp_path / "tr" / "sil_last_good.npz").exists()


def test_train_sil_writes_checkpoint_and_curve(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps({
        "data": {"n_figures": 1, "pairs_per_figure": 2, "size": 32, "uv_shape": [64, 96]},
        "net": {"width": 4, "depth": 2, "latent": 8, "disc_depth": 2}}))
    assert cli.main(["train", "--net", "sil", "--steps", "3", "--config", str(tmp_path / "t.json"),
                     "--out", str(tmp_path / "tr")]) == 0
    tr.load_checkpoint(tmp_path / "tr" / "sil_final.npz", "sil")
    assert (tmp_path / "tr" / "sil_loss.csv").read_text().count("\n") == 4
    assert _run(tmp_path / "tr")["result"]["final"]["step"] == 2


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate", "--out", "x"])
