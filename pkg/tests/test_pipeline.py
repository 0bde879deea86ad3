import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from poseanim import pipeline as pl
from poseanim import synthdata as sd
from poseanim.core import PoseMap, RgbImage, SilhouetteMask, UvAtlas
from poseanim.uvwarp import project_to_uv, sample_pseudo, symmetry_complete_back

from conftest import SMALL, SMALL_UV


def _bg(seed=0, size=SMALL):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    return RgbImage(np.clip(np.stack([0.3 + 0.4 * yy, 0.5 + 0.2 * xx, 0.4 + 0.1 * rng.random((size, size))], -1),
                            0, 1))


@pytest.fixture(scope="module")
def setup(figure, atlas, scene, tiny_models):
    src = pl.SourceView.from_scene(scene, _bg())
    body = pl.SyntheticBody(figure, SMALL, atlas)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pl.CoverageWarning)
        trace = []
        uni = pl.build_unified_uv(src, tiny_models, body, trace=trace)
    return src, body, uni, trace


def _frames(body, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [pl.FramePose(*body(sd.sample_pose(rng), "front")) for _ in range(n)]


# ---------------------------------------------------------------- background


def test_inpaint_constant_background_exact():
    img = RgbImage(np.full((16, 20, 3), 0.3))
    hole = np.zeros((16, 20), bool)
    hole[4:12, 5:15] = True
    out = pl.inpaint_background(img, SilhouetteMask.from_bool(hole))
    assert np.abs(out.data - 0.3).max() < 1e-6


def test_inpaint_empty_and_full_masks():
    img = _bg(size=8)
    assert pl.inpaint_background(img, SilhouetteMask(np.zeros((8, 8)))) == img
    assert pl.inpaint_background(img, SilhouetteMask(np.ones((8, 8)))).data.max() == 0


def _jacobi(img, hole, iters=20000):
    out = np.where(hole[..., None], 0.0, img)
    pad = lambda a: np.pad(a, ((1, 1), (1, 1), (0, 0)), mode="edge")
    for _ in range(iters):
        p = pad(out)
        avg = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4
        out = np.where(hole[..., None], avg, img)
    return out


def test_inpaint_matches_converged_diffusion():
    rng = np.random.default_rng(2)
    img = rng.random((12, 12, 3))
    hole = np.zeros((12, 12), bool)
    hole[3:9, 0:7] = True  # touches the border, exercising the reflecting boundary
    got = pl.inpaint_background(RgbImage(img), SilhouetteMask.from_bool(hole)).data
    ref = _jacobi(img, hole)
    assert np.abs(got - ref).max() < 1e-4
    assert np.array_equal(got[~hole], RgbImage(img).data[~hole])


@given(st.integers(0, 2 ** 31 - 1))
def test_inpaint_maximum_principle(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((10, 10, 3))
    hole = rng.random((10, 10)) < 0.4
    out = pl.inpaint_background(RgbImage(img), SilhouetteMask.from_bool(hole)).data
    known = img[~hole]
    assert (out[hole] >= known.min(0) - 1e-5).all() and (out[hole] <= known.max(0) + 1e-5).all()


# ---------------------------------------------------------------- unified UV


def test_source_only_initialisation(setup, tiny_models):
    src, body, _, _ = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pl.CoverageWarning)
        uni = pl.build_unified_uv(src, tiny_models, body, views=())
    mask = src.sil.bool & (src.gar.data != 0)
    assert uni.labels == project_to_uv(src.gar, src.warp, mask=mask)
    assert uni.texture == project_to_uv(src.image, src.warp, mask=mask)
    assert [e["step"] for e in uni.log] == ["source"]


def test_back_view_is_mirrored_front(setup):
    _, _, _, trace = setup
    views = [t[0] for t in trace]
    assert views == list(pl.BUILD_VIEWS)
    _, f_img, f_sil, f_gar = trace[0]
    _, b_img, b_sil, b_gar = trace[1]
    ref_img, ref_gar = symmetry_complete_back(f_img, f_gar)
    assert b_img == ref_img and b_gar == ref_gar
    assert np.array_equal(b_sil.bool, f_sil.bool[:, ::-1] & (ref_gar.data != 0))


def test_label_and_texture_validity_agree(setup):
    _, _, uni, _ = setup
    assert np.array_equal(uni.labels.valid, uni.texture.valid)
    assert (uni.source_texture.valid <= uni.texture.valid).all()
    assert 0 < uni.reachable_coverage <= 1


@pytest.mark.parametrize("fig", range(20))
def test_coverage_log_monotone(fig, tiny_models, atlas):
    spec = sd.generate_figure(fig)
    sc = sd.render_scene(spec, sd.sample_pose(np.random.default_rng(fig)), "front", 32, UvAtlas.grid(64, 96))
    body = pl.SyntheticBody(spec, 32, UvAtlas.grid(64, 96))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pl.CoverageWarning)
        uni = pl.build_unified_uv(pl.SourceView.from_scene(sc), tiny_models, body)
    cov = [e["coverage"] for e in uni.log]
    assert all(b >= a for a, b in zip(cov, cov[1:])), cov


def test_extra_view_grows_coverage_before_virtual_views(setup, figure, atlas, tiny_models):
    src, body, _, _ = setup
    back = sd.render_scene(figure, sd.t_pose(), "back", SMALL, atlas)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pl.CoverageWarning)
        uni = pl.build_unified_uv(src, tiny_models, body, pl.ablation("SGR+2view"),
                                  extra={"back": pl.SourceView.from_scene(back)})
        with pytest.raises(ValueError, match="not supplied"):
            pl.build_unified_uv(src, tiny_models, body, pl.ablation("SGR+2view"))
    steps = {e["step"]: e["coverage"] for e in uni.log}
    assert steps["real-back"] > steps["source"]


def test_low_coverage_warns(setup, tiny_models):
    src, body, _, _ = setup
    # R only copies pseudo labels, so cells first seen by a virtual view stay empty
    with pytest.warns(pl.CoverageWarning):
        uni = pl.build_unified_uv(src, tiny_models, body, pl.ablation("R"), views=("left",), min_coverage=0.99)
    assert uni.reachable_coverage < 0.99


def test_back_before_front_rejected(setup, tiny_models):
    src, body, _, _ = setup
    with pytest.raises(ValueError, match="front first"):
        pl.build_unified_uv(src, tiny_models, body, views=("back",))


# ---------------------------------------------------------------- ablations


def test_ablation_registry():
    assert set(pl.ABLATIONS) >= {"SGR", "R", "SR", "GR", "SGR-S^s", "SGR-G^s", "SGR-z^s", "SGR-L_KL", "SGR-Ĩ^t",
                                 "SGR-A", "SGR+2view", "SGR+4view"}
    with pytest.raises(ValueError, match="unknown ablation"):
        pl.ablation("XYZ")


class _Recorder(torch.nn.Module):
    """RenderNet stand-in that records its inputs and returns a constant image."""

    def __init__(self, latent=8):
        super().__init__()
        self.cfg = type("C", (), {"latent": latent})()
        self.calls = []

    def forward(self, i_p, cov, s_t, g_t, i_s, s_s, g_s, noise=None, z_override=None):
        self.calls.append(dict(i_p=i_p, cov=cov, s_t=s_t, g_t=g_t, s_s=s_s, g_s=g_s, z=z_override))
        return torch.full_like(i_p, 0.5), None, None


def _run(models, name, setup, scene):
    src, _, uni, _ = setup
    rec = _Recorder()
    m = replace(models, render=rec, render_nokl=rec)
    ab = pl.ablation(name)
    out = pl.run_networks(m, ab, pl._src_tensors(src, ab), scene.pose, scene.warp, uni.labels, uni.texture)
    return out, rec.calls[0]


def test_bypass_ablations(tiny_models, setup, scene):
    (_, sil, gar), _ = _run(tiny_models, "R", setup, scene)
    assert np.array_equal(sil.bool, scene.pose.data != 0)
    uni = setup[2]
    gp, _ = sample_pseudo(uni.labels, scene.warp)
    assert np.array_equal(gar.data, np.where(sil.bool, gp.data, 0))


class _Forbidden(torch.nn.Module):
    def forward(self, *a, **k):
        raise AssertionError("bypassed network was called")


def test_r_bypasses_sil_and_gar_nets(tiny_models, setup, scene):
    m = replace(tiny_models, sil=_Forbidden(), gar=_Forbidden())
    (_, _, gar), call = _run(m, "R", setup, scene)
    uni = setup[2]
    ip, cov = sample_pseudo(uni.texture, scene.warp)
    body = scene.pose.data != 0
    expect = torch.from_numpy((cov.bool & body).astype(np.float32))
    assert torch.equal(call["cov"][0, 0], expect)
    assert torch.allclose(call["i_p"][0].permute(1, 2, 0), torch.from_numpy(ip.data * expect.numpy()[..., None]))


def test_sgr_id_equals_plain_animate(setup, tiny_models, body_frames, animation):
    src, body, uni, _ = setup
    job = pl.AnimationJob(src, body_frames, tiny_models, body)
    a = pl.animate(pl.with_ablation(job, "SGR"))
    assert [f["sha256"] for f in a.meta["frames"]] == [f["sha256"] for f in animation.meta["frames"]]


def test_input_ablations(tiny_models, setup, scene):
    _, full = _run(tiny_models, "SGR", setup, scene)
    _, no_img = _run(tiny_models, "SGR-Ĩ^t", setup, scene)
    _, no_z = _run(tiny_models, "SGR-z^s", setup, scene)
    _, no_g = _run(tiny_models, "SGR-G^s", setup, scene)
    _, no_s = _run(tiny_models, "SGR-S^s", setup, scene)
    assert full["i_p"].abs().sum() > 0 and full["z"] is None
    assert no_img["i_p"].abs().sum() == 0 and no_img["cov"].sum() == 0
    assert torch.equal(no_z["z"], torch.zeros(1, 8))
    assert no_g["g_s"].sum() == 0 and full["g_s"].sum() > 0
    assert torch.equal(no_s["s_s"][0, 0].bool(), torch.from_numpy(scene.pose.data != 0))
    # the rendered image is masked by the predicted silhouette
    assert ((full["cov"] <= full["s_t"])).all()


def test_no_kl_requires_checkpoint(tiny_models, setup, scene):
    src, _, uni, _ = setup
    ab = pl.ablation("SGR-L_KL")
    with pytest.raises(ValueError, match="without the KL"):
        pl.run_networks(tiny_models, ab, pl._src_tensors(src, ab), scene.pose, scene.warp, uni.labels, uni.texture)


def test_source_only_texture_ablation(tiny_models, setup, body_frames):
    src, body, uni, _ = setup
    a = pl.synthesize_frame(uni, body_frames[0], tiny_models, src)
    b = pl.synthesize_frame(uni, body_frames[0], tiny_models, src, pl.ablation("SGR-A"))
    c = pl.synthesize_frame(replace(uni, texture=uni.source_texture), body_frames[0], tiny_models, src)
    assert a[0] != b[0] and b[0] == c[0]


# ---------------------------------------------------------------- frames


@pytest.fixture(scope="module")
def body_frames(setup):
    return _frames(setup[1])


@pytest.fixture(scope="module")
def animation(setup, tiny_models, body_frames):
    src, body, uni, _ = setup
    return pl.animate(pl.AnimationJob(src, body_frames, tiny_models, body, unified=uni))


def test_unified_representation_constant(animation, setup):
    assert animation.meta["unified_sha256"] == setup[2].digest() == animation.unified.digest()
    assert len(animation.meta["frames"]) == 3


def test_background_conserved(animation, setup):
    src = setup[0]
    outside = ~src.sil.bool
    assert np.array_equal(animation.background.data[outside], src.image.data[outside])
    for out, (_, sil, _) in zip(animation.frames, animation.raw):
        bgpix = ~sil.bool
        assert np.array_equal(out.data[bgpix], animation.background.data[bgpix])


def test_identical_poses_identical_frames(setup, tiny_models, body_frames):
    src, body, uni, _ = setup
    res = pl.animate(pl.AnimationJob(src, [body_frames[1]] * 2, tiny_models, body, unified=uni))
    assert res.meta["frames"][0]["sha256"] == res.meta["frames"][1]["sha256"]


def test_frames_are_isolated(animation, setup, tiny_models, body_frames):
    src, body, uni, _ = setup
    solo = pl.animate(pl.AnimationJob(src, body_frames[2:], tiny_models, body, unified=uni))
    assert solo.meta["frames"][0]["sha256"] == animation.meta["frames"][2]["sha256"]


def test_frame_error_keeps_partial(setup, tiny_models, body_frames):
    src, body, uni, _ = setup
    bad = pl.FramePose(PoseMap(np.zeros((48, 48))), body_frames[0].warp)  # mismatched sizes
    with pytest.raises(pl.FrameError) as ei:
        pl.animate(pl.AnimationJob(src, [body_frames[0], bad], tiny_models, body, unified=uni))
    assert len(ei.value.partial.frames) == 1 and ei.value.partial.meta["failed_frame"] == 1


def test_job_validation(setup, tiny_models, body_frames):
    src, body, _, _ = setup
    with pytest.raises(ValueError, match="empty"):
        pl.AnimationJob(src, [], tiny_models, body)
    other = sd.render_scene(sd.generate_figure(0), sd.t_pose(), "front", SMALL, UvAtlas.grid(64, 96))
    with pytest.raises(ValueError, match="atlas"):
        pl.AnimationJob(src, [pl.FramePose(other.pose, other.warp)], tiny_models, body)


def test_with_ablation_rebuilds(setup, tiny_models, body_frames):
    src, body, uni, _ = setup
    job = pl.AnimationJob(src, body_frames, tiny_models, body, unified=uni)
    j2 = pl.with_ablation(job, "R")
    assert j2.unified is None and j2.ablation == pl.ABLATIONS["R"] and job.unified is uni


# ---------------------------------------------------------------- scaling


def test_scale_identity(scene):
    p, w = pl.scale_about(scene.pose, scene.warp, 1.0)
    assert p is scene.pose and w is scene.warp


@given(st.floats(0.6, 1.4))
def test_scale_changes_area_quadratically(s):
    # 128 px keeps limbs several pixels wide, so nearest-neighbour rounding stays small
    sc = sd.render_scene(sd.generate_figure(1), sd.t_pose(0.6), "front", 128, UvAtlas.grid(*SMALL_UV))
    p, w = pl.scale_about(sc.pose, sc.warp, s, centre=(64, 64))
    a0, a1 = (sc.pose.data != 0).sum(), (p.data != 0).sum()
    assert abs(a1 / a0 - s * s) <= 0.10 * s * s
    assert np.array_equal(p.data, w.part)
