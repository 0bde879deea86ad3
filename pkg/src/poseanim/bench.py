"""Held-out evaluation suites for trained model sets.

Figures here come from figure indices the desk training set never uses
(training draws indices 0..n_figures-1 under the same master seed).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import synthdata as sd
from .core import N_GARMENT_CLASSES, N_POSE_CLASSES, RgbImage, UvAtlas
from .metrics import perceptual_distance
from .pipeline import (AnimationJob, CoverageWarning, FramePose, SourceView, SyntheticBody, ablation, animate)
from .training import DeskConfig, ModelSet, image_t, onehot, plane
from .uvwarp import composite, project_to_uv, sample_pseudo

SANITY_OFFSET = 20  # first held-out figure index for the per-network checks
SUITE_OFFSET = 100  # first held-out figure index for the animation suites
FRAME_VIEWS = (("front", "left", "right", "back"), (0.4, 0.2, 0.2, 0.2))


def _atlas(dc: DeskConfig) -> UvAtlas:
    return UvAtlas.grid(*dc.data.uv_shape)


def held_out_pairs(dc: DeskConfig, n_figures: int = 5, pairs: int = 10, same_pose: bool = False):
    atlas, ms = _atlas(dc), dc.data.master_seed
    out = []
    for i in range(SANITY_OFFSET, SANITY_OFFSET + n_figures):
        spec = sd.generate_figure(sd.figure_seed(ms, i))
        for j in range(pairs):
            out.append(sd.make_pair(spec, sd.pair_seed(ms, i, j), dc.data.size, atlas, same_pose=same_pose))
    return out


def _src(sc):
    return {"p": onehot(sc.pose.data[None], N_POSE_CLASSES), "s": plane(sc.sil.bool[None]),
            "g": onehot(sc.gar.data[None], N_GARMENT_CLASSES),
            "i": image_t((sc.image.data * sc.sil.bool[..., None])[None])}


@torch.no_grad()
def network_sanity(models: ModelSet, n_figures: int = 5, pairs: int = 10) -> dict[str, float]:
    """Held-out SilNet IoU, GarNet accuracy inside S_t, RenderNet identity-pose L1 on body pixels.

    GarNet and RenderNet are teacher-forced with the ground-truth S_t (and G_t
    for RenderNet); their pseudo inputs come from warping the source through
    UV exactly as at inference.
    """
    dc = models.config
    ious, accs = [], []
    for src, tgt in held_out_pairs(dc, n_figures, pairs):
        s = _src(src)
        p_t = onehot(tgt.pose.data[None], N_POSE_CLASSES)
        pred = models.sil(p_t, s["p"], s["s"], s["g"])[0, 0].numpy() > 0.5
        gt = tgt.sil.bool
        ious.append((pred & gt).sum() / max(1, (pred | gt).sum()))
        mask = src.sil.bool & (src.gar.data != 0)
        gp, _ = sample_pseudo(project_to_uv(src.gar, src.warp, mask=mask), tgt.warp)
        gp = np.where(gt, gp.data, 0)
        probs = models.gar(onehot(gp[None], N_GARMENT_CLASSES), plane((gp != 0)[None]), p_t, plane(gt[None]),
                           s["p"], s["s"], s["g"])
        accs.append((probs.argmax(1)[0].numpy() == tgt.gar.data)[gt].mean())
    l1s = []
    for src, tgt in held_out_pairs(dc, n_figures, pairs, same_pose=True):
        s = _src(src)
        mask = src.sil.bool & (src.gar.data != 0)
        ip, cov = sample_pseudo(project_to_uv(src.image, src.warp, mask=mask), tgt.warp)
        st = tgt.sil.bool
        cv = cov.bool & st
        out, _, _ = models.render(image_t((ip.data * cv[..., None])[None]), plane(cv[None]), plane(st[None]),
                                  onehot(tgt.gar.data[None], N_GARMENT_CLASSES), s["i"], s["s"], s["g"])
        img = (out * plane(st[None]))[0].permute(1, 2, 0).numpy()
        body = tgt.pose.data != 0
        l1s.append(np.abs(img - tgt.image.data)[body].mean())
    return {"sil_iou": float(np.mean(ious)), "gar_acc": float(np.mean(accs)), "render_l1": float(np.mean(l1s))}


# ---------------------------------------------------------------- animation suites


@dataclass
class Sequence:
    name: str
    source: SourceView
    extra: dict[str, SourceView]
    body: SyntheticBody
    frames: list[FramePose]
    gt: list[RgbImage]


def _sequence(name, spec, pose, bg, targets, dc: DeskConfig) -> Sequence:
    atlas, size = _atlas(dc), dc.data.size
    src = SourceView.from_scene(sd.render_scene(spec, pose, "front", size, atlas), bg)
    extra = {v: SourceView.from_scene(sd.render_scene(spec, pose, v, size, atlas), bg)
             for v in ("back", "left", "right")}
    frames, gt = [], []
    for p, view in targets:
        sc = sd.render_scene(spec, p, view, size, atlas)
        frames.append(FramePose(sc.pose, sc.warp))
        gt.append(composite(sc.image, sc.sil, bg))
    return Sequence(name, src, extra, SyntheticBody(spec, size, atlas), frames, gt)


def held_out_sequence(index: int, dc: DeskConfig = DeskConfig(), n_frames: int = 8) -> Sequence:
    """Front-view source in a random pose, then random target poses and views."""
    k = SUITE_OFFSET + index
    spec = sd.generate_figure(sd.figure_seed(dc.data.master_seed, k))
    rng = np.random.default_rng([k, 0x5E0])
    pose = sd.sample_pose(rng, tpose_prob=0.0)
    views, probs = FRAME_VIEWS
    targets = [(sd.sample_pose(rng), str(rng.choice(views, p=probs))) for _ in range(n_frames)]
    return _sequence(f"seq{index:02d}", spec, pose, sd.render_background(k, dc.data.size), targets, dc)


def turntable_sequence(index: int = 0, dc: DeskConfig = DeskConfig(), n_frames: int = 30) -> Sequence:
    """A figure turning half a revolution while swinging its arms."""
    k = SUITE_OFFSET + 50 + index
    spec = sd.generate_figure(sd.figure_seed(dc.data.master_seed, k))
    clip = sd.turntable_clip(n_frames, seed=k)
    return _sequence(f"turn{index:02d}", spec, clip[0][0], sd.render_background(k, dc.data.size), clip, dc)


def score_sequence(models: ModelSet, seq: Sequence, ablation_id: str = "SGR") -> dict:
    """Animate ``seq`` under one ablation and score every frame against ground truth."""
    job = AnimationJob(seq.source, seq.frames, models, seq.body, ablation(ablation_id), extra=seq.extra)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        res = animate(job)
    scores = [perceptual_distance(f, g, models.extractor) for f, g in zip(res.frames, seq.gt)]
    return {"frames": scores, "mean": float(np.mean(scores)), "coverage": res.unified.coverage,
            "reachable_coverage": res.unified.reachable_coverage}


def run_suite(models: ModelSet, ids, n_sequences: int = 6, n_frames: int = 8) -> dict[str, dict[str, dict]]:
    """``{ablation id: {sequence name: score_sequence result}}`` over the held-out suite."""
    seqs = [held_out_sequence(i, models.config, n_frames) for i in range(n_sequences)]
    return {a: {s.name: score_sequence(models, s, a) for s in seqs} for a in ids}


@torch.no_grad()
def identity_checks(models: ModelSet, n_figures: int = 5, pairs: int = 10) -> dict[str, float]:
    """Easy-case behaviour of each trained network on held-out identity-pose pairs.

    SilNet gets P_t = P_s and is scored by IoU against S^s. GarNet gets the
    complete ground-truth labels as its pseudo input; RenderNet gets the
    masked ground-truth image with full coverage. Both are scored inside S_t.
    """
    ious, accs, l1s = [], [], []
    for src, tgt in held_out_pairs(models.config, n_figures, pairs, same_pose=True):
        s = _src(src)
        p_t = onehot(tgt.pose.data[None], N_POSE_CLASSES)
        pred = models.sil(p_t, s["p"], s["s"], s["g"])[0, 0].numpy() > 0.5
        ious.append((pred & src.sil.bool).sum() / max(1, (pred | src.sil.bool).sum()))
        st = tgt.sil.bool
        g_full = onehot(np.where(st, tgt.gar.data, 0)[None], N_GARMENT_CLASSES)
        probs = models.gar(g_full, plane(st[None]), p_t, plane(st[None]), s["p"], s["s"], s["g"])
        accs.append((probs.argmax(1)[0].numpy() == tgt.gar.data)[st].mean())
        out, _, _ = models.render(image_t((tgt.image.data * st[..., None])[None]), plane(st[None]),
                                  plane(st[None]), onehot(tgt.gar.data[None], N_GARMENT_CLASSES),
                                  s["i"], s["s"], s["g"])
        img = out[0].permute(1, 2, 0).numpy()
        l1s.append(np.abs(img - tgt.image.data)[st].mean())
    return {"sil_identity_iou": float(np.mean(ious)), "gar_complete_acc": float(np.mean(accs)),
            "render_identity_l1": float(np.mean(l1s))}


@torch.no_grad()
def adversarial_balance(models: ModelSet, untrained: torch.nn.Module, n_figures: int = 5,
                        pairs: int = 10) -> dict[str, float]:
    """Held-out L_rec of trained vs untrained RenderNet, and discriminator accuracy.

    Inputs are the inference-time pseudo images (source warped through UV).
    A patch score above 0.5 counts as "real"; accuracy averages the real
    pairs {I_gt, G_gt} and the fake pairs {I_t, G_gt}.
    """
    rec, rec0, hits = [], [], []
    for src, tgt in held_out_pairs(models.config, n_figures, pairs):
        s = _src(src)
        mask = src.sil.bool & (src.gar.data != 0)
        ip, cov = sample_pseudo(project_to_uv(src.image, src.warp, mask=mask), tgt.warp)
        st = tgt.sil.bool
        cv = cov.bool & st
        g_t = onehot(tgt.gar.data[None], N_GARMENT_CLASSES)
        args = (image_t((ip.data * cv[..., None])[None]), plane(cv[None]), plane(st[None]), g_t,
                s["i"], s["s"], s["g"])
        gt = image_t((tgt.image.data * st[..., None])[None])
        m = plane(st[None])
        fake = models.render(*args)[0] * m
        rec.append((fake - gt).abs().mean().item())
        rec0.append((untrained(*args)[0] * m - gt).abs().mean().item())
        hits.append((models.disc(gt, g_t) > 0.5).float().mean().item())
        hits.append((models.disc(fake, g_t) <= 0.5).float().mean().item())
    return {"l_rec": float(np.mean(rec)), "l_rec_untrained": float(np.mean(rec0)),
            "disc_acc": float(np.mean(hits))}
