"""Inference: unified UV maps from one source image, then per-frame synthesis.

The unified label map L and texture map A are seeded from the source image
and grown by synthesising the figure in a T-pose from six virtual views
(front, back, left, right, top, bottom).  The back view skips the networks
and mirrors the synthesised front instead.  Frames then read pseudo labels
and a pseudo image out of (L, A) and run SilNet -> GarNet -> RenderNet.
"""
from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

from . import synthdata as sd
from .core import (N_GARMENT_CLASSES, N_POSE_CLASSES, GarmentMap, InvariantError, PoseMap, RgbImage,
                   SilhouetteMask, UvLabelMap, UvTextureMap, WarpField)
from .training import ModelSet, image_t, onehot, plane
from .uvwarp import composite, merge_uv, project_to_uv, sample_pseudo, symmetry_complete_back

BUILD_VIEWS = ("front", "back", "left", "right", "top", "bottom")


class CoverageWarning(UserWarning):
    pass


BodyFn = Callable[[sd.PoseParams, object], tuple[PoseMap, WarpField]]


@dataclass(frozen=True)
class Ablation:
    """Switches for removing or bypassing pipeline components."""
    sil: bool = True  # False: target silhouette := undressed body mask
    gar: bool = True  # False: target labels := pseudo labels read from L
    src_sil: bool = True  # False: source silhouette := source body mask
    src_gar: bool = True  # False: source labels := zeros
    z: bool = True  # False: appearance code := 0
    pseudo_img: bool = True  # False: pseudo image and its coverage zeroed
    unified_a: bool = True  # False: pseudo image warped from the source alone
    extra_views: tuple[str, ...] = ()  # real views merged right after the source
    no_kl_render: bool = False  # use the RenderNet trained without the KL term


ABLATIONS = {
    "SGR": Ablation(),
    "R": Ablation(sil=False, gar=False),
    "SR": Ablation(gar=False),
    "GR": Ablation(sil=False),
    "SGR-S^s": Ablation(src_sil=False),
    "SGR-G^s": Ablation(src_gar=False),
    "SGR-z^s": Ablation(z=False),
    "SGR-L_KL": Ablation(no_kl_render=True),
    "SGR-Ĩ^t": Ablation(pseudo_img=False),
    "SGR-A": Ablation(unified_a=False),
    "SGR+2view": Ablation(extra_views=("back",)),
    "SGR+4view": Ablation(extra_views=("back", "left", "right")),
}


def ablation(name: str) -> Ablation:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation id {name!r}; known: {', '.join(ABLATIONS)}") from None


@dataclass
class SourceView:
    """An observed image with its silhouette, labels, body pose map and warp."""
    image: RgbImage  # may include background
    sil: SilhouetteMask
    gar: GarmentMap
    pose: PoseMap
    warp: WarpField

    @classmethod
    def from_scene(cls, sc: sd.SceneSample, background: RgbImage | None = None) -> "SourceView":
        img = sc.image if background is None else composite(sc.image, sc.sil, background)
        return cls(img, sc.sil, sc.gar, sc.pose, sc.warp)

    @property
    def foreground(self) -> RgbImage:
        return RgbImage(self.image.data * self.sil.bool[..., None])


@dataclass
class FramePose:
    pose: PoseMap
    warp: WarpField
    scale: float = 1.0


@dataclass
class UnifiedRepresentation:
    labels: UvLabelMap
    texture: UvTextureMap
    log: list[dict] = field(default_factory=list)
    source_texture: UvTextureMap | None = None
    reachable: np.ndarray | None = None  # cells seen by the source or any build view

    @property
    def reachable_coverage(self) -> float:
        if self.reachable is None or not self.reachable.any():
            return float("nan")
        return float((self.labels.valid & self.reachable).sum() / self.reachable.sum())

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.labels.labels, self.labels.valid, self.texture.texture, self.texture.valid):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    @property
    def coverage(self) -> float:
        return self.labels.coverage()


class SyntheticBody:
    """Body model for generated figures: pose map and warp of any pose and view."""

    def __init__(self, spec: sd.FigureSpec, size: int, atlas):
        self.spec, self.size, self.atlas = spec, size, atlas

    def __call__(self, pose: sd.PoseParams, view) -> tuple[PoseMap, WarpField]:
        sc = sd.render_scene(self.spec, pose, view, self.size, self.atlas)
        return sc.pose, sc.warp


# ---------------------------------------------------------------- network glue


def _src_tensors(src: SourceView, ab: Ablation) -> dict[str, torch.Tensor]:
    sil = src.sil.bool if ab.src_sil else src.pose.data != 0
    gar = onehot(src.gar.data[None], N_GARMENT_CLASSES)
    if not ab.src_gar:
        gar = torch.zeros_like(gar)
    return {"p": onehot(src.pose.data[None], N_POSE_CLASSES), "s": plane(sil[None]), "g": gar,
            "i": image_t((src.image.data * sil[..., None])[None])}


def _render_net(models: ModelSet, ab: Ablation):
    if ab.no_kl_render:
        net = getattr(models, "render_nokl", None)
        if net is None:
            raise ValueError("this ablation needs a RenderNet checkpoint trained without the KL term")
        return net
    return models.render


@torch.no_grad()
def run_networks(models: ModelSet, ab: Ablation, src: dict, pose: PoseMap, warp: WarpField,
                 labels: UvLabelMap, texture: UvTextureMap):
    """SilNet -> GarNet -> RenderNet for one target pose map; returns (I, S, G)."""
    p_t = onehot(pose.data[None], N_POSE_CLASSES)
    body = pose.data != 0
    if ab.sil:
        s = models.sil(p_t, src["p"], src["s"], src["g"])[0, 0].numpy() > 0.5
    else:
        s = body
    s_t = plane(s[None])
    g_pseudo, _ = sample_pseudo(labels, warp)
    gp = np.where(s, g_pseudo.data, 0).astype(np.uint8)
    if ab.gar:
        probs = models.gar(onehot(gp[None], N_GARMENT_CLASSES), plane((gp != 0)[None]), p_t, s_t,
                           src["p"], src["s"], src["g"])
        g = probs.argmax(1)[0].numpy().astype(np.uint8)
    else:
        g = gp
    i_pseudo, cov = sample_pseudo(texture, warp)
    cv = cov.bool & s
    ip = i_pseudo.data * cv[..., None]
    if not ab.pseudo_img:
        ip, cv = np.zeros_like(ip), np.zeros_like(cv)
    render = _render_net(models, ab)
    z = torch.zeros(1, render.cfg.latent) if not ab.z else None
    out, _, _ = render(image_t(ip[None]), plane(cv[None]), s_t, onehot(g[None], N_GARMENT_CLASSES),
                       src["i"], src["s"], src["g"], z_override=z)
    img = (out * s_t)[0].permute(1, 2, 0).numpy()
    return RgbImage(np.clip(img, 0, 1)), SilhouetteMask.from_bool(s), GarmentMap(g)


# ---------------------------------------------------------------- unified UV


def _project_pair(img: RgbImage, sil, gar: GarmentMap, warp: WarpField):
    mask = sil & (gar.data != 0)
    return project_to_uv(gar, warp, mask=mask), project_to_uv(img, warp, mask=mask)


def build_unified_uv(source: SourceView, models: ModelSet, body: BodyFn, ab: Ablation = Ablation(),
                     views=BUILD_VIEWS, extra: dict[str, SourceView] | None = None,
                     min_coverage: float = 0.5, trace: list | None = None) -> UnifiedRepresentation:
    """Seed (L, A) from the source, merge real extra views, then the virtual T-pose views.

    ``trace`` (if given) collects ``(view, image, silhouette, labels)`` per virtual view.
    """
    src = _src_tensors(source, ab)
    L, A = _project_pair(source.image, source.sil.bool, source.gar, source.warp)
    src_A = A
    reach = source.warp.inverse[..., 0] >= 0
    log = [{"step": "source", "coverage": L.coverage()}]
    for name in ab.extra_views:
        if not extra or name not in extra:
            raise ValueError(f"extra view {name!r} requested but not supplied")
        v = extra[name]
        l2, a2 = _project_pair(v.image, v.sil.bool, v.gar, v.warp)
        L, A = merge_uv(L, l2), merge_uv(A, a2)
        reach |= v.warp.inverse[..., 0] >= 0
        log.append({"step": f"real-{name}", "coverage": L.coverage()})
    front = None
    tpose = sd.t_pose()
    for view in views:
        pose, warp = body(tpose, view)
        reach |= warp.inverse[..., 0] >= 0
        if view == "back":
            if front is None:
                raise ValueError("the back view is built from the front view; order front first")
            f_img, f_sil, f_gar = front
            b_img, b_gar = symmetry_complete_back(f_img, f_gar)
            b_sil = f_sil.bool[:, ::-1] & (b_gar.data != 0)
            l2, a2 = _project_pair(b_img, b_sil, b_gar, warp)
            if trace is not None:
                trace.append((view, b_img, SilhouetteMask.from_bool(b_sil), b_gar))
        else:
            img, sil, gar = run_networks(models, ab, src, pose, warp, L, A)
            if view == "front":
                front = (img, sil, gar)
            l2, a2 = _project_pair(img, sil.bool, gar, warp)
            if trace is not None:
                trace.append((view, img, sil, gar))
        L, A = merge_uv(L, l2), merge_uv(A, a2)
        log.append({"step": view, "coverage": L.coverage()})
    if not np.array_equal(L.valid, A.valid):
        raise InvariantError("label and texture validity diverged")
    out = UnifiedRepresentation(L, A, log, src_A, reach)
    if out.reachable_coverage < min_coverage:
        warnings.warn(f"unified UV covers {out.reachable_coverage:.3f} of reachable cells "
                      f"(< {min_coverage}); check warp fields", CoverageWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------- frames


def scale_about(pose: PoseMap, warp: WarpField, s: float, centre=None) -> tuple[PoseMap, WarpField]:
    """Uniform nearest-neighbour image scaling of a pose map and warp about ``centre``."""
    if s == 1.0:
        return pose, warp
    h, w = pose.shape
    if centre is None:
        hip = pose.data == sd.HIP
        ys, xs = np.nonzero(hip if hip.any() else pose.data != 0)
        centre = (ys.mean(), xs.mean()) if len(ys) else (h / 2, w / 2)
    cy, cx = centre
    yy, xx = np.mgrid[0:h, 0:w]
    sy = np.floor((yy + 0.5 - cy) / s + cy).astype(int)
    sx = np.floor((xx + 0.5 - cx) / s + cx).astype(int)
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    sy, sx = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    part = np.where(ok, warp.part[sy, sx], 0)
    u = np.where(ok, warp.u[sy, sx], 0)
    v = np.where(ok, warp.v[sy, sx], 0)
    return PoseMap(part.astype(np.uint8)), WarpField(part, u, v, warp.atlas)


def synthesize_frame(unified: UnifiedRepresentation, frame: FramePose, models: ModelSet,
                     source: SourceView, ab: Ablation = Ablation(), src_tensors=None):
    pose, warp = scale_about(frame.pose, frame.warp, frame.scale)
    src = src_tensors or _src_tensors(source, ab)
    texture = unified.texture if ab.unified_a else unified.source_texture
    return run_networks(models, ab, src, pose, warp, unified.labels, texture)


def inpaint_background(image: RgbImage, sil: SilhouetteMask) -> RgbImage:
    """Harmonic fill of the silhouette region (the converged 4-neighbour diffusion).

    Known pixels act as Dirichlet data; image borders are reflecting.
    """
    hole = sil.bool
    if not hole.any():
        return image
    h, w = hole.shape
    if hole.all():
        return RgbImage(np.zeros_like(image.data))
    idx = -np.ones((h, w), np.int64)
    ys, xs = np.nonzero(hole)
    n = len(ys)
    idx[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 3))
    diag = np.zeros(n)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inb = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        diag += inb
        nyc, nxc = np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)
        unk = inb & hole[nyc, nxc]
        kn = inb & ~hole[nyc, nxc]
        rows.append(np.flatnonzero(unk))
        cols.append(idx[nyc[unk], nxc[unk]])
        vals.append(-np.ones(unk.sum()))
        rhs[kn] += image.data[nyc[kn], nxc[kn]]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    solve = spla.factorized(mat.tocsc())
    out = image.data.astype(np.float64).copy()
    for c in range(3):
        out[ys, xs, c] = solve(rhs[:, c])
    return RgbImage(np.clip(out, 0, 1))


@dataclass
class AnimationJob:
    source: SourceView
    frames: list[FramePose]
    models: ModelSet
    body: BodyFn
    ablation: Ablation = Ablation()
    extra: dict[str, SourceView] | None = None
    unified: UnifiedRepresentation | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("pose sequence is empty")
        atlas = self.source.warp.atlas
        if any(f.warp.atlas != atlas for f in self.frames):
            raise ValueError("all warp fields must share one atlas")


@dataclass
class AnimationResult:
    frames: list[RgbImage]
    raw: list[tuple[RgbImage, SilhouetteMask, GarmentMap]]
    unified: UnifiedRepresentation
    background: RgbImage
    meta: dict


class FrameError(RuntimeError):
    def __init__(self, msg, partial: AnimationResult):
        super().__init__(msg)
        self.partial = partial


def frame_hash(img: RgbImage) -> str:
    return hashlib.sha256(np.ascontiguousarray(img.data).tobytes()).hexdigest()


def animate(job: AnimationJob) -> AnimationResult:
    t0 = time.time()
    unified = job.unified or build_unified_uv(job.source, job.models, job.body, job.ablation,
                                              extra=job.extra)
    before = unified.digest()
    bg = inpaint_background(job.source.image, job.source.sil)
    src = _src_tensors(job.source, job.ablation)
    res = AnimationResult([], [], unified, bg, {"unified_sha256": before, "coverage_log": unified.log,
                                                "frames": []})
    for k, fp in enumerate(job.frames):
        t = time.time()
        try:
            img, sil, gar = synthesize_frame(unified, fp, job.models, job.source, job.ablation, src)
        except Exception as e:
            res.meta["failed_frame"] = k
            raise FrameError(f"frame {k}: {e}", res) from e
        out = composite(img, sil, bg)
        res.frames.append(out)
        res.raw.append((img, sil, gar))
        res.meta["frames"].append({"index": k, "sha256": frame_hash(out), "seconds": time.time() - t})
    if unified.digest() != before:
        raise InvariantError("unified representation changed during animation")
    res.meta["seconds"] = time.time() - t0
    return res


def with_ablation(job: AnimationJob, name: str) -> AnimationJob:
    return replace(job, ablation=ablation(name), unified=None)
