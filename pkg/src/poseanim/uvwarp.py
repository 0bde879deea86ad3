"""Image <-> UV transfers, incremental UV completion and symmetry filling."""
from __future__ import annotations

import numpy as np

from .core import (G_BG, G_FACE, GarmentMap, InvariantError, RgbImage, SilhouetteMask, UvAtlas,
                   UvLabelMap, UvTextureMap, WarpField)

UvMap = UvLabelMap | UvTextureMap


def _check_atlas(w: WarpField, atlas: UvAtlas | None) -> UvAtlas:
    if atlas is not None and atlas != w.atlas:
        raise InvariantError("atlas does not match the warp field's charts")
    return w.atlas


def project_to_uv(src: GarmentMap | RgbImage, w: WarpField, atlas: UvAtlas | None = None,
                  mask: np.ndarray | None = None) -> UvMap:
    """Fill every canvas cell whose inverse-index pixel is on the body (and in ``mask``)."""
    atlas = _check_atlas(w, atlas)
    if src.shape != w.shape:
        raise InvariantError("map and warp field differ in size")
    ys, xs = w.inverse[..., 0], w.inverse[..., 1]
    hit = ys >= 0
    if mask is not None:
        hit[hit] &= np.asarray(mask, bool)[ys[hit], xs[hit]]
    if isinstance(src, GarmentMap):
        lab = np.zeros(atlas.shape, np.uint8)
        lab[hit] = src.data[ys[hit], xs[hit]]
        return UvLabelMap(lab, hit)
    tex = np.zeros(atlas.shape + (3,), np.float32)
    tex[hit] = src.data[ys[hit], xs[hit]]
    return UvTextureMap(tex, hit)


def sample_pseudo(uv: UvMap, w: WarpField):
    """Read the UV map at every body pixel's cell; holes where the cell is invalid.

    Returns (GarmentMap | RgbImage, coverage SilhouetteMask).
    """
    if uv.shape != w.atlas.shape:
        raise InvariantError("UV map and warp atlas differ in size")
    body = w.body
    r, c = w.cell_row[body], w.cell_col[body]
    ok = uv.valid[r, c]
    cov = np.zeros(w.shape, bool)
    cov[body] = ok
    by, bx = np.nonzero(body)
    if isinstance(uv, UvLabelMap):
        out = np.zeros(w.shape, np.uint8)
        out[by[ok], bx[ok]] = uv.labels[r[ok], c[ok]]
        return GarmentMap(out), SilhouetteMask.from_bool(cov)
    out = np.zeros(w.shape + (3,), np.float32)
    out[by[ok], bx[ok]] = uv.texture[r[ok], c[ok]]
    return RgbImage(out), SilhouetteMask.from_bool(cov)


def merge_uv(accum: UvMap, incoming: UvMap, policy: str = "keep-first") -> UvMap:
    if type(accum) is not type(incoming) or accum.shape != incoming.shape:
        raise InvariantError("cannot merge UV maps over different atlases")
    if policy == "keep-first":
        take = incoming.valid & ~accum.valid
    elif policy == "overwrite":
        take = incoming.valid
    else:
        raise ValueError(f"unknown merge policy {policy!r}")
    valid = accum.valid | incoming.valid
    if isinstance(accum, UvLabelMap):
        return UvLabelMap(np.where(take, incoming.labels, accum.labels), valid)
    return UvTextureMap(np.where(take[..., None], incoming.texture, accum.texture), valid)


def symmetry_complete_back(front_img: RgbImage, front_gar: GarmentMap,
                           face: np.ndarray | None = None) -> tuple[RgbImage, GarmentMap]:
    """Back view as the left-right mirror of the front; face pixels become holes."""
    if face is None:
        face = front_gar.data == G_FACE
    keep = ~np.asarray(face, bool)
    img = np.where(keep[..., None], front_img.data, 0.0)[:, ::-1]
    gar = np.where(keep, front_gar.data, G_BG)[:, ::-1]
    return RgbImage(img), GarmentMap(gar)


def composite(fg: RgbImage, sil: SilhouetteMask, bg: RgbImage) -> RgbImage:
    if fg.shape != sil.shape or fg.shape != bg.shape:
        raise InvariantError("composite inputs differ in size")
    return RgbImage(np.where(sil.bool[..., None], fg.data, bg.data))
