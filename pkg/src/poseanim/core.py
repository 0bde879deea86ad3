"""Image, label and UV data structures shared by every stage of the pipeline.

All arrays are stored read-only; "modifying" a map means building a new one.
Label maps are ``uint8`` grids, images are ``float32`` HxWx3 in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from scipy.spatial import cKDTree

N_POSE_CLASSES = 15
N_GARMENT_CLASSES = 7

POSE_LABELS = (
    "background", "torso", "head", "neck", "hip",
    "upper_arm_l", "upper_arm_r", "lower_arm_l", "lower_arm_r",
    "upper_leg_l", "upper_leg_r", "lower_leg_l", "lower_leg_r",
    "foot_l", "foot_r",
)
GARMENT_LABELS = ("background", "hair", "face", "skin", "shoes", "top", "bottom")
G_BG, G_HAIR, G_FACE, G_SKIN, G_SHOES, G_TOP, G_BOTTOM = range(7)

DEFAULT_IMAGE_SIZE = 256
DEFAULT_UV_SHAPE = (512, 768)


class InvariantError(ValueError):
    """A map or bundle violates a type invariant."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Violation:
    name: str
    count: int = 0

    def __str__(self) -> str:
        return f"{self.name} ({self.count} px)" if self.count else self.name


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def names(self) -> list[str]:
        return [v.name for v in self.violations]

    def __str__(self) -> str:
        if self.ok:
            return "pass"
        return "fail: " + "; ".join(str(v) for v in self.violations)


class _Checked:
    """Mixin: constructors validate; ``unchecked`` skips it for reporting."""

    def problems(self) -> list[Violation]:  # pragma: no cover - overridden
        return []

    def _check(self) -> None:
        probs = self.problems()
        if probs:
            raise InvariantError(f"{type(self).__name__}: " + "; ".join(map(str, probs)))

    @classmethod
    def unchecked(cls, *args, **kwargs):
        obj = cls.__new__(cls)
        obj._init_fields(*args, **kwargs)
        return obj


def _label_problems(data: np.ndarray, n_classes: int) -> list[Violation]:
    if data.ndim != 2:
        return [Violation("not a 2d grid")]
    bad = int((data >= n_classes).sum())
    return [Violation("label out of range", bad)] if bad else []


class _LabelGrid(_Checked):
    n_classes: int = 0

    def __init__(self, data):
        self._init_fields(data)
        self._check()

    def _init_fields(self, data):
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    def problems(self) -> list[Violation]:
        return _label_problems(self.data, self.n_classes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def nonzero(self) -> np.ndarray:
        return self.data != 0

    def __eq__(self, other):
        return type(other) is type(self) and np.array_equal(self.data, other.data)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def __repr__(self):
        return f"{type(self).__name__}({self.height}x{self.width})"


class PoseMap(_LabelGrid):
    """Undressed body part labels, 0 = background, 1..14 = body parts."""
    n_classes = N_POSE_CLASSES


class GarmentMap(_LabelGrid):
    """Dressed-body semantic labels (see ``GARMENT_LABELS``)."""
    n_classes = N_GARMENT_CLASSES


class SilhouetteMask(_LabelGrid):
    n_classes = 2

    def problems(self) -> list[Violation]:
        if self.data.ndim != 2:
            return [Violation("not a 2d grid")]
        bad = int((self.data > 1).sum())
        return [Violation("mask not binary", bad)] if bad else []

    @classmethod
    def from_bool(cls, mask: np.ndarray) -> "SilhouetteMask":
        return cls(np.asarray(mask).astype(np.uint8))

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)


class RgbImage(_Checked):
    def __init__(self, data):
        self._init_fields(data)
        self._check()

    def _init_fields(self, data):
        object.__setattr__(self, "data", _frozen(data, np.float32))

    def problems(self) -> list[Violation]:
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            return [Violation("expected HxWx3 array")]
        out = []
        nonfinite = int((~np.isfinite(d)).any(axis=2).sum())
        if nonfinite:
            out.append(Violation("non-finite intensity", nonfinite))
        with np.errstate(invalid="ignore"):
            rng = int(((d < 0) | (d > 1)).any(axis=2).sum())
        if rng:
            out.append(Violation("intensity outside [0,1]", rng))
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, RgbImage) and np.array_equal(self.data, other.data)

    def __setattr__(self, name, value):
        raise AttributeError("RgbImage is immutable")

    def __repr__(self):
        return f"RgbImage({self.height}x{self.width})"


@dataclass(frozen=True)
class SourceTriplet:
    pose: PoseMap
    sil: SilhouetteMask
    gar: GarmentMap

    def __post_init__(self):
        probs = triplet_problems(self.pose, self.sil, self.gar)
        if probs:
            raise InvariantError("SourceTriplet: " + "; ".join(map(str, probs)))

    @classmethod
    def unchecked(cls, pose, sil, gar):
        obj = cls.__new__(cls)
        object.__setattr__(obj, "pose", pose)
        object.__setattr__(obj, "sil", sil)
        object.__setattr__(obj, "gar", gar)
        return obj

    def problems(self) -> list[Violation]:
        return (self.pose.problems() + self.sil.problems() + self.gar.problems()
                + triplet_problems(self.pose, self.sil, self.gar))


@dataclass(frozen=True)
class ImageTriplet:
    image: RgbImage
    sil: SilhouetteMask
    gar: GarmentMap

    def __post_init__(self):
        probs = triplet_problems(None, self.sil, self.gar, image=self.image)
        if probs:
            raise InvariantError("ImageTriplet: " + "; ".join(map(str, probs)))

    @classmethod
    def unchecked(cls, image, sil, gar):
        obj = cls.__new__(cls)
        object.__setattr__(obj, "image", image)
        object.__setattr__(obj, "sil", sil)
        object.__setattr__(obj, "gar", gar)
        return obj

    def problems(self) -> list[Violation]:
        return (self.image.problems() + self.sil.problems() + self.gar.problems()
                + triplet_problems(None, self.sil, self.gar, image=self.image))


def triplet_problems(pose, sil, gar, image=None) -> list[Violation]:
    shapes = {m.shape for m in (pose, sil, gar, image) if m is not None}
    if len(shapes) > 1:
        return [Violation("spatial dimension mismatch")]
    out = []
    s = sil.data != 0
    g_out = int(((gar.data != 0) & ~s).sum())
    if g_out:
        out.append(Violation("garment outside silhouette", g_out))
    if pose is not None:
        p_out = int(((pose.data != 0) & ~s).sum())
        if p_out:
            out.append(Violation("body outside silhouette", p_out))
    return out


# ---------------------------------------------------------------- UV atlas


@dataclass(frozen=True)
class Chart:
    row: int
    col: int
    height: int
    width: int

    def overlaps(self, other: "Chart") -> bool:
        return not (self.row + self.height <= other.row or other.row + other.height <= self.row
                    or self.col + self.width <= other.col or other.col + other.width <= self.col)


@dataclass(frozen=True)
class UvAtlas:
    """Canvas split into one rectangular chart per body part.

    Chart-local ``u`` runs around the part (columns), ``v`` along its length
    (rows); both in [0, 1].
    """
    height: int
    width: int
    charts: tuple[Chart, ...]  # index k-1 holds the chart of pose label k

    @classmethod
    def grid(cls, height: int = DEFAULT_UV_SHAPE[0], width: int = DEFAULT_UV_SHAPE[1]) -> "UvAtlas":
        rows, cols = 4, 4
        ch, cw = height // rows, width // cols
        charts = tuple(Chart((i // cols) * ch, (i % cols) * cw, ch, cw)
                       for i in range(N_POSE_CLASSES - 1))
        return cls(height, width, charts)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def problems(self) -> list[Violation]:
        out = []
        if len(self.charts) != N_POSE_CLASSES - 1:
            out.append(Violation("chart count is not 14"))
        for i, a in enumerate(self.charts):
            if a.row < 0 or a.col < 0 or a.row + a.height > self.height or a.col + a.width > self.width:
                out.append(Violation(f"chart {i + 1} outside canvas"))
            for b in self.charts[i + 1:]:
                if a.overlaps(b):
                    out.append(Violation(f"chart {i + 1} overlaps another chart"))
        return out

    def cells(self, part: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-cell canvas (row, col) for chart coordinates; part must be >= 1."""
        meta = np.array([(c.row, c.col, c.height, c.width) for c in self.charts], dtype=np.int64)
        m = meta[np.asarray(part, dtype=np.int64) - 1]
        r = np.minimum(np.floor(np.asarray(v) * m[..., 2]).astype(np.int64), m[..., 2] - 1)
        c = np.minimum(np.floor(np.asarray(u) * m[..., 3]).astype(np.int64), m[..., 3] - 1)
        return m[..., 0] + np.maximum(r, 0), m[..., 1] + np.maximum(c, 0)

    def part_canvas(self) -> np.ndarray:
        """Canvas grid holding the owning pose label of each cell (0 = unused)."""
        out = np.zeros(self.shape, dtype=np.uint8)
        for k, c in enumerate(self.charts, start=1):
            out[c.row:c.row + c.height, c.col:c.col + c.width] = k
        return out


# ---------------------------------------------------------------- warp fields


def _inverse_index(part, u, v, atlas: UvAtlas) -> np.ndarray:
    """For every canvas cell, the image pixel whose UV footprint covers it.

    Each body pixel claims the cells nearest to its (u, v) within half the
    spacing to its same-part neighbours; a cell belongs to the closest
    claiming pixel. Returns an (Hc, Wc, 2) int32 grid of (y, x), -1 if none.
    """
    inv = np.full(atlas.shape + (2,), -1, dtype=np.int32)
    h, w = part.shape
    for k in np.unique(part[part > 0]):
        ch = atlas.charts[k - 1]
        ys, xs = np.nonzero(part == k)
        pu = u[ys, xs].astype(np.float64) * ch.width
        pv = v[ys, xs].astype(np.float64) * ch.height
        ru = np.zeros(len(ys))
        rv = np.zeros(len(ys))
        for dy, dx in ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            ok[ok] &= part[ny[ok], nx[ok]] == k
            du = np.zeros(len(ys))
            dv = np.zeros(len(ys))
            du_raw = u[ny[ok], nx[ok]] - u[ys[ok], xs[ok]]
            du[ok] = np.abs((du_raw + 0.5) % 1.0 - 0.5) * ch.width
            dv[ok] = np.abs(v[ny[ok], nx[ok]] - v[ys[ok], xs[ok]]) * ch.height
            ru = np.maximum(ru, du)
            rv = np.maximum(rv, dv)
        ru = 0.5 * ru + 0.5
        rv = 0.5 * rv + 0.5
        tree = cKDTree(np.stack([pu, pv], axis=1))
        gc, gr = np.meshgrid(np.arange(ch.width) + 0.5, np.arange(ch.height) + 0.5)
        centres = np.stack([gc.ravel(), gr.ravel()], axis=1)
        reach = max(ru.max(), rv.max()) * 1.5
        _, idx = tree.query(centres, distance_upper_bound=reach)
        hit = idx < len(ys)
        j = idx[hit]
        c = centres[hit]
        hit_ok = (np.abs(c[:, 0] - pu[j]) <= ru[j]) & (np.abs(c[:, 1] - pv[j]) <= rv[j])
        cells = np.flatnonzero(hit)[hit_ok]
        jj = j[hit_ok]
        rr = ch.row + cells // ch.width
        cc = ch.col + cells % ch.width
        inv[rr, cc, 0] = ys[jj]
        inv[rr, cc, 1] = xs[jj]
    return inv


class WarpField:
    """Image <-> UV correspondence for one posed, viewed body.

    ``part``/``u``/``v`` give the forward map of every body pixel; ``inverse``
    maps canvas cells back to pixels (nearest-neighbour quantisation).
    """

    def __init__(self, part, u, v, atlas: UvAtlas):
        part = np.asarray(part, dtype=np.int16)
        body = part > 0
        self.part = _frozen(part, np.int16)
        self.u = _frozen(np.where(body, u, 0.0), np.float32)
        self.v = _frozen(np.where(body, v, 0.0), np.float32)
        self.atlas = atlas
        probs = self.problems()
        if probs:
            raise InvariantError("WarpField: " + "; ".join(map(str, probs)))
        rows = np.full(part.shape, -1, dtype=np.int32)
        cols = np.full(part.shape, -1, dtype=np.int32)
        if body.any():
            r, c = atlas.cells(part[body], self.u[body], self.v[body])
            rows[body], cols[body] = r, c
        self.cell_row = _frozen(rows, np.int32)
        self.cell_col = _frozen(cols, np.int32)
        self.inverse = _frozen(_inverse_index(self.part, self.u, self.v, atlas), np.int32)

    def problems(self) -> list[Violation]:
        out = []
        if self.part.ndim != 2 or self.u.shape != self.part.shape or self.v.shape != self.part.shape:
            return [Violation("field arrays disagree in shape")]
        if self.part.min(initial=0) < 0 or self.part.max(initial=0) >= N_POSE_CLASSES:
            out.append(Violation("part label out of range", int(((self.part < 0) | (self.part >= N_POSE_CLASSES)).sum())))
        body = self.part > 0
        bad = int((body & ~((self.u >= 0) & (self.u <= 1) & (self.v >= 0) & (self.v <= 1))).sum())
        if bad:
            out.append(Violation("uv outside unit square", bad))
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.part.shape

    @property
    def body(self) -> np.ndarray:
        return self.part > 0

    def consistent_with(self, pose: PoseMap) -> bool:
        return pose.shape == self.shape and np.array_equal(pose.data.astype(np.int16), self.part)

    def round_trip_error(self) -> np.ndarray:
        """Chebyshev pixel distance of inverse(forward(p)) from p; -1 if undefined."""
        ys, xs = np.nonzero(self.body)
        back = self.inverse[self.cell_row[ys, xs], self.cell_col[ys, xs]]
        err = np.maximum(np.abs(back[:, 0] - ys), np.abs(back[:, 1] - xs))
        err[back[:, 0] < 0] = -1
        return err


# ---------------------------------------------------------------- UV maps


class UvLabelMap:
    def __init__(self, labels, valid):
        valid = np.asarray(valid, dtype=bool)
        labels = np.where(valid, labels, 0)
        self.labels = _frozen(labels, np.uint8)
        self.valid = _frozen(valid, bool)
        if self.labels.max(initial=0) >= N_GARMENT_CLASSES:
            raise InvariantError("UvLabelMap: label out of range")

    @classmethod
    def empty(cls, atlas: UvAtlas) -> "UvLabelMap":
        return cls(np.zeros(atlas.shape, np.uint8), np.zeros(atlas.shape, bool))

    @property
    def shape(self):
        return self.valid.shape

    def coverage(self) -> float:
        return float(self.valid.mean())

    def __eq__(self, other):
        return (isinstance(other, UvLabelMap) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.valid, other.valid))


class UvTextureMap:
    def __init__(self, texture, valid):
        valid = np.asarray(valid, dtype=bool)
        texture = np.where(valid[..., None], texture, 0.0)
        self.texture = _frozen(texture, np.float32)
        self.valid = _frozen(valid, bool)

    @classmethod
    def empty(cls, atlas: UvAtlas) -> "UvTextureMap":
        return cls(np.zeros(atlas.shape + (3,), np.float32), np.zeros(atlas.shape, bool))

    @property
    def shape(self):
        return self.valid.shape

    def coverage(self) -> float:
        return float(self.valid.mean())

    def __eq__(self, other):
        return (isinstance(other, UvTextureMap) and np.array_equal(self.texture, other.texture)
                and np.array_equal(self.valid, other.valid))


# ---------------------------------------------------------------- validation


def validate(bundle) -> ValidationReport:
    """Check any typed map, triplet or warp field; never raises."""
    if isinstance(bundle, (list, tuple)):
        out: list[Violation] = []
        for b in bundle:
            out.extend(validate(b).violations)
        return ValidationReport(tuple(out))
    probs = bundle.problems() if hasattr(bundle, "problems") else [Violation("unknown bundle type")]
    return ValidationReport(tuple(probs))


def encode_onehot(labels, n_classes: int) -> np.ndarray:
    """Stack a label grid into ``n_classes`` binary float32 planes (C, H, W)."""
    data = labels.data if isinstance(labels, _LabelGrid) else np.asarray(labels)
    if data.size and (data.min() < 0 or data.max() >= n_classes):
        raise InvariantError(f"label out of range for {n_classes} classes")
    planes = np.zeros((n_classes,) + data.shape, dtype=np.float32)
    np.put_along_axis(planes, data[None].astype(np.int64), 1.0, axis=0)
    return planes


def decode_onehot(planes: np.ndarray) -> np.ndarray:
    return np.argmax(planes, axis=0).astype(np.uint8)
