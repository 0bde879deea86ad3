"""Procedural paper-doll humans with exact image <-> UV ground truth.

A figure is a flat skeleton of 14 parts.  Each part is an (elliptic) body of
revolution around its bone: chart coordinate ``v`` runs along the bone and
``u`` around it, so the front, back and side views of a part see different
halves of its chart.  Appearance is a pure function of (part, u, v), which
makes the UV texture of a figure pose-invariant by construction.

Parts are painted in a fixed depth order per view.  Loose garments, hair and
shoes add a "shell" margin outside the body that only lands on pixels not
already owned by a body part, so the dressed silhouette strictly contains the
undressed body and every body pixel shows its own surface texture.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .core import (G_BOTTOM, G_FACE, G_HAIR, G_SHOES, G_SKIN, G_TOP, N_POSE_CLASSES,
                   GarmentMap, PoseMap, RgbImage, SilhouetteMask, UvAtlas, Violation,
                   WarpField)

REF_SIZE = 128
VIEWS = ("front", "back", "left", "right", "top", "bottom")
VIEW_YAW = {"front": 0.0, "back": math.pi, "left": -math.pi / 2, "right": math.pi / 2}

TORSO, HEAD, NECK, HIP = 1, 2, 3, 4
UARM_L, UARM_R, LARM_L, LARM_R = 5, 6, 7, 8
ULEG_L, ULEG_R, LLEG_L, LLEG_R = 9, 10, 11, 12
FOOT_L, FOOT_R = 13, 14
PART_NAMES = {1: "torso", 2: "head", 3: "neck", 4: "hip", 5: "upper_arm_l", 6: "upper_arm_r",
              7: "lower_arm_l", 8: "lower_arm_r", 9: "upper_leg_l", 10: "upper_leg_r",
              11: "lower_leg_l", 12: "lower_leg_r", 13: "foot_l", 14: "foot_r"}
PARENT = {TORSO: 0, HIP: 0, NECK: TORSO, HEAD: NECK, UARM_L: TORSO, UARM_R: TORSO,
          LARM_L: UARM_L, LARM_R: UARM_R, ULEG_L: HIP, ULEG_R: HIP, LLEG_L: ULEG_L,
          LLEG_R: ULEG_R, FOOT_L: LLEG_L, FOOT_R: LLEG_R}
MIRROR_PART = {UARM_L: UARM_R, UARM_R: UARM_L, LARM_L: LARM_R, LARM_R: LARM_L,
               ULEG_L: ULEG_R, ULEG_R: ULEG_L, LLEG_L: LLEG_R, LLEG_R: LLEG_L,
               FOOT_L: FOOT_R, FOOT_R: FOOT_L}

FRONT_ORDER = (ULEG_L, ULEG_R, LLEG_L, LLEG_R, FOOT_L, FOOT_R, HIP, TORSO, NECK, HEAD,
               UARM_L, UARM_R, LARM_L, LARM_R)
BACK_ORDER = (UARM_L, UARM_R, LARM_L, LARM_R, ULEG_L, ULEG_R, LLEG_L, LLEG_R, FOOT_L,
              FOOT_R, HIP, TORSO, NECK, HEAD)

JOINTS = ("torso", "neck", "head", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
          "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r")
JOINT_LIMITS = {
    "torso": (-0.35, 0.35), "neck": (-0.4, 0.4), "head": (-0.4, 0.4),
    "shoulder_l": (-0.4, 3.0), "shoulder_r": (-0.4, 3.0),
    "elbow_l": (-0.3, 2.4), "elbow_r": (-0.3, 2.4),
    "hip_l": (-0.5, 1.2), "hip_r": (-0.5, 1.2),
    "knee_l": (-0.3, 1.4), "knee_r": (-0.3, 1.4),
    "ankle_l": (-0.5, 0.5), "ankle_r": (-0.5, 0.5),
}
T_POSE = {"torso": 0.0, "neck": 0.0, "head": 0.0, "shoulder_l": math.pi / 2,
          "shoulder_r": math.pi / 2, "elbow_l": 0.0, "elbow_r": 0.0, "hip_l": 0.12,
          "hip_r": 0.12, "knee_l": 0.0, "knee_r": 0.0, "ankle_l": 0.0, "ankle_r": 0.0}

PATTERNS = ("solid", "stripes", "checker")


class PoseError(ValueError):
    pass


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


# ---------------------------------------------------------------- figures


@dataclass(frozen=True)
class FigureSpec:
    """Body proportions (px at 128-res) and clothing of one synthetic subject."""
    seed: int
    lengths: dict[int, float]
    radii: dict[int, tuple[float, float]]
    depth_ratio: dict[int, float]
    garment_of: dict[int, int]
    sleeve: float
    pant: float
    hairline: float
    hair_low: float
    margins: dict[str, float]
    skirt: float
    colors: dict[str, tuple[float, float, float]]
    top_pattern: str
    bottom_pattern: str
    pattern_period: float
    face: dict[str, float]

    @property
    def figure_id(self) -> str:
        return f"fig{self.seed:06d}"

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("lengths", "radii", "depth_ratio", "garment_of"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FigureSpec":
        d = dict(d)
        d["lengths"] = {int(k): float(v) for k, v in d["lengths"].items()}
        d["radii"] = {int(k): tuple(v) for k, v in d["radii"].items()}
        d["depth_ratio"] = {int(k): float(v) for k, v in d["depth_ratio"].items()}
        d["garment_of"] = {int(k): int(v) for k, v in d["garment_of"].items()}
        d["colors"] = {k: tuple(v) for k, v in d["colors"].items()}
        return cls(**d)

    # appearance on the body surface ------------------------------------

    def surface_label(self, part: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        base = np.zeros(part.shape, dtype=np.uint8)
        for k, g in self.garment_of.items():
            base[part == k] = g
        arm = (part == UARM_L) | (part == UARM_R)
        base[arm & (v > self.sleeve)] = G_SKIN
        leg = (part == ULEG_L) | (part == ULEG_R)
        base[leg & (v > self.pant)] = G_SKIN
        head = part == HEAD
        face = head & (np.abs(u - 0.25) <= self.face["half_width"]) & (v >= 0.06) & (v <= self.hairline)
        base[head] = G_HAIR
        base[head & (v < self.hair_low) & ~face] = G_SKIN
        base[face] = G_FACE
        return base

    def surface_color(self, part, u, v, label) -> np.ndarray:
        out = np.zeros(part.shape + (3,), dtype=np.float64)
        col = {g: np.array(self.colors[n]) for g, n in
               ((G_HAIR, "hair"), (G_SKIN, "skin"), (G_FACE, "skin"), (G_SHOES, "shoes"))}
        for g, c in col.items():
            out[label == g] = c
        lengths = np.zeros(part.shape)
        circ = np.zeros(part.shape)
        for k in range(1, N_POSE_CLASSES):
            m = part == k
            if m.any():
                lengths[m] = self.lengths[k]
                circ[m] = math.pi * (self.radii[k][0] + self.radii[k][1])
        p = self.pattern_period
        for g, pat, a, b in ((G_TOP, self.top_pattern, "top", "top2"),
                             (G_BOTTOM, self.bottom_pattern, "bottom", "bottom2")):
            m = label == g
            if not m.any():
                continue
            along = np.floor(v[m] * lengths[m] / p)
            around = np.floor(u[m] * circ[m] / p)
            if pat == "stripes":
                alt = along % 2 == 1
            elif pat == "checker":
                alt = (along + around) % 2 == 1
            else:
                alt = np.zeros(m.sum(), bool)
            out[m] = np.where(alt[:, None], self.colors[b], self.colors[a])
        # eyes and mouth live in face UV coordinates
        f = self.face
        fm = label == G_FACE
        du = u - 0.25
        eyes = fm & (np.abs(v - f["eye_v"]) <= 0.07) & (np.abs(np.abs(du) - f["eye_sep"]) <= 0.028)
        mouth = fm & (np.abs(v - f["mouth_v"]) <= 0.045) & (np.abs(du) <= f["mouth_w"])
        out[eyes] = self.colors["eyes"]
        out[mouth] = self.colors["mouth"]
        return out

    def problems(self) -> list[Violation]:
        """Garment coverage check over a fine (u, v) grid of every part."""
        out = []
        uu, vv = np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41))
        for k in range(1, N_POSE_CLASSES):
            lab = self.surface_label(np.full(uu.shape, k), uu, vv)
            if k == TORSO and not (lab == G_TOP).all():
                out.append(Violation("torso not covered by top", int((lab != G_TOP).sum())))
            if k == HIP and not (lab == G_BOTTOM).all():
                out.append(Violation("hip not covered by bottom", int((lab != G_BOTTOM).sum())))
            if k in (UARM_L, UARM_R) and (lab == G_TOP).mean() < 0.5:
                out.append(Violation("upper arm not covered by top"))
            if k in (ULEG_L, ULEG_R) and (lab == G_BOTTOM).mean() < 0.5:
                out.append(Violation("upper leg not covered by bottom"))
            if k in (NECK, LARM_L, LARM_R, LLEG_L, LLEG_R) and not (lab == G_SKIN).all():
                out.append(Violation(f"{PART_NAMES[k]} not skin"))
            if k in (FOOT_L, FOOT_R) and not (lab == G_SHOES).all():
                out.append(Violation(f"{PART_NAMES[k]} not shoes"))
        if set(self.lengths) != set(range(1, N_POSE_CLASSES)):
            out.append(Violation("part set does not match pose classes"))
        return out


def _color(rng, lo=0.1, hi=0.95):
    return tuple(float(x) for x in rng.uniform(lo, hi, 3))


def generate_figure(seed: int) -> FigureSpec:
    rng = _rng(0xF16, seed)
    s = rng.uniform(0.92, 1.08)
    lengths = {TORSO: 27 * s, HEAD: 15 * s, NECK: 4 * s, HIP: 9 * s,
               UARM_L: 17 * s, LARM_L: 16 * s, ULEG_L: 23 * s, LLEG_L: 21 * s, FOOT_L: 7 * s}
    bulk = rng.uniform(0.85, 1.2)
    radii = {TORSO: (9.5 * bulk, 11 * bulk), HEAD: (rng.uniform(6.3, 7.4) * s,) * 2,
             NECK: (2.8 * s, 2.8 * s), HIP: (10 * bulk, 10 * bulk),
             UARM_L: (3.6 * bulk, 3.1 * bulk), LARM_L: (3.0 * bulk, 2.5 * bulk),
             ULEG_L: (4.8 * bulk, 4.0 * bulk), LLEG_L: (3.8 * bulk, 3.0 * bulk),
             FOOT_L: (3.0 * s, 3.0 * s)}
    for l, r in ((UARM_L, UARM_R), (LARM_L, LARM_R), (ULEG_L, ULEG_R), (LLEG_L, LLEG_R),
                 (FOOT_L, FOOT_R)):
        lengths[r] = lengths[l]
        radii[r] = radii[l]
    depth = {k: 1.0 for k in range(1, N_POSE_CLASSES)}
    depth.update({TORSO: 0.6, HIP: 0.65, HEAD: 0.9})
    garment_of = {TORSO: G_TOP, UARM_L: G_TOP, UARM_R: G_TOP, HIP: G_BOTTOM,
                  ULEG_L: G_BOTTOM, ULEG_R: G_BOTTOM, NECK: G_SKIN, LARM_L: G_SKIN,
                  LARM_R: G_SKIN, LLEG_L: G_SKIN, LLEG_R: G_SKIN, FOOT_L: G_SHOES,
                  FOOT_R: G_SHOES, HEAD: G_HAIR}
    skin = tuple(float(x) for x in np.array([0.95, 0.78, 0.62]) * rng.uniform(0.45, 1.0))
    colors = {"skin": skin, "hair": _color(rng, 0.02, 0.6), "shoes": _color(rng, 0.05, 0.5),
              "top": _color(rng), "top2": _color(rng), "bottom": _color(rng, 0.05, 0.8),
              "bottom2": _color(rng), "eyes": (0.08, 0.06, 0.05), "mouth": (0.6, 0.15, 0.15)}
    skirt = float(rng.uniform(0.4, 0.8)) if rng.random() < 0.3 else 0.0
    return FigureSpec(
        seed=int(seed), lengths=lengths, radii=radii, depth_ratio=depth,
        garment_of=garment_of,
        sleeve=float(rng.uniform(0.6, 1.0)), pant=float(rng.uniform(0.7, 1.0)),
        hairline=float(rng.uniform(0.68, 0.8)), hair_low=float(rng.uniform(0.1, 0.45)),
        margins={"top": float(rng.uniform(0.8, 3.0)), "bottom": float(rng.uniform(0.6, 2.5)),
                 "hair": float(rng.uniform(0.8, 3.2)), "shoes": 0.8, "sleeve": float(rng.uniform(0.6, 2.0))},
        skirt=skirt, colors=colors,
        top_pattern=PATTERNS[rng.integers(3)], bottom_pattern=PATTERNS[rng.integers(3)],
        pattern_period=float(rng.uniform(4.0, 8.0)),
        face={"half_width": float(rng.uniform(0.09, 0.12)), "eye_v": float(rng.uniform(0.48, 0.56)),
              "eye_sep": float(rng.uniform(0.035, 0.05)), "mouth_v": float(rng.uniform(0.2, 0.27)),
              "mouth_w": float(rng.uniform(0.025, 0.045))},
    )


# ---------------------------------------------------------------- poses


@dataclass(frozen=True)
class PoseParams:
    angles: dict[str, float]
    root: tuple[float, float] | None = None  # pelvis (x, y) in px; None = canvas default
    scale: float = 1.0

    def problems(self) -> list[str]:
        out = []
        for j in JOINTS:
            a = self.angles.get(j)
            lo, hi = JOINT_LIMITS[j]
            if a is None or not (lo - 1e-9 <= a <= hi + 1e-9):
                out.append(f"joint {j} outside limits")
        if not self.scale > 0:
            out.append("scale must be positive")
        return out

    def to_json(self) -> dict:
        return {"angles": dict(self.angles), "root": list(self.root) if self.root else None,
                "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> "PoseParams":
        return cls(dict(d["angles"]), tuple(d["root"]) if d.get("root") else None, float(d["scale"]))


def t_pose(scale: float = 1.0, root=None) -> PoseParams:
    return PoseParams(dict(T_POSE), root, scale)


def sample_pose(rng: np.random.Generator, tpose_prob: float = 0.15) -> PoseParams:
    if rng.random() < tpose_prob:
        angles = {j: float(np.clip(T_POSE[j] + rng.normal(0, 0.08), *JOINT_LIMITS[j])) for j in JOINTS}
    else:
        natural = {"torso": (-0.2, 0.2), "neck": (-0.25, 0.25), "head": (-0.3, 0.3),
                   "shoulder_l": (-0.2, 2.8), "shoulder_r": (-0.2, 2.8),
                   "elbow_l": (-0.2, 2.0), "elbow_r": (-0.2, 2.0),
                   "hip_l": (-0.3, 0.8), "hip_r": (-0.3, 0.8),
                   "knee_l": (-0.2, 1.0), "knee_r": (-0.2, 1.0),
                   "ankle_l": (-0.4, 0.4), "ankle_r": (-0.4, 0.4)}
        angles = {j: float(rng.uniform(*natural[j])) for j in JOINTS}
    scale = float(rng.uniform(0.85, 1.0))
    jitter = (float(rng.uniform(-6, 6)), float(rng.uniform(-4, 4)))
    return PoseParams(angles, jitter, scale)


# ---------------------------------------------------------------- rendering


@dataclass
class _Prim:
    """One paintable part: pixel mask, chart coordinates and garment shell."""
    part: int
    body: np.ndarray
    u: np.ndarray
    v: np.ndarray
    shell: np.ndarray | None = None
    shell_label: int = 0


def _d(theta):
    return np.array([math.sin(theta), math.cos(theta)])


def _lat(theta):
    return np.array([math.cos(theta), -math.sin(theta)])


def _layout(spec: FigureSpec, pose: PoseParams, f: float, yaw: float):
    """Bone origin, direction angle and length (px) of every part, figure frame."""
    a = pose.angles
    L = {k: spec.lengths[k] * f for k in spec.lengths}
    tau = a["torso"]
    wt = math.sqrt(math.cos(yaw) ** 2 + (spec.depth_ratio[TORSO] * math.sin(yaw)) ** 2)
    wh = math.sqrt(math.cos(yaw) ** 2 + (spec.depth_ratio[HIP] * math.sin(yaw)) ** 2)
    pelvis = np.zeros(2)
    bones = {}
    bones[TORSO] = (pelvis, math.pi + tau)
    bones[HIP] = (pelvis, tau)
    top = pelvis + L[TORSO] * _d(math.pi + tau)
    bones[NECK] = (top, math.pi + tau + a["neck"])
    neck_end = top + L[NECK] * _d(bones[NECK][1])
    bones[HEAD] = (neck_end, bones[NECK][1] + a["head"])
    shoulder_off = (spec.radii[TORSO][1] * f - 0.8 * spec.radii[UARM_L][0] * f) * wt
    sh = top - 0.12 * L[TORSO] * _d(math.pi + tau)
    for part, lower, sgn, sj, ej in ((UARM_L, LARM_L, 1, "shoulder_l", "elbow_l"),
                                     (UARM_R, LARM_R, -1, "shoulder_r", "elbow_r")):
        o = sh + sgn * shoulder_off * _lat(tau)
        th = tau + sgn * a[sj]
        bones[part] = (o, th)
        bones[lower] = (o + L[part] * _d(th), th + sgn * a[ej])
    leg_off = (spec.radii[HIP][0] * f - spec.radii[ULEG_L][0] * f) * wh
    hb = pelvis + 0.6 * L[HIP] * _d(tau)
    for part, lower, foot, sgn, hj, kj, aj in (
            (ULEG_L, LLEG_L, FOOT_L, 1, "hip_l", "knee_l", "ankle_l"),
            (ULEG_R, LLEG_R, FOOT_R, -1, "hip_r", "knee_r", "ankle_r")):
        o = hb + sgn * leg_off * _lat(tau)
        th = tau + sgn * a[hj]
        bones[part] = (o, th)
        o2 = o + L[part] * _d(th)
        th2 = th - sgn * a[kj]
        bones[lower] = (o2, th2)
        bones[foot] = (o2 + L[lower] * _d(th2), th2 + sgn * (1.2 + a[aj]))
    return bones, L


def _limb(spec, k, origin, theta, length, yaw, sigma, grid, f):
    px, py = grid
    d = _d(theta) * np.array([sigma, 1.0])
    n = _lat(theta) * np.array([sigma, 1.0])
    rx, ry = px - origin[0], py - origin[1]
    s = rx * d[0] + ry * d[1]
    t = rx * n[0] + ry * n[1]
    kappa = spec.depth_ratio[k]
    wr = math.sqrt(math.cos(yaw) ** 2 + (kappa * math.sin(yaw)) ** 2)
    beta = math.atan2(kappa * math.sin(yaw), math.cos(yaw))
    r0, r1 = (r * f * wr for r in spec.radii[k])
    if k == HEAD:
        e = 0.0
        z = np.clip(1 - (2 * s / length - 1) ** 2, 0, None)
        rad = r0 * np.sqrt(z)
    else:
        e = {TORSO: 1.5, HIP: 1.5, NECK: 1.5}.get(k, 0.8 * spec.radii[k][0]) * f
        rad = r0 + (r1 - r0) * np.clip(s / length, 0, 1)
    inside = (s >= -e) & (s <= length + e) & (np.abs(t) <= rad) & (rad > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.arcsin(np.clip(np.where(rad > 0, t / rad, 0), -1, 1))
    psi = beta + sigma * alpha
    u = np.mod(psi / (2 * math.pi) + 0.25, 1.0)
    v = np.clip((s + e) / (length + 2 * e), 0, 1)
    return inside, u, v, s, t, rad


def _shell_for(spec, k, s, t, rad, length, f):
    m = spec.margins
    if k == TORSO:
        return (s >= -1.5 * f) & (s <= length) & (np.abs(t) <= rad + m["top"] * f), G_TOP
    if k in (UARM_L, UARM_R):
        return (s >= 0) & (s <= spec.sleeve * length) & (np.abs(t) <= rad + m["sleeve"] * f), G_TOP
    if k == HIP:
        if spec.skirt:
            reach = length + spec.skirt * spec.lengths[ULEG_L] * f
            flare = rad + m["bottom"] * f + 0.45 * np.clip(s, 0, None)
            return (s >= 0) & (s <= reach) & (np.abs(t) <= flare), G_BOTTOM
        return (s >= 0) & (s <= length) & (np.abs(t) <= rad + m["bottom"] * f), G_BOTTOM
    if k in (ULEG_L, ULEG_R):
        return (s >= 0) & (s <= spec.pant * length) & (np.abs(t) <= rad + m["bottom"] * f), G_BOTTOM
    if k in (FOOT_L, FOOT_R):
        return (s >= -1) & (s <= length + m["shoes"] * f) & (np.abs(t) <= rad + m["shoes"] * f), G_SHOES
    if k == HEAD:
        hm = m["hair"] * f
        c = length / 2
        z = np.clip(1 - ((s - c) / (c + hm)) ** 2, 0, None)
        big = np.abs(t) <= (spec.radii[HEAD][0] * f + hm) * np.sqrt(z)
        return big & (s >= length * 0.38), G_HAIR
    return None, 0


def _side_prims(spec, pose, yaw, size, f):
    bones, L = _layout(spec, pose, f, yaw)
    sigma = 1.0 if math.cos(yaw) >= -1e-9 else -1.0
    root = np.array(pose.root if pose.root is not None else (0.0, 0.0)) * (size / REF_SIZE)
    base = np.array([size / 2, size * 0.5]) + root
    grid = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    order = FRONT_ORDER if sigma > 0 else BACK_ORDER
    prims = []
    for k in order:
        o, th = bones[k]
        origin = base + np.array([sigma * o[0], o[1]])
        inside, u, v, s, t, rad = _limb(spec, k, origin, th, L[k], yaw, sigma, grid, f)
        wr = math.sqrt(math.cos(yaw) ** 2 + (spec.depth_ratio[k] * math.sin(yaw)) ** 2)
        shell, lab = _shell_for(spec, k, s, t, rad, L[k], f * wr)
        prims.append(_Prim(k, inside, u, v, shell, lab))
    return prims


def _radial(grid, centre, a, b, v_centre, v_rim, psi0=0.0):
    px, py = grid
    dx, dy = (px - centre[0]) / a, (py - centre[1]) / b
    rho = np.sqrt(dx ** 2 + dy ** 2)
    inside = rho <= 1.0
    psi = np.arctan2(dy, dx) + psi0
    u = np.mod(psi / (2 * math.pi) + 0.25, 1.0)
    v = np.clip(v_centre + (v_rim - v_centre) * rho, 0, 1)
    return inside, u, v, rho


def _cap_prims(spec, pose, view, size, f):
    """Top / bottom views: foreshortened caps of the head-shoulder or feet."""
    grid = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    root = np.array(pose.root if pose.root is not None else (0.0, 0.0)) * (size / REF_SIZE)
    c = np.array([size / 2, size / 2]) + root
    prims = []
    if view == "top":
        rt = spec.radii[TORSO][1] * f
        ins, u, v, rho = _radial(grid, c, rt, rt * spec.depth_ratio[TORSO], 1.0, 0.86)
        shell = _radial(grid, c, rt + spec.margins["top"] * f,
                        (rt + spec.margins["top"] * f) * spec.depth_ratio[TORSO], 0, 0)[0]
        prims.append(_Prim(TORSO, ins, u, v, shell, G_TOP))
        rn = spec.radii[NECK][0] * f * 1.3
        ins, u, v, _ = _radial(grid, c, rn, rn, 0.7, 1.0)
        prims.append(_Prim(NECK, ins, u, v))
        rh = spec.radii[HEAD][0] * f
        ins, u, v, _ = _radial(grid, c + np.array([0, -0.15 * rh]), rh, rh * spec.depth_ratio[HEAD], 1.0, 0.62)
        hm = spec.margins["hair"] * f
        shell = _radial(grid, c + np.array([0, -0.15 * rh]), rh + hm, (rh + hm) * spec.depth_ratio[HEAD], 0, 0)[0]
        prims.append(_Prim(HEAD, ins, u, v, shell, G_HAIR))
    else:
        off = (spec.radii[HIP][0] - spec.radii[ULEG_L][0]) * f * 1.6
        for leg, foot, sgn in ((LLEG_L, FOOT_L, 1), (LLEG_R, FOOT_R, -1)):
            cc = c + np.array([sgn * off, 0.0])
            rl = spec.radii[leg][1] * f * 1.2
            ins, u, v, _ = _radial(grid, cc, rl, rl, 0.82, 1.0)
            prims.append(_Prim(leg, ins, u, v))
            rf = spec.lengths[foot] * f * 0.6
            ins, u, v, _ = _radial(grid, cc + np.array([sgn * 1.5 * f, 2.0 * f]), rf * 0.7, rf, 0.0, 1.0)
            sm = spec.margins["shoes"] * f
            shell = _radial(grid, cc + np.array([sgn * 1.5 * f, 2.0 * f]), rf * 0.7 + sm, rf + sm, 0, 0)[0]
            prims.append(_Prim(foot, ins, u, v, shell, G_SHOES))
    return prims


@dataclass
class SceneSample:
    image: RgbImage
    pose: PoseMap
    sil: SilhouetteMask
    gar: GarmentMap
    part: np.ndarray
    u: np.ndarray
    v: np.ndarray
    atlas: UvAtlas
    meta: dict = field(default_factory=dict)

    @cached_property
    def warp(self) -> WarpField:
        return WarpField(self.part, self.u, self.v, self.atlas)

    @property
    def size(self) -> int:
        return self.pose.height


def _resolve_view(view) -> tuple[str, float]:
    if isinstance(view, str):
        if view not in VIEWS:
            raise ValueError(f"unknown view {view!r}")
        return view, VIEW_YAW.get(view, 0.0)
    return "yaw", float(view)


def render_scene(spec: FigureSpec, pose: PoseParams, view="front", size: int = REF_SIZE,
                 atlas: UvAtlas | None = None) -> SceneSample:
    """Paint the figure; ``view`` is one of VIEWS or a yaw angle in radians."""
    probs = pose.problems()
    if probs:
        raise PoseError("; ".join(probs))
    atlas = atlas or UvAtlas.grid()
    name, yaw = _resolve_view(view)
    f = size / REF_SIZE * pose.scale
    prims = _cap_prims(spec, pose, name, size, f) if name in ("top", "bottom") \
        else _side_prims(spec, pose, yaw, size, f)
    part = np.zeros((size, size), np.int16)
    u = np.zeros((size, size))
    v = np.zeros((size, size))
    sil = np.zeros((size, size), bool)
    shell_lab = np.zeros((size, size), np.uint8)
    for p in prims:
        if p.shell is not None:
            sm = p.shell & (part == 0)
            sil |= sm
            shell_lab[sm] = p.shell_label
        part[p.body] = p.part
        u[p.body] = p.u[p.body]
        v[p.body] = p.v[p.body]
        shell_lab[p.body] = 0
        sil |= p.body
    body = part > 0
    gar = np.where(body, spec.surface_label(part, u, v), shell_lab).astype(np.uint8)
    img = spec.surface_color(part, u, v, gar)
    shell_px = sil & ~body
    for g, name_ in ((G_TOP, "top"), (G_BOTTOM, "bottom"), (G_HAIR, "hair"), (G_SHOES, "shoes")):
        img[shell_px & (gar == g)] = spec.colors[name_]
    img[~sil] = 0.0
    meta = {"figure": spec.figure_id, "view": view if isinstance(view, str) else float(view),
            "pose": pose.to_json()}
    return SceneSample(RgbImage(np.clip(img, 0, 1)), PoseMap(part), SilhouetteMask.from_bool(sil),
                       GarmentMap(gar), part, u, v, atlas, meta)


def render_background(seed: int, size: int = REF_SIZE) -> RgbImage:
    """Smooth room-like backdrop: vertical gradient plus a few soft blobs."""
    rng = _rng(0xB6, seed)
    y, x = np.mgrid[0:size, 0:size] / size
    top, bottom = rng.uniform(0.2, 0.9, 3), rng.uniform(0.1, 0.7, 3)
    img = top * (1 - y[..., None]) + bottom * y[..., None]
    for _ in range(4):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.3)
        w = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - 0.6 * w) + 0.6 * w * rng.uniform(0, 1, 3)
    return RgbImage(np.clip(img, 0, 1))


def visible_cells(spec: FigureSpec, pose: PoseParams, view, size: int, atlas: UvAtlas) -> np.ndarray:
    """Analytic visibility oracle: canvas cells whose surface point is painted.

    Each chart cell centre is pushed through the generator's own surface
    parameterisation; the cell is visible if some pixel of its part has
    chart coordinates within one cell of it.  Independent of WarpField.
    """
    sc = render_scene(spec, pose, view, size, atlas)
    vis = np.zeros(atlas.shape, bool)
    for k in range(1, N_POSE_CLASSES):
        m = sc.part == k
        if not m.any():
            continue
        ch = atlas.charts[k - 1]
        cu = sc.u[m] * ch.width
        cv = sc.v[m] * ch.height
        ci = np.clip(np.floor(cv).astype(int), 0, ch.height - 1)
        cj = np.clip(np.floor(cu).astype(int), 0, ch.width - 1)
        hit = np.zeros((ch.height, ch.width), bool)
        hit[ci, cj] = True
        vis[ch.row:ch.row + ch.height, ch.col:ch.col + ch.width] = hit
    return vis


# ---------------------------------------------------------------- pairs


def _pick(rng, options, probs):
    return options[rng.choice(len(options), p=probs)]


SRC_VIEWS = (("front", "back", "left", "right"), (0.55, 0.15, 0.15, 0.15))
TGT_VIEWS = (VIEWS, (0.3, 0.2, 0.2, 0.2, 0.05, 0.05))
YAW_PROB = 0.2  # share of targets rendered at a continuous yaw


def make_pair(spec: FigureSpec, seed: int, size: int = REF_SIZE, atlas: UvAtlas | None = None,
              same_pose: bool = False) -> tuple[SceneSample, SceneSample]:
    rng = _rng(0x9A1, spec.seed, seed)
    sv = _pick(rng, *SRC_VIEWS)
    sp = sample_pose(rng)
    if same_pose:
        tv, tp = sv, sp
    else:
        tv = _pick(rng, *TGT_VIEWS)
        if rng.random() < YAW_PROB:
            tv = float(rng.uniform(-math.pi, math.pi))
        tp = sample_pose(rng)
    src = render_scene(spec, sp, sv, size, atlas)
    tgt = render_scene(spec, tp, tv, size, atlas)
    src.meta["seed"] = tgt.meta["seed"] = int(seed)
    return src, tgt


# ---------------------------------------------------------------- degradation


def _patches(shape, rng, n_patches=None, size_range=None) -> np.ndarray:
    h, w = shape
    k = rng.integers(1, 6) if n_patches is None else n_patches
    lo, hi = size_range or (8, 32)
    lo = max(1, round(lo * h / REF_SIZE))
    hi = max(lo, round(hi * h / REF_SIZE))
    keep = np.ones(shape, bool)
    for _ in range(int(k)):
        ph, pw = rng.integers(lo, hi + 1, size=2)
        y0 = rng.integers(0, max(1, h - ph + 1))
        x0 = rng.integers(0, max(1, w - pw + 1))
        keep[y0:y0 + ph, x0:x0 + pw] = False
    return keep


def degrade_garment(g_gt: GarmentMap, pose: PoseMap, rng: np.random.Generator,
                    n_patches: int | None = None, size_range=None) -> GarmentMap:
    """Keep labels on the undressed body only, then punch 1-5 random holes."""
    keep = (pose.data != 0) & _patches(g_gt.shape, rng, n_patches, size_range)
    return GarmentMap(np.where(keep, g_gt.data, 0))


def degrade_image(i_gt: RgbImage, s_gt: SilhouetteMask, pose: PoseMap, rng: np.random.Generator,
                  n_patches: int | None = None, size_range=None) -> tuple[RgbImage, SilhouetteMask]:
    keep = (s_gt.data != 0) & (pose.data != 0) & _patches(s_gt.shape, rng, n_patches, size_range)
    return RgbImage(np.where(keep[..., None], i_gt.data, 0.0)), SilhouetteMask.from_bool(keep)


# ---------------------------------------------------------------- dataset files


def figure_seed(master_seed: int, index: int) -> int:
    return int(_rng(0x5EED, master_seed, index).integers(0, 2 ** 31))


def pair_seed(master_seed: int, fig_index: int, pair_index: int) -> int:
    return int(_rng(0x9A12, master_seed, fig_index, pair_index).integers(0, 2 ** 31))


def emit_dataset(n_figures: int, pairs_per_figure: int, out_dir, size: int = REF_SIZE,
                 uv_shape=(256, 384), master_seed: int = 0) -> dict:
    from . import io as pio

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    atlas = UvAtlas.grid(*uv_shape)
    manifest = {"version": 1, "master_seed": master_seed, "image_size": size,
                "uv_shape": list(uv_shape), "figures": []}
    pio.write_palette(out / "palette.json")
    for i in range(n_figures):
        spec = generate_figure(figure_seed(master_seed, i))
        fig = {"id": spec.figure_id, "index": i, "seed": spec.seed, "pairs": []}
        for j in range(pairs_per_figure):
            ps = pair_seed(master_seed, i, j)
            src, tgt = make_pair(spec, ps, size, atlas)
            pdir = out / spec.figure_id / f"p{j:04d}"
            pio.write_pair(pdir, src, tgt)
            fig["pairs"].append({"id": f"p{j:04d}", "seed": ps, "path": f"{spec.figure_id}/p{j:04d}",
                                 "src": src.meta, "tgt": tgt.meta})
        manifest["figures"].append(fig)
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(text)
    manifest["sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest


def regenerate_pair(manifest: dict, fig_index: int, pair_index: int):
    spec = generate_figure(figure_seed(manifest["master_seed"], fig_index))
    atlas = UvAtlas.grid(*manifest["uv_shape"])
    ps = pair_seed(manifest["master_seed"], fig_index, pair_index)
    return make_pair(spec, ps, manifest["image_size"], atlas)


def turntable_clip(n: int = 30, seed: int = 0, sweep: float = math.pi) -> list[tuple[PoseParams, float]]:
    """``n`` (pose, yaw) frames turning from the front towards the back while the arms wave."""
    if n < 1:
        raise ValueError("clip needs at least one frame")
    rng = _rng(0xC11, seed)
    base = {j: float(np.clip(T_POSE[j] + rng.normal(0, 0.05), *JOINT_LIMITS[j])) for j in JOINTS}
    phase = float(rng.uniform(0, 2 * math.pi))
    out = []
    for k in range(n):
        t = k / max(n - 1, 1)
        w = math.sin(2 * math.pi * t + phase)
        a = dict(base)
        a["shoulder_l"] = 1.1 + 0.7 * w
        a["shoulder_r"] = 1.1 - 0.7 * w
        a["elbow_l"] = 0.5 + 0.4 * w
        a["elbow_r"] = 0.5 - 0.4 * w
        out.append((PoseParams(a, None, 0.95), sweep * t))
    return out
