"""Evaluation: feature-space perceptual distance, contextual similarity, temporal stability, tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import RgbImage
from .losses import l_cx

NORM_EPS = 1e-10


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, RgbImage):
        x = x.data
    if isinstance(x, np.ndarray):
        a = x.astype(np.float64) / 255 if x.dtype == np.uint8 else x.astype(np.float64)
        t = torch.as_tensor(a)
        return t.permute(2, 0, 1)[None] if t.ndim == 3 else t.permute(0, 3, 1, 2)
    t = torch.as_tensor(x)
    return (t[None] if t.ndim == 3 else t).double()


def _pair(a, b):
    ta, tb = _as_batch(a), _as_batch(b)
    if ta.shape != tb.shape:
        raise ValueError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return ta, tb


def _dtype(extractor, x):
    p = next(iter(extractor.parameters()), None)
    return x.dtype if p is None else p.dtype  # parameter-free extractors run at input precision


def _features(extractor, x):
    with torch.no_grad():
        return [f.double() for f in extractor(x.to(_dtype(extractor, x)))]


def perceptual_distance(a, b, extractor) -> float:
    """Mean over stages of squared differences of unit-normalised feature vectors.

    Channel vectors are normalised per site, differences summed over
    channels and averaged over sites; the batch mean is returned.
    """
    ta, tb = _pair(a, b)
    if torch.equal(ta, tb):
        return 0.0
    fa, fb = _features(extractor, ta), _features(extractor, tb)
    total = 0.0
    for x, y in zip(fa, fb):
        nx = x / (x.norm(dim=1, keepdim=True) + NORM_EPS)
        ny = y / (y.norm(dim=1, keepdim=True) + NORM_EPS)
        total += ((nx - ny) ** 2).sum(1).mean().item()
    return total / len(fa)


def contextual_similarity(a, b, extractor, stage: int = 3) -> float:
    """Contextual loss between two images; lower is better, 0 for identical inputs."""
    ta, tb = _pair(a, b)
    dtype = _dtype(extractor, ta)
    with torch.no_grad():
        return l_cx(ta.to(dtype), tb.to(dtype), extractor, stage).item()


def temporal_stability(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("temporal stability needs at least two per-frame scores")
    return float(np.std(s))


@dataclass
class Table:
    methods: list[str]
    sequences: list[str]
    values: np.ndarray  # (methods, sequences)
    label: str = "score"

    @property
    def average(self) -> np.ndarray:
        return self.values.mean(1)

    def rows(self):
        yield ["method", *self.sequences, "avg"]
        for m, row, avg in zip(self.methods, self.values, self.average):
            yield [m, *(f"{v:.4f}" for v in row), f"{avg:.4f}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def to_markdown(self) -> str:
        rows = list(self.rows())
        lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        return "\n".join(lines) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        c, m = stem.with_suffix(".csv"), stem.with_suffix(".md")
        c.write_text(self.to_csv())
        m.write_text(self.to_markdown())
        return c, m


def report(runs: dict[str, dict[str, float]], label: str = "score") -> Table:
    """Methods x sequences table with an average column; every method needs every sequence."""
    if not runs:
        raise ValueError("no runs to report")
    methods = list(runs)
    seqs = list(runs[methods[0]])
    if not seqs:
        raise ValueError("no sequences")
    for m in methods:
        if sorted(runs[m]) != sorted(seqs):
            raise ValueError(f"method {m!r} was evaluated on a different sequence set")
    vals = np.array([[float(runs[m][s]) for s in seqs] for m in methods])
    if not np.isfinite(vals).all():
        raise ValueError("non-finite score in report")
    return Table(methods, seqs, vals, label)


def _frames(d: Path) -> dict[str, list[Path]]:
    subs = sorted(p for p in d.iterdir() if p.is_dir())
    if subs:
        return {p.name: sorted(p.glob("*.png")) for p in subs}
    return {"all": sorted(d.glob("*.png"))}


def evaluate_dirs(pred_dir, gt_dir, extractor) -> dict[str, dict[str, float]]:
    """Per-sequence mean perceptual distance and CS over matching PNG frames.

    Sequences are subdirectories (or the directory itself when it has none).
    """
    from .io import load_image

    pred, gt = _frames(Path(pred_dir)), _frames(Path(gt_dir))
    if sorted(pred) != sorted(gt):
        raise ValueError("prediction and ground-truth sequences differ")
    out = {}
    for seq in pred:
        names_p, names_g = [p.name for p in pred[seq]], [p.name for p in gt[seq]]
        if names_p != names_g or not names_p:
            raise ValueError(f"sequence {seq!r}: frame sets differ or are empty")
        lp, cs = [], []
        for a, b in zip(pred[seq], gt[seq]):
            ia, ib = load_image(a), load_image(b)
            lp.append(perceptual_distance(ia, ib, extractor))
            cs.append(contextual_similarity(ia, ib, extractor))
        out[seq] = {"perceptual": float(np.mean(lp)), "cs": float(np.mean(cs)),
                    "stability": temporal_stability(lp) if len(lp) > 1 else math.nan, "frames": len(lp)}
    return out
