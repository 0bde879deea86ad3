"""Per-frame perceptual scores on a turntable clip, with their standard deviation per method."""
import argparse
import json
from pathlib import Path

import numpy as np

from poseanim.bench import score_sequence, turntable_sequence
from poseanim.metrics import temporal_stability
from poseanim.training import DeskConfig, load_model_set, train_suite

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt")
    ap.add_argument("--ids", nargs="*", default=["SGR", "SGR-A", "R"])
    ap.add_argument("--frames", type=int, default=30)
    ap.add_argument("--clips", type=int, default=1)
    ap.add_argument("--out", default=str(ROOT / "results" / "stability"))
    args = ap.parse_args()
    models = load_model_set(args.ckpt) if args.ckpt else train_suite(DeskConfig(), ROOT / ".cache" / "models")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for c in range(args.clips):
        seq = turntable_sequence(c, models.config, args.frames)
        for a in args.ids:
            r = score_sequence(models, seq, a)
            rows.setdefault(a, []).append({"clip": seq.name, "frames": r["frames"],
                                           "std": temporal_stability(r["frames"]), "mean": r["mean"]})
    (out / "stability.json").write_text(json.dumps(rows, indent=1))
    with open(out / "per_frame.csv", "w") as fh:
        fh.write("method,clip,frame,score\n")
        for a, clips in rows.items():
            for c in clips:
                fh.writelines(f"{a},{c['clip']},{k},{s:.6f}\n" for k, s in enumerate(c["frames"]))
    for a, clips in rows.items():
        print(f"{a:10s} std {np.mean([c['std'] for c in clips]):.5f}  mean {np.mean([c['mean'] for c in clips]):.5f}")
