"""Score every ablation on the held-out suite and write perceptual/coverage tables."""
import argparse
import json
import logging
from pathlib import Path

from poseanim.bench import run_suite
from poseanim.metrics import report
from poseanim.pipeline import ABLATIONS
from poseanim.training import DeskConfig, load_model_set, train_suite

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", help="checkpoint directory (default: train or load the desk suite)")
    ap.add_argument("--ids", nargs="*", default=[a for a in ABLATIONS if a != "SGR-L_KL"])
    ap.add_argument("--sequences", type=int, default=6)
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--out", default=str(ROOT / "results" / "ablation"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    models = load_model_set(args.ckpt) if args.ckpt else train_suite(DeskConfig(), ROOT / ".cache" / "models")
    ids = [i for i in args.ids if i != "SGR-L_KL" or models.render_nokl is not None]
    res = run_suite(models, ids, args.sequences, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report({a: {s: r["mean"] for s, r in seqs.items()} for a, seqs in res.items()}, "perceptual").write(
        out / "perceptual")
    report({a: {s: r["coverage"] for s, r in seqs.items()} for a, seqs in res.items()}, "coverage").write(
        out / "coverage")
    (out / "scores.json").write_text(json.dumps(res, indent=1))
    print((out / "perceptual.md").read_text())
