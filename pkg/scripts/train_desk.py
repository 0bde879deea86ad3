"""Train the desk-scale model set (cached under .cache/models/<config key>)."""
import argparse
import logging
import time
from pathlib import Path

from poseanim.training import DeskConfig, train_suite

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=str(ROOT / ".cache" / "models"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.time()
    ms = train_suite(DeskConfig(), args.cache)
    print(f"models in {ms.root} ({time.time() - t0:.0f}s)")
