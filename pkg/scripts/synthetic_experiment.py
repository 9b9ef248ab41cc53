"""End-to-end run on a generated corpus: corpus, split, training, test report.

Defaults match the acceptance configuration (two-block model, 180 px,
batch 32, lr 0.05). Artifacts go to ``--out`` through the regular CLI, so
the result directory looks exactly like one from ``agbada train``.
"""
import argparse
import sys
import time
from pathlib import Path

from agbada.cli import main as cli
from agbada.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--size", type=int, default=180)
    ap.add_argument("--arch", default="mini")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    t0 = time.perf_counter()
    image_dir, index_csv, _ = make_corpus(out / "corpus", args.n, args.size, seed=args.seed + 1)
    common = ["--data-dir", str(image_dir), "--index-csv", str(index_csv), "--out-dir", str(out),
              "--arch", args.arch, "--input-size", str(args.size), "--batch-size", "32",
              "--seed", str(args.seed)]
    code = cli(["train", *common, "--epochs", str(args.epochs), "--lr", "0.05", "--unfreeze-k", "-1",
                "--stop-patience", "3", "--min-delta", "0.01", "--lr-patience", "2"])
    if code == 0:
        code = cli(["evaluate", *common])
    print(f"elapsed\t{time.perf_counter() - t0:.1f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
