"""Write a synthetic two-class corpus (PNG images plus index.csv).

    python3 scripts/make_corpus.py out/corpus --n 400 --size 180 --seed 1
"""
import argparse

from agbada.data import class_distribution
from agbada.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--size", type=int, default=180)
    ap.add_argument("--female-fraction", type=float, default=0.625)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    image_dir, index_csv, rows = make_corpus(args.out_dir, args.n, args.size, args.female_fraction, args.seed)
    print(f"images\t{image_dir}")
    print(f"index\t{index_csv}")
    for label, (count, frac) in class_distribution(rows).items():
        print(f"{label}\t{count}\t{frac:.3f}")


if __name__ == "__main__":
    main()
