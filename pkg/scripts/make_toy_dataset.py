#!/usr/bin/env python3
"""Write a small synthetic expression dataset (PNGs + manifest.csv).

The images are procedural color/stripe patterns, one style per class, so
they are linearly separable enough for overfit smoke tests.

Usage:
    python scripts/make_toy_dataset.py --out data/toy --per-class 8 --size 32
"""

import argparse

from aucvt.synthetic import write_synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--per-class", type=int, default=8)
    parser.add_argument("--size", type=int, default=32, help="image edge length in pixels")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    manifest = write_synthetic_dataset(args.out, args.per_class, args.size, args.seed)
    print(f"wrote {args.per_class * 6} images, manifest at {manifest}")


if __name__ == "__main__":
    main()
