"""Write the sklearn digits corpus as IDX files (MNIST's container format).

1797 8x8 grayscale digits, pixel values 0..16 rescaled to the 0..255 byte
range; first 1437 samples become the train split, the remaining 360 the
test split. Gives the data-dependent CLI examples and configs something to
chew on when MNIST itself is not on disk.

Usage: python3 scripts/make_digits_idx.py [--out data/digits]
"""

import argparse
import os

import numpy as np
from sklearn.datasets import load_digits

from orthoclf.data import write_idx

TRAIN_N = 1437  # 80/20 split of the 1797 samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/digits", help="output directory")
    args = ap.parse_args()

    digits = load_digits()
    imgs = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    os.makedirs(args.out, exist_ok=True)
    splits = {
        "train": (imgs[:TRAIN_N], labels[:TRAIN_N]),
        "test": (imgs[TRAIN_N:], labels[TRAIN_N:]),
    }
    for split, (im, lb) in splits.items():
        ip = os.path.join(args.out, f"{split}-images.idx")
        lp = os.path.join(args.out, f"{split}-labels.idx")
        write_idx(im, lb, ip, lp)
        print(f"{split}: {len(lb)} samples -> {ip}, {lp}")


if __name__ == "__main__":
    main()
