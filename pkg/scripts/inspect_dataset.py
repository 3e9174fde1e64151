#!/usr/bin/env python3
"""Print class statistics of a generated dataset.

Shows the class histogram, the training weights the manifest carries, and
the baselines a model has to beat (majority class, label entropy).
"""

import argparse
import math
import sys

import numpy as np

from footholds.labeler import NUM_CLASSES, load_dataset


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("dataset", help="dataset directory")
    args = ap.parse_args()

    images, labels, manifest = load_dataset(args.dataset)
    hist = np.asarray(manifest["class_histogram"], dtype=np.int64)
    p = hist / hist.sum()
    w = np.asarray(manifest["class_weights"])

    print(f"{manifest['samples']} samples for leg {manifest['leg']}, "
          f"{labels.size} labeled cells")
    print(f"\n{'class':>5} {'count':>10} {'share':>8} {'weight':>8}")
    for k in range(NUM_CLASSES):
        print(f"{k:>5} {hist[k]:>10} {p[k]:>8.4f} {w[k]:>8.3f}")

    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    print(f"\nmajority-class accuracy baseline: {p.max():.4f} (class "
          f"{int(p.argmax())})")
    print(f"label entropy: {entropy:.3f} nats "
          f"(uniform would be {math.log(NUM_CLASSES):.3f})")
    print(f"image pixel range: {images.min()}..{images.max()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
