"""Build a 10,000-digit MNIST subset as gzipped IDX files.

Source: the ``mnist`` npm package (MIT), which ships 10,000 MNIST digits as
JSON arrays of pixel/255 values rounded to 3 decimals. Rounding to 3 decimals
keeps every u8 level distinct, so ``round(v * 255)`` recovers the original
bytes.

Usage::

    npm pack mnist@1.1.0            # produces mnist-1.1.0.tgz
    python scripts/build_mnist10k.py mnist-1.1.0.tgz data/mnist10k
"""

import argparse
import io
import json
import tarfile
from pathlib import Path

import numpy as np

from eowsoftmax.data import write_idx_images, write_idx_labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("tarball")
    ap.add_argument("outdir")
    ap.add_argument("--seed", type=int, default=0, help="seed of the fixed shuffle across digit classes")
    args = ap.parse_args(argv)

    images, labels = [], []
    with tarfile.open(args.tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(io.TextIOWrapper(member))["data"], dtype=np.float64)
            pix = np.rint(flat * 255).reshape(-1, 28, 28)
            if pix.min() < 0 or pix.max() > 255:
                raise SystemExit(f"digit {digit}: pixel out of range")
            images.append(pix.astype(np.uint8))
            labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "images-idx3-ubyte.gz", images[order])
    write_idx_labels(out / "labels-idx1-ubyte.gz", labels[order])
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main()
