"""Rebuild the bundled 10k MNIST subset as gzipped IDX files.

The source is the ``mnist`` npm package (10,000 MNIST digits stored as
per-digit JSON arrays of pixel intensities in [0, 1], three decimals).
Fetch it with ``npm pack mnist`` and point this script at the tarball.

    python tools/build_mnist_subset.py mnist-1.1.0.tgz src/dpfedsim/_data
"""
import gzip
import json
import struct
import sys
import tarfile
from pathlib import Path

import numpy as np


def main(tarball: str, out_dir: str) -> None:
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            pix = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255).astype(np.uint8)
            images.append(pix)
            labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, n, 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, n))
        fh.write(labels.tobytes())
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
