"""Rebuild the four MNIST IDX files from the ``mnist.pkl.gz`` pickle.

The pickle (50k train / 10k valid / 10k test, float32 pixels = byte / 256) is
the only MNIST copy reachable from an offline mirror; the original training
order is train followed by valid, so the IDX files come back bit-exact.

    python scripts/mnist_from_pickle.py path/to/mnist.pkl.gz OUT_DIR
"""
import gzip
import pickle
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main(pickle_path, out_dir):
    with gzip.open(pickle_path, "rb") as f:
        (xtr, ytr), (xva, yva), (xte, yte) = pickle.load(f, encoding="latin1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def to_bytes(x):
        b = np.round(x * 256.0)
        assert np.array_equal(b, x * 256.0), "pixels are not byte/256"
        return b.astype(np.uint8)

    write_idx_images(out / "train-images-idx3-ubyte", to_bytes(np.concatenate([xtr, xva])))
    write_idx_labels(out / "train-labels-idx1-ubyte", np.concatenate([ytr, yva]))
    write_idx_images(out / "t10k-images-idx3-ubyte", to_bytes(xte))
    write_idx_labels(out / "t10k-labels-idx1-ubyte", yte)
    print(f"wrote IDX files to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
