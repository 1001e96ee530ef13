#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the 5000-sample CSV that
ships inside the mlxtend wheel.

Output (default data/mnist5k/):
    train-images-idx3-ubyte, train-labels-idx1-ubyte   3000 samples
    t10k-images-idx3-ubyte,  t10k-labels-idx1-ubyte    2000 samples

The split is a fixed permutation (numpy RandomState(20240607)), so rerunning
the script reproduces the committed files byte for byte.
"""
import argparse
import glob
import gzip
import os
import struct
import subprocess
import tempfile
import zipfile

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_csv(wheel):
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.check_call(
            ["pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp, "-q"]
        )
        wheel = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(CSV_MEMBER)).decode()
    rows = np.array(
        [[int(v) for v in line.split(",")] for line in raw.strip().split("\n")],
        dtype=np.int64,
    )
    return rows[:, :-1].astype(np.uint8), rows[:, -1].astype(np.uint8)


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel", help="path to an already downloaded mlxtend wheel")
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--train", type=int, default=3000)
    args = ap.parse_args()

    x, y = fetch_csv(args.wheel)
    perm = np.random.RandomState(20240607).permutation(len(y))
    x, y = x[perm], y[perm]
    os.makedirs(args.out, exist_ok=True)
    n = args.train
    write_images(os.path.join(args.out, "train-images-idx3-ubyte"), x[:n])
    write_labels(os.path.join(args.out, "train-labels-idx1-ubyte"), y[:n])
    write_images(os.path.join(args.out, "t10k-images-idx3-ubyte"), x[n:])
    write_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte"), y[n:])
    print(f"wrote {n} train / {len(y) - n} test samples to {args.out}")


if __name__ == "__main__":
    main()
