"""Write IDX files from a CSV MNIST subset (label in the last column).

The 5000-image subset shipped in the ``mlxtend`` wheel is the only MNIST copy
reachable in offline environments. This script splits it into stratified
train/test sets and writes the four standard IDX files, so the regular IDX
loader can consume it.

    python scripts/mnist_subset_to_idx.py mnist_5k.csv.gz out_dir/
    python scripts/mnist_subset_to_idx.py mlxtend-0.24.0-py3-none-any.whl out_dir/
"""

import argparse
import gzip
import io
import os
import struct
import zipfile

import numpy as np

WHEEL_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(path):
    if path.endswith(".whl"):
        raw = zipfile.ZipFile(path).read(WHEEL_MEMBER)
    else:
        with open(path, "rb") as f:
            raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.uint8)


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for extent in array.shape:
            f.write(struct.pack(">I", extent))
        f.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source")
    parser.add_argument("out_dir")
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rows = read_rows(args.source)
    images = rows[:, :-1].reshape(-1, 28, 28)
    labels = rows[:, -1]

    rng = np.random.default_rng(args.seed)
    test_idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(members, size=args.test_per_class, replace=False))
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    train_order = rng.permutation(np.flatnonzero(~test_mask))
    test_order = rng.permutation(np.flatnonzero(test_mask))

    os.makedirs(args.out_dir, exist_ok=True)
    for split, order in (("train", train_order), ("t10k", test_order)):
        write_idx(os.path.join(args.out_dir, f"{split}-images-idx3-ubyte"), images[order], 0x803)
        write_idx(os.path.join(args.out_dir, f"{split}-labels-idx1-ubyte"), labels[order], 0x801)
        print(f"{split}: {len(order)} images")


if __name__ == "__main__":
    main()
