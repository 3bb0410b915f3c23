#!/usr/bin/env python3
"""Build a ~10k-sample MNIST subset in IDX format from the `mnist` npm package.

The npm package ships roughly 1000 digits per class as JSON arrays of
pixel/255 values. Every fifth sample of each class goes to the test split,
the rest to the train split; both splits are shuffled with a fixed seed.

    python3 scripts/make_mnist_subset.py --out data/mnist-subset
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

import numpy as np


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tf:
        tf.extractall(workdir)
    return workdir / "package"


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist-subset")
    ap.add_argument("--package", help="already-extracted npm package dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = pathlib.Path(args.package) if args.package else fetch_package(pathlib.Path(tmp))
        train_x, train_y, test_x, test_y = [], [], [], []
        for digit in range(10):
            data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
            pix = np.rint(np.asarray(data, dtype=np.float64) * 255.0).clip(0, 255)
            pix = pix.reshape(-1, 28 * 28)
            for i, row in enumerate(pix):
                if i % 5 == 4:
                    test_x.append(row)
                    test_y.append(digit)
                else:
                    train_x.append(row)
                    train_y.append(digit)

    rng = np.random.default_rng(args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        xs = np.stack(xs)
        ys = np.asarray(ys)
        perm = rng.permutation(len(ys))
        write_idx_images(out / f"{name}-images-idx3-ubyte", xs[perm])
        write_idx_labels(out / f"{name}-labels-idx1-ubyte", ys[perm])
        print(f"{name}: {len(ys)} samples")


if __name__ == "__main__":
    main()
