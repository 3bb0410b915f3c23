#!/usr/bin/env python3
"""Resize every image of an IDX dataset directory (bilinear, PIL).

    python3 scripts/resize_idx.py data/mnist-subset data/mnist16 --size 16
"""
import argparse
import pathlib
import shutil
import struct

import numpy as np
from PIL import Image


def resize_images(src, dst, size):
    raw = src.read_bytes()
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise SystemExit(f"{src}: not an IDX image file (magic {magic:#x})")
    pix = np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, h, w)
    out = np.stack([np.asarray(Image.fromarray(p).resize((size, size), Image.BILINEAR)) for p in pix])
    with open(dst, "wb") as f:
        f.write(struct.pack(">IIII", magic, n, size, size))
        f.write(out.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src")
    ap.add_argument("dst")
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()
    src, dst = pathlib.Path(args.src), pathlib.Path(args.dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name in ("train", "t10k"):
        resize_images(src / f"{name}-images-idx3-ubyte", dst / f"{name}-images-idx3-ubyte", args.size)
        shutil.copyfile(src / f"{name}-labels-idx1-ubyte", dst / f"{name}-labels-idx1-ubyte")


if __name__ == "__main__":
    main()
