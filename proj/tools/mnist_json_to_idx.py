#!/usr/bin/env python3
"""Convert the digit JSON files of the npm `mnist` package into IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_json_to_idx.py package/src/digits data/mnist10k

The package holds 10,000 MNIST images stored as floats in [0, 1] (the
pixel byte divided by 255 and rounded to three places). They are turned
back into bytes, shuffled with a fixed seed and split into train/test.
"""
import argparse
import gzip
import json
import pathlib
import struct

import numpy as np


def write_idx(path, magic, array):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=2018)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        pixels = np.rint(np.asarray(data, dtype=np.float64) * 255.0).clip(0, 255).reshape(-1, 28, 28)
        images.append(pixels)
        labels.append(np.full(len(pixels), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", 2051, images[:n])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", 2049, labels[:n])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", 2051, images[n:])
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", 2049, labels[n:])
    print(f"{len(labels)} images: {n} train, {len(labels) - n} test -> {args.out_dir}")


if __name__ == "__main__":
    main()
