#!/usr/bin/env python3
"""Build a desk-scale MNIST subset as IDX files from package-mirror sources.

Source: the npm package `mnist` (10,000 genuine 28x28 MNIST digits with
pixel values pre-scaled to [0,1]). The digits are shuffled with a fixed seed
and split into an 8,000-digit training pool (`train-*`) and a disjoint
2,000-digit held-out test set (`t10k-*`).

Usage: python3 scripts/fetch_mnist_subset.py [OUT_DIR]   (default data/mnist)
"""
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile


def write_idx(out_dir, stem, images, labels):
    with open(os.path.join(out_dir, f"{stem}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(os.path.join(out_dir, f"{stem}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def npm_digits(tmp):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, capture_output=True)
    with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(tmp)
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(tmp, "package", "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(0, len(flat), 784):
            images.append([min(255, max(0, round(v * 255))) for v in flat[i : i + 784]])
            labels.append(digit)
    return images, labels


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join("data", "mnist")
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        images, labels = npm_digits(tmp)
    order = list(range(len(images)))
    random.Random(20170301).shuffle(order)
    test, pool = order[:2000], order[2000:]
    write_idx(out_dir, "train", [images[i] for i in pool], [labels[i] for i in pool])
    write_idx(out_dir, "t10k", [images[i] for i in test], [labels[i] for i in test])
    print(f"train pool: {len(pool)}  test: {len(test)}")


if __name__ == "__main__":
    main()
