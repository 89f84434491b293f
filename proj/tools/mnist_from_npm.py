#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as JSON arrays of byte/255 values rounded to three decimals. This
script recovers the original bytes and writes a class-balanced train/test
split as big-endian IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist
"""
import argparse
import json
import pathlib
import random
import struct

SIDE = 28


def load_digit(path):
    values = json.loads(path.read_text())["data"]
    count = len(values) // (SIDE * SIDE)
    images = []
    for i in range(count):
        chunk = values[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
        images.append(bytes(min(255, max(0, round(v * 255))) for v in chunk))
    return images


def write_idx(prefix, images, labels):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--seed", type=int, default=20240501)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for digit in range(10):
        images = load_digit(args.digits_dir / f"{digit}.json")
        rng.shuffle(images)
        need = args.train_per_class + args.test_per_class
        if len(images) < need:
            raise SystemExit(f"digit {digit}: only {len(images)} samples")
        train += [(img, digit) for img in images[:args.train_per_class]]
        test += [(img, digit) for img in images[args.train_per_class:need]]
    rng.shuffle(train)
    rng.shuffle(test)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train", [x for x, _ in train], [y for _, y in train])
    write_idx(args.out_dir / "test", [x for x, _ in test], [y for _, y in test])


if __name__ == "__main__":
    main()
