#!/usr/bin/env python3
"""Build the small MNIST subset under crates/core/testdata/mnist.

Source: the `mnist` npm package (MIT, digits taken from the MNIST database),
obtained with `npm pack mnist` and unpacked. Usage:

    python3 scripts/make_mnist_subset.py path/to/package crates/core/testdata/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

PER_CLASS = 300
TRAIN = 2000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(int(round(v * 255)) for v in img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    items = []
    for digit in range(10):
        data = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for k in range(PER_CLASS):
            items.append((data[k * 784:(k + 1) * 784], digit))
    random.Random(20200917).shuffle(items)
    out.mkdir(parents=True, exist_ok=True)
    train, test = items[:TRAIN], items[TRAIN:]
    write_images(out / "train-images.idx3-ubyte", [i for i, _ in train])
    write_labels(out / "train-labels.idx1-ubyte", [l for _, l in train])
    write_images(out / "test-images.idx3-ubyte", [i for i, _ in test])
    write_labels(out / "test-labels.idx1-ubyte", [l for _, l in test])


if __name__ == "__main__":
    main()
