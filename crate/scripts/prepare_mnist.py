#!/usr/bin/env python3
"""Convert the digit subset shipped in the npm `mnist` package to IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/prepare_mnist.py package/src/digits data/mnist

Writes gzip-compressed train/t10k image and label files in the standard
MNIST IDX layout (magic 0x00000803 / 0x00000801, big-endian header).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TEST_COUNT = 1000


def write_images(path, images):
    header = struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header)
        for img in images:
            fh.write(bytes(img))


def write_labels(path, labels):
    header = struct.pack(">II", 0x00000801, len(labels))
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header)
        fh.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        for i in range(n):
            px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(0).shuffle(samples)
    test, train = samples[:TEST_COUNT], samples[TEST_COUNT:]
    for prefix, part in (("train", train), ("t10k", test)):
        write_images(dst / f"{prefix}-images-idx3-ubyte.gz", [s[0] for s in part])
        write_labels(dst / f"{prefix}-labels-idx1-ubyte.gz", [s[1] for s in part])
        print(prefix, len(part))


if __name__ == "__main__":
    main()
