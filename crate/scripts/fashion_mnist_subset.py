#!/usr/bin/env python3
"""Build the stratified Fashion-MNIST pools shipped under data/fashion-mnist/.

Source: the `fashion-mnist` npm package (v1.1.0), which stores 7000 images per
class as JSON arrays of 784 bytes. Per class, the first 6000 images form the
training source and the last 1000 the test source. A seeded draw of
TRAIN_PER_CLASS / TEST_PER_CLASS images per class is written as gzipped IDX.

    npm pack fashion-mnist && tar xzf fashion-mnist-1.1.0.tgz
    python3 scripts/fashion_mnist_subset.py package/src/clothes data/fashion-mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 300
TEST_PER_CLASS = 100
SEED = 20240611


def write_idx(out_dir, prefix, samples):
    images = out_dir / f"{prefix}-images-idx3-ubyte.gz"
    labels = out_dir / f"{prefix}-labels-idx1-ubyte.gz"
    with gzip.GzipFile(images, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(bytes(pixels))
    with gzip.GzipFile(labels, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    src, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(SEED)
    train, test = [], []
    for label in range(10):
        rows = [r for r in json.loads((src / f"{label}.json").read_text())["data"] if len(r) == 784]
        assert len(rows) == 7000, (label, len(rows))
        train += [(rows[i], label) for i in sorted(rng.sample(range(6000), TRAIN_PER_CLASS))]
        test += [(rows[i], label) for i in sorted(rng.sample(range(6000, 7000), TEST_PER_CLASS))]
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out_dir, "train-pool", train)
    write_idx(out_dir, "test-pool", test)


if __name__ == "__main__":
    main()
