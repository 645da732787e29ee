#!/usr/bin/env python3
"""Rebuild data/mnist/ from the 10 000 MNIST digits bundled in the npm `mnist` package.

Usage: python3 scripts/mnist_from_npm.py [--package-dir DIR]

Without --package-dir the package tarball is fetched with `npm pack mnist`.
Writes gzipped IDX files (train: 8000 images, t10k: 2000 images) with a fixed
seeded shuffle so the split is reproducible.
"""
import argparse
import gzip
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data", "mnist")
TRAIN = 8000


def load_digits(pkg):
    samples = []
    for label in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{label}.json")) as f:
            data = json.load(f)["data"]
        for start in range(0, len(data), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[start:start + 784])
            samples.append((pixels, label))
    return samples


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package-dir")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package_dir
        if pkg is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--pack-destination", tmp], check=True)
            with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
                tar.extractall(tmp)
            pkg = os.path.join(tmp, "package")
        samples = load_digits(pkg)
    random.Random(20231017).shuffle(samples)
    os.makedirs(OUT, exist_ok=True)
    for name, part in (("train", samples[:TRAIN]), ("t10k", samples[TRAIN:])):
        write_idx(os.path.join(OUT, f"{name}-images-idx3-ubyte.gz"), 0x803, (len(part), 28, 28),
                  b"".join(p for p, _ in part))
        write_idx(os.path.join(OUT, f"{name}-labels-idx1-ubyte.gz"), 0x801, (len(part),),
                  bytes(l for _, l in part))
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
