#!/usr/bin/env python3
"""Download the FashionMNIST IDX files for the desk-scale training runs.

Run this on a machine with internet access, then point WEIGHTGEN_DATA
(or the --data flag) at the output directory:

    python3 scripts/fetch_fashion_mnist.py --out data/fashion
    export WEIGHTGEN_DATA=$PWD/data/fashion

The four files are downloaded gzipped and stored decompressed under the
canonical IDX names the loader expects. Each file is validated
structurally (magic number, sample count, payload size) before it is
kept.
"""

import argparse
import gzip
import os
import struct
import sys
import urllib.request

MIRRORS = (
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    "https://storage.googleapis.com/tensorflow/tf-keras-datasets/",
)

# name -> (magic, expected sample count)
FILES = {
    "train-images-idx3-ubyte": (2051, 60000),
    "train-labels-idx1-ubyte": (2049, 60000),
    "t10k-images-idx3-ubyte": (2051, 10000),
    "t10k-labels-idx1-ubyte": (2049, 10000),
}


def validate(name: str, payload: bytes) -> None:
    magic_want, count_want = FILES[name]
    magic, count = struct.unpack(">ii", payload[:8])
    if magic != magic_want:
        raise IOError(f"{name}: magic {magic}, expected {magic_want}")
    if count != count_want:
        raise IOError(f"{name}: {count} samples, expected {count_want}")
    if magic == 2051:
        rows, cols = struct.unpack(">ii", payload[8:16])
        expected_size = 16 + count * rows * cols
        if (rows, cols) != (28, 28):
            raise IOError(f"{name}: images are {rows}x{cols}, expected 28x28")
    else:
        expected_size = 8 + count
    if len(payload) != expected_size:
        raise IOError(f"{name}: {len(payload)} bytes, expected {expected_size}")


def fetch(name: str, out_dir: str) -> None:
    target = os.path.join(out_dir, name)
    if os.path.exists(target):
        print(f"{name}: already present")
        return
    last_error = None
    for mirror in MIRRORS:
        url = mirror + name + ".gz"
        try:
            print(f"{name}: downloading from {url}")
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = gzip.decompress(resp.read())
            validate(name, payload)
            tmp = target + ".part"
            with open(tmp, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, target)
            print(f"{name}: ok ({len(payload)} bytes)")
            return
        except Exception as exc:
            last_error = exc
            print(f"{name}: {exc}", file=sys.stderr)
    raise SystemExit(f"could not fetch {name}: {last_error}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/fashion", help="target directory")
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in FILES:
        fetch(name, args.out)
    print(f"done: set WEIGHTGEN_DATA={os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
