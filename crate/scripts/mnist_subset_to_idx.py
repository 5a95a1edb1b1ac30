#!/usr/bin/env python3
"""Write the 5,000-image MNIST subset shipped inside the mlxtend wheel as an IDX pair.

Usage: python3 scripts/mnist_subset_to_idx.py [OUT_DIR]

Fetches the wheel with `pip download` when it is not already cached and
writes `mnist5k-images-idx3-ubyte` / `mnist5k-labels-idx1-ubyte`.
"""
import glob
import gzip
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(tmp):
    wheels = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))
    if not wheels:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "mlxtend", "-d", tmp]
        )
        wheels = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))
    return wheels[0]


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        with zipfile.ZipFile(find_wheel(tmp)) as z:
            rows = gzip.decompress(z.read(MEMBER)).decode().splitlines()
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        vals = [int(float(v)) for v in row.split(",")]
        pixels.extend(vals[:-1])
        labels.append(vals[-1])
    n = len(rows)
    with open(os.path.join(out, "mnist5k-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels)
    with open(os.path.join(out, "mnist5k-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
