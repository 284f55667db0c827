"""Write the 5000-image MNIST subset shipped inside the mlxtend wheel as IDX files.

The desk-scale preset reads ``data/mnist5k/images-idx3-ubyte`` and
``data/mnist5k/labels-idx1-ubyte``. The images are the original 28x28 MNIST
digits (500 per class); the CLI downsamples them to 14x14 when the preset asks.

Usage:
    python3 python/make_mnist_subset.py [--wheel path/to/mlxtend.whl] [--out data/mnist5k]

Without ``--wheel`` the script runs ``pip download mlxtend`` into a temp dir.
"""

import argparse
import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(explicit):
    if explicit:
        return pathlib.Path(explicit)
    tmp = pathlib.Path(tempfile.mkdtemp())
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(tmp), "mlxtend"],
        check=True,
    )
    return next(tmp.glob("mlxtend-*.whl"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data/mnist5k")
    args = ap.parse_args()

    wheel = find_wheel(args.wheel)
    rows = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode().splitlines()
    pixels, labels = [], []
    for row in rows:
        vals = [int(float(v)) for v in row.split(",")]
        pixels.append(bytes(vals[:-1]))
        labels.append(vals[-1])

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(pixels), 28, 28))
        for p in pixels:
            assert len(p) == 784
            f.write(p)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(pixels)} images to {out}")


if __name__ == "__main__":
    main()
