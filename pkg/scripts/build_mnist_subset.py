"""Convert mlxtend's bundled 5000-image MNIST sample into gzipped IDX files.

Usage:
    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/build_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-5k

The CSV holds 784 raw pixel bytes followed by the label on each row.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from fedbnn.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", help="mlxtend wheel or the mnist_5k.csv.gz file itself")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    src = Path(args.source)
    raw = zipfile.ZipFile(src).read(MEMBER) if src.suffix == ".whl" else src.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    assert pixels.min() >= 0 and pixels.max() <= 255 and pixels.shape[1] == 784
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", pixels.reshape(-1, 28, 28))
    write_idx(out / "labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} examples to {out}")


if __name__ == "__main__":
    main()
