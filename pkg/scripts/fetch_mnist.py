"""Materialize MNIST as standard IDX files.

Hosts serving the original IDX archives are not always reachable, so this
pulls the ``mnist-dnn`` wheel from the Python package index (it ships the
full 60k/10k MNIST as CSV: label followed by 784 uint8 pixels) and rewrites
it as gzipped IDX files that :func:`gradspace.data_io.load_mnist` reads.

    python scripts/fetch_mnist.py [--out data/mnist]
"""

import argparse
import glob
import io
import os
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

from gradspace.data_io import Dataset, write_idx, MNIST_FILES

WHEEL = "mnist-dnn==0.1.3"
MEMBERS = {"train": "mnist_dnn/data/mnist_train.csv", "test": "mnist_dnn/data/mnist_test.csv"}
EXPECTED = {"train": 60000, "test": 10000}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    ap.add_argument("--wheel", help="use an already downloaded wheel instead of pip")
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.check_call([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL])
            wheel = glob.glob(os.path.join(tmp, "mnist_dnn-*.whl"))[0]
        with zipfile.ZipFile(wheel) as z:
            for split, member in MEMBERS.items():
                table = np.loadtxt(io.BytesIO(z.read(member)), delimiter=",", skiprows=1, dtype=np.int64)
                if table.shape != (EXPECTED[split], 785):
                    sys.exit(f"unexpected {split} table shape {table.shape}")
                ds = Dataset(table[:, 1:] / 255.0, table[:, 0], {"num_classes": 10, "image_shape": [28, 28]})
                images, labels = MNIST_FILES[split]
                write_idx(ds, os.path.join(args.out, images + ".gz"), os.path.join(args.out, labels + ".gz"))
                print(f"{split}: {len(ds)} images -> {args.out}")


if __name__ == "__main__":
    main()
