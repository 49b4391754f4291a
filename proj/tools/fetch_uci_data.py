#!/usr/bin/env python3
"""Fetch the Boston housing and concrete compressive strength tables as CSV.

Writes <out>/boston.csv (target MEDV, last column) and <out>/concrete.csv
(target compressive_strength, last column). The files are not redistributed
with the repository.

  python3 tools/fetch_uci_data.py [--out data]

Boston comes from the copy bundled in the scikit-learn 1.1.3 wheel, concrete
from the `rdatasets` package (modeldata::concrete). Both are fetched with pip.
"""

import argparse
import csv
import io
import pathlib
import subprocess
import sys
import tempfile
import zipfile

BOSTON_MEMBER = "sklearn/datasets/data/boston_house_prices.csv"


def fetch_boston(out: pathlib.Path) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
             "--python-version", "3.10", "--platform", "manylinux2014_x86_64",
             "scikit-learn==1.1.3", "-d", tmp],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("scikit_learn-1.1.3-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = zf.read(BOSTON_MEMBER).decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    # First line is "506,13,<names>" metadata, second is the header.
    header, body = rows[1], [r for r in rows[2:] if r]
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(body)
    print(f"wrote {out} ({len(body)} rows)")


def fetch_concrete(out: pathlib.Path) -> None:
    try:
        import rdatasets
    except ImportError:
        subprocess.run([sys.executable, "-m", "pip", "install", "rdatasets"], check=True)
        import rdatasets
    df = rdatasets.data("modeldata", "concrete")
    df = df.drop(columns=[c for c in ("rownames",) if c in df.columns])
    cols = [c for c in df.columns if c != "compressive_strength"] + ["compressive_strength"]
    df[cols].to_csv(out, index=False)
    print(f"wrote {out} ({len(df)} rows)")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data", type=pathlib.Path)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    fetch_boston(args.out / "boston.csv")
    fetch_concrete(args.out / "concrete.csv")


if __name__ == "__main__":
    main()
