"""Export the five small tabular benchmarks to CSV (header row, label column ``y``, 1 = outlier).

The raw tables come from two PyPI wheels that bundle them:

    pip download --no-deps keel-ds==0.2.5 mil==1.0.5 -d wheels/
    python scripts/build_benchmarks.py wheels/keel_ds-0.2.5-py3-none-any.whl \
        wheels/mil-1.0.5-py3-none-any.whl tests/data

Outlier definitions follow the usual ODDS/ADBench conventions:

* breastw: Wisconsin breast cancer, malignant = outlier (683 x 9, 239 outliers)
* pima: diabetes positive = outlier (768 x 8, 268 outliers)
* ionosphere: "bad" returns = outlier; the binary first attribute is
  dropped, leaving 32 features (351 rows, 126 outliers)
* wbc: the 213 distinct benign rows plus 10 distinct malignant rows drawn
  with a fixed seed (223 x 9)
* musk: Musk2 conformers of the non-musk bags 55, 90, 91 as inliers and
  of the musk bags 1, 3 as outliers (3062 x 166, 97 outliers)
"""

import argparse
import csv
import io
import zipfile
from pathlib import Path

import numpy as np

WBC_OUTLIERS = 10
WBC_SEED = 0
MUSK_INLIER_BAGS = (55, 90, 91)
MUSK_OUTLIER_BAGS = (1, 3)


def _member(wheel, suffix):
    with zipfile.ZipFile(wheel) as z:
        name = next(n for n in z.namelist() if n.endswith(suffix))
        return z.read(name).decode("utf-8")


def _rows(text):
    return [[c.strip() for c in r] for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("@")]


def _write(path, X, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(X.shape[1])] + ["y"])
        for row, label in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
    print(f"{path}: {X.shape[0]} rows, {X.shape[1]} features, {int(y.sum())} outliers")


def build(keel_wheel, mil_wheel, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    rows = _rows(_member(keel_wheel, "balanced/raw/wisconsin.dat"))
    X = np.array([[float(c) for c in r[:-1]] for r in rows])
    y = np.array([r[-1] == "4" for r in rows], dtype=int)
    _write(out / "breastw.csv", X, y)

    benign = np.unique(X[y == 0], axis=0)
    malignant = np.unique(X[y == 1], axis=0)
    pick = np.random.default_rng(WBC_SEED).choice(len(malignant), WBC_OUTLIERS, replace=False)
    Xw = np.vstack([benign, malignant[np.sort(pick)]])
    yw = np.r_[np.zeros(len(benign), int), np.ones(WBC_OUTLIERS, int)]
    _write(out / "wbc.csv", Xw, yw)

    rows = _rows(_member(keel_wheel, "balanced/raw/pima.dat"))
    X = np.array([[float(c) for c in r[:-1]] for r in rows])
    y = np.array([r[-1] == "tested_positive" for r in rows], dtype=int)
    _write(out / "pima.csv", X, y)

    rows = _rows(_member(keel_wheel, "balanced/raw/ionosphere.dat"))
    X = np.array([[float(c) for c in r[1:-1]] for r in rows])
    y = np.array([r[-1] == "b" for r in rows], dtype=int)
    _write(out / "ionosphere.csv", X, y)

    rows = _rows(_member(mil_wheel, "csv/musk2.csv"))
    data = np.array([[float(c) for c in r] for r in rows])
    bag = data[:, 1].astype(int)
    keep_in = np.isin(bag, MUSK_INLIER_BAGS)
    keep_out = np.isin(bag, MUSK_OUTLIER_BAGS)
    X = np.vstack([data[keep_in, 2:], data[keep_out, 2:]])
    y = np.r_[np.zeros(keep_in.sum(), int), np.ones(keep_out.sum(), int)]
    _write(out / "musk.csv", X, y)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("keel_wheel")
    ap.add_argument("mil_wheel")
    ap.add_argument("out")
    args = ap.parse_args()
    build(args.keel_wheel, args.mil_wheel, args.out)


if __name__ == "__main__":
    main()
