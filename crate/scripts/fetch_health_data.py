#!/usr/bin/env python3
"""Export the scikit-learn diabetes and breast cancer datasets to CSV.

Writes data/diabetes.csv (442 rows, 10 raw features, continuous target)
and data/breastcancer.csv (569 rows, 30 features, binary target). Both
files get a header row; the label column is named "target". Run from the
repository root:

    python3 scripts/fetch_health_data.py
"""

import csv
import pathlib
import sys

try:
    from sklearn.datasets import load_breast_cancer, load_diabetes
except ImportError:
    sys.exit("scikit-learn is required: pip install scikit-learn")


def write(path: pathlib.Path, names, X, y) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, "target"])
        for row, label in zip(X, y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(label))])
    print(f"wrote {path} ({len(y)} rows, {len(names)} features)")


def main() -> None:
    out = pathlib.Path(__file__).resolve().parent.parent / "data"

    diabetes = load_diabetes(scaled=False)
    write(out / "diabetes.csv", diabetes.feature_names, diabetes.data, diabetes.target)

    cancer = load_breast_cancer()
    write(out / "breastcancer.csv", cancer.feature_names, cancer.data, cancer.target)


if __name__ == "__main__":
    main()
