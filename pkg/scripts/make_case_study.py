"""Regenerate the bundled synthetic case study (data + run config).

The dataset is fully determined by the seed below; rerunning this script
reproduces case_study/train.csv byte for byte.  The committed reference
value in case_study/reference.json is the final training NLL of the
first verified fit of this config and is checked by the acceptance
suite; regenerate it with scripts/run_case_study.py if the config or
data ever change.
"""

import csv
import json
import os

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "case_study")

N = 600
SEED = 2024


def make_data():
    rng = np.random.default_rng(SEED)
    x1 = rng.normal(size=N)
    x2 = rng.uniform(-1.0, 1.0, N)
    x3 = rng.normal(size=N)
    x4 = rng.normal(size=N)
    y = (
        1.0
        + 1.5 * x1
        + np.sin(3.0 * x2)
        + 0.5 * np.tanh(x3) * x4
        + 0.3 * rng.normal(size=N)
    )
    return y, x1, x2, x3, x4


CONFIG = {
    "data": {"csv_path": "case_study/train.csv", "response": "y"},
    "family": "normal",
    "formulas": {
        "loc": "~ 1 + x1 + s(x2, df=6) + net(x3, x4)",
        "scale": "~ 1",
    },
    "networks": {
        "net": [
            {"units": 8, "activation": "relu"},
            {"units": 4, "activation": "relu"},
            {"units": 1, "activation": "linear"},
        ]
    },
    "train": {"epochs": 120, "batch_size": 64, "optimizer": "adam", "lr": 0.01},
    "seed": 20,
}


def main():
    os.makedirs(OUT, exist_ok=True)
    y, x1, x2, x3, x4 = make_data()
    with open(os.path.join(OUT, "train.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "x1", "x2", "x3", "x4"])
        for row in zip(y, x1, x2, x3, x4):
            w.writerow([repr(float(v)) for v in row])
    with open(os.path.join(OUT, "config.json"), "w") as fh:
        json.dump(CONFIG, fh, indent=2)
        fh.write("\n")
    print(f"wrote {OUT}/train.csv ({N} rows) and {OUT}/config.json")


if __name__ == "__main__":
    main()
