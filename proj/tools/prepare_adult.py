#!/usr/bin/env python3
"""Convert the raw UCI Adult release (adult.data + adult.test) into data/adult.csv.

The raw files use ", " separators, a junk first line in adult.test and a trailing
period on test labels. Both files are concatenated (48842 rows) so that the
train/validation/test split is drawn by the loader's seeded shuffle.

Cleaning rules:
  * "?" is a category of its own, renamed "Unknown" (only categorical columns use it).
  * marital-status values Married-civ-spouse / Married-AF-spouse /
    Married-spouse-absent are grouped as "Married".
"""
import argparse
import csv
import pathlib

COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]
MARRIED = {"Married-civ-spouse", "Married-AF-spouse", "Married-spouse-absent"}


def rows(path):
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(COLUMNS):
                raise ValueError(f"{path}: bad row {line!r}")
            cells = ["Unknown" if c == "?" else c for c in cells]
            cells[-1] = cells[-1].rstrip(".")
            if cells[5] in MARRIED:
                cells[5] = "Married"
            yield cells


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("raw_dir", type=pathlib.Path, help="directory holding adult.data and adult.test")
    ap.add_argument("out", type=pathlib.Path)
    args = ap.parse_args()
    n = 0
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for name in ("adult.data", "adult.test"):
            for r in rows(args.raw_dir / name):
                w.writerow(r)
                n += 1
    print(f"wrote {n} rows to {args.out}")


if __name__ == "__main__":
    main()
