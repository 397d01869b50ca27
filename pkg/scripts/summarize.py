"""Print per-(sweep value, estimator) means and medians from a results.csv."""
import argparse
import csv
import math
from collections import defaultdict

import numpy as np

METRICS = ("nmse_ch_db", "mse_angle_db", "nmse_r_db")


def load(path):
    groups = defaultdict(lambda: defaultdict(list))
    with open(path) as fh:
        for row in csv.DictReader(fh):
            key = (float(row["sweep_value"]), row["estimator"])
            for m in METRICS:
                v = float(row[m])
                if math.isfinite(v):
                    groups[key][m].append(v)
    return groups


def print_summary(path):
    groups = load(path)
    head = f"{'value':>8} {'estimator':>10} " + " ".join(f"{m + ' mean/med':>24}" for m in METRICS)
    print(head)
    for (value, name), cols in sorted(groups.items()):
        cells = []
        for m in METRICS:
            v = np.array(cols[m])
            cells.append(f"{v.mean():>11.2f} /{np.median(v):>10.2f}" if v.size else f"{'-':>24}")
        print(f"{value:>8g} {name:>10} " + " ".join(cells))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("results", help="path to results.csv")
    print_summary(ap.parse_args().results)
