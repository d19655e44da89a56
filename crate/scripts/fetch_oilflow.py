#!/usr/bin/env python3
"""Download the Oilflow data (1000 points, 12 features, 3 classes) and write
`<out>/oilflow/data.csv` and `<out>/oilflow/schema.txt`.

    python3 scripts/fetch_oilflow.py --out "$MLGPLVM_DATA_DIR"
    python3 scripts/fetch_oilflow.py --out data --from /path/with/DataTrn.txt
"""
import argparse
import csv
import pathlib
import urllib.request

MIRROR = "http://staffwww.dcs.shef.ac.uk/people/N.Lawrence/dataset_mirror/oil_data/"
FILES = ["DataTrn.txt", "DataTrnLbls.txt"]


def read_rows(path):
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split()])
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True, type=pathlib.Path)
    ap.add_argument("--from", dest="source", type=pathlib.Path, help="directory already holding the raw files")
    args = ap.parse_args()

    dest = args.out / "oilflow"
    dest.mkdir(parents=True, exist_ok=True)
    raw = args.source or dest
    if args.source is None:
        for name in FILES:
            target = dest / name
            if not target.exists():
                print(f"downloading {MIRROR}{name}")
                urllib.request.urlretrieve(MIRROR + name, target)

    features = read_rows(raw / "DataTrn.txt")
    labels = read_rows(raw / "DataTrnLbls.txt")
    if len(features) != len(labels):
        raise SystemExit(f"{len(features)} feature rows but {len(labels)} label rows")
    d = len(features[0])
    names = [f"f{i + 1}" for i in range(d)]
    with open(dest / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["class"])
        for x, y in zip(features, labels):
            w.writerow([repr(v) for v in x] + [str(y.index(max(y)))])
    (dest / "schema.txt").write_text("".join(f"{n}:gaussian\n" for n in names) + "class:label\n")
    print(f"wrote {len(features)} points to {dest}")


if __name__ == "__main__":
    main()
