#!/usr/bin/env python3
"""Download Binary Alphadigits (36 classes x 39 images of 20x16 pixels),
downsample each image to 10x8 and write `<out>/alphadigits/data.csv` (80
bernoulli columns plus a class label) and `<out>/alphadigits/schema.txt`.

Each 10x8 pixel is 1 when at least half of its 2x2 source block is set.

    python3 scripts/fetch_alphadigits.py --out "$MLGPLVM_DATA_DIR"
    python3 scripts/fetch_alphadigits.py --out data --mat /path/binaryalphadigs.mat

Needs numpy and scipy.
"""
import argparse
import csv
import pathlib
import urllib.request

import numpy as np
import scipy.io

URL = "https://cs.nyu.edu/~roweis/data/binaryalphadigs.mat"


def downsample(img):
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    blocks = img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(int)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True, type=pathlib.Path)
    ap.add_argument("--mat", type=pathlib.Path, help="local copy of binaryalphadigs.mat")
    args = ap.parse_args()

    dest = args.out / "alphadigits"
    dest.mkdir(parents=True, exist_ok=True)
    mat = args.mat or dest / "binaryalphadigs.mat"
    if not mat.exists():
        print(f"downloading {URL}")
        urllib.request.urlretrieve(URL, mat)

    m = scipy.io.loadmat(mat)
    dat = m["dat"]
    labels = [str(np.ravel(c)[0]) for c in np.ravel(m["classlabels"][0])]
    names = [f"p{i + 1}" for i in range(80)]
    rows = 0
    with open(dest / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["class"])
        for k in range(dat.shape[0]):
            for j in range(dat.shape[1]):
                small = downsample(dat[k, j])
                w.writerow([str(v) for v in small.ravel()] + [labels[k]])
                rows += 1
    (dest / "schema.txt").write_text("".join(f"{n}:bernoulli\n" for n in names) + "class:label\n")
    print(f"wrote {rows} images to {dest}")


if __name__ == "__main__":
    main()
