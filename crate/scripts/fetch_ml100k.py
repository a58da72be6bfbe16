#!/usr/bin/env python3
"""Rebuild the MovieLens-100k raw files (u.data, u.user, u.occupation).

The copy is taken from the parquet files bundled in the `pytorch-widedeep`
wheel, which carry the original rows in their original order.

    python3 scripts/fetch_ml100k.py data/ml-100k
"""
import glob
import io
import os
import subprocess
import sys
import tempfile
import zipfile

import pandas as pd


def main(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp,
             "pytorch-widedeep==1.7.0"])
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "*.whl"))[0])
        base = "pytorch_widedeep/datasets/data/MovieLens100k_"
        data = pd.read_parquet(io.BytesIO(wheel.read(base + "data.parquet.brotli")))
        users = pd.read_parquet(io.BytesIO(wheel.read(base + "users.parquet.brotli")))

    with open(os.path.join(out_dir, "u.data"), "w") as f:
        for r in data.itertuples(index=False):
            f.write(f"{r.user_id}\t{r.movie_id}\t{r.rating}\t{r.timestamp}\n")
    with open(os.path.join(out_dir, "u.user"), "w") as f:
        for r in users.sort_values("user_id").itertuples(index=False):
            f.write(f"{r.user_id}|{r.age}|{r.gender}|{r.occupation}|{r.zip_code}\n")
    with open(os.path.join(out_dir, "u.occupation"), "w") as f:
        for label in sorted(users["occupation"].unique()):
            f.write(label + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/ml-100k")
