"""Risk groups from a trained head and their Kaplan-Meier curves.

The synthetic generator links each image's hazard to its planted findings,
so risk is taken from the probability of global_a, the most common such
finding. A head that detects it should split the test set into groups with
different survival. Uses the CLI end to end on a reduced dataset.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

spec = {"n_train": 600, "n_val": 200, "n_test": 1000, "grid": [8, 8], "d_layer": 8, "n_layers": 2}


def gloriprobe(*args):
    subprocess.run([sys.executable, "-m", "gloriprobe", *map(str, args)], check=True)


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    gloriprobe("gen-synth", "--spec", json.dumps(spec), "--out", root / "data", "--seed", 1)
    gloriprobe("train", "--head", "linear", "--data", root / "data", "--out", root / "lin.glrm",
               "--lr", 5e-3, "--epochs", 10, "--batch-size", 64)
    gloriprobe("km", "--ckpt", root / "lin.glrm", "--data", root / "data", "--finding", "global_a",
               "--out", root / "km")
    print((root / "km" / "logrank.json").read_text())
    rows = (root / "km" / "km.csv").read_text().splitlines()
    print("\n".join(rows[:5] + ["..."] + rows[-3:]))
