"""Add the GLoRI components one at a time.

pooler      disease queries attend over patch tokens
global      + the CLS token summed into each query output
temperature + per-image adaptive attention temperature
full        + pyramid (coarse) branch

Run with a seed count as the only argument (default 1); each seed is about
two and a half minutes.
"""

import sys

import numpy as np

from gloriprobe.benchmark import default_benchmark, run_variant

ORDER = ("linear", "pooler", "global", "temperature", "full")
n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 1

table = {v: [] for v in ORDER}
for seed in range(n_seeds):
    synth = default_benchmark(seed)
    for v in ORDER:
        run = run_variant(synth, v, seed)
        table[v].append(run.macro_auroc)
        print(f"seed {seed} {v:>11}: {run.macro_auroc:.3f}  per finding {np.round(run.per_finding_auroc, 3)}")

print("\nmedian macro AUROC")
for v in ORDER:
    print(f"  {v:>11}: {np.median(table[v]):.3f}")
