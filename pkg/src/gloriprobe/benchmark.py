"""The synthetic planted-signal benchmark protocol.

One place for the head sizes and training settings used when comparing the
linear probe with GLoRI and its ablations, so the acceptance suite and the
demo scripts measure the same thing. Heads are smaller than the library
defaults (768 wide, 8 heads) to keep a five-seed sweep on one CPU core within
a few minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import SyntheticData, SyntheticSpec, gen_synthetic
from .head import ABLATION_VARIANTS, GLoRIConfig, LinearProbeConfig, glori_forward
from .stats import macro_average, per_finding
from .train import TrainConfig, train

BENCH_HEAD = dict(d_glori=32, heads=2, temp_hidden=32)
BENCH_TRAIN = dict(lr=5e-3, epochs=10, batch_size=64)
VARIANTS = ("linear", "pooler", "global", "temperature", "full")


def head_config(variant: str, n_findings: int, d_model: int, seed: int):
    if variant == "linear":
        return LinearProbeConfig(n_findings, d_model, seed=seed)
    return GLoRIConfig(n_findings, d_model, seed=seed, **BENCH_HEAD, **ABLATION_VARIANTS[variant])


@dataclass
class VariantRun:
    variant: str
    seed: int
    head: object
    test_scores: np.ndarray
    per_finding_auroc: np.ndarray
    seconds: float

    @property
    def macro_auroc(self) -> float:
        return macro_average(self.per_finding_auroc)


def run_variant(synth: SyntheticData, variant: str, seed: int, **train_overrides) -> VariantRun:
    """Train one head on the train split and score the test split."""
    tr, te = synth.splits["train"], synth.splits["test"]
    cfg = head_config(variant, len(synth.findings), tr.data.d_model, seed)
    t0 = time.perf_counter()
    result = train(cfg, (tr.data, tr.labels), None, TrainConfig(seed=seed, **{**BENCH_TRAIN, **train_overrides}))
    scores = result.head.predict(te.data)
    return VariantRun(
        variant, seed, result.head, scores, per_finding("auroc", scores, te.labels), time.perf_counter() - t0
    )


def default_benchmark(seed: int) -> SyntheticData:
    return gen_synthetic(SyntheticSpec(seed=seed))


def focal_localization(head, synth: SyntheticData, split: str = "test") -> dict[str, np.ndarray]:
    """Fine-branch attention mass inside the planted region, per focal finding.

    Only true positives count: planted images whose logit for that finding is
    above zero. Returns ``{finding: masses}``.
    """
    s = synth.splits[split]
    logits, fine, _ = glori_forward(s.data.cls, s.data.patches, head.params, head.config)
    out = {}
    for m, f in enumerate(synth.spec.findings):
        if f.kind != "focal":
            continue
        masses = []
        for i in np.flatnonzero((s.labels[:, m] == 1) & (logits.data[:, m] > 0)):
            r0, c0, h, w = s.regions[(int(s.data.ids[i]), m)]
            masses.append(fine[i, m, r0 : r0 + h, c0 : c0 + w].sum())
        out[f.name] = np.array(masses)
    return out
