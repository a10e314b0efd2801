"""Evaluation statistics: ranking metrics, resampling tests, survival curves.

AUROC uses the Mann-Whitney convention (ties count one half). AUPRC is
average precision with tied scores grouped into a single threshold step.
Resampling routines draw from ``numpy.random.default_rng(seed)`` so every
result is reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class DegenerateLabels(ValueError):
    """A metric is undefined because one class is missing."""


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------


def _auroc_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise AUROC of (R, n) arrays; NaN where a row has a single class."""
    labels = labels.astype(bool)
    n_pos = labels.sum(axis=1)
    n_neg = labels.shape[1] - n_pos
    ranks = rankdata(scores, axis=1)  # average ranks give half credit to ties
    u = np.where(labels, ranks, 0.0).sum(axis=1) - n_pos * (n_pos + 1) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = u / (n_pos * n_neg)
    return np.where((n_pos > 0) & (n_neg > 0), out, np.nan)


def auroc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabels("AUROC needs at least one positive and one negative")
    return float(_auroc_rows(scores[None], labels[None])[0])


def _ap_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise average precision of (R, n) arrays; NaN where a row has no positive.

    Each positive contributes the precision at the end of its tied-score run,
    i.e. tied scores form one threshold step.
    """
    R, n = scores.shape
    order = np.argsort(-scores, axis=1, kind="stable")
    s = np.take_along_axis(scores, order, axis=1)
    y = np.take_along_axis(labels.astype(np.float64), order, axis=1)
    tp = np.cumsum(y, axis=1)
    precision = tp / np.arange(1, n + 1)
    last = np.ones((R, n), dtype=bool)
    last[:, :-1] = s[:, 1:] != s[:, :-1]
    run_end = np.where(last, np.arange(n), n)
    run_end = np.minimum.accumulate(run_end[:, ::-1], axis=1)[:, ::-1]
    n_pos = tp[:, -1]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (y * np.take_along_axis(precision, run_end, axis=1)).sum(axis=1) / n_pos
    return np.where(n_pos > 0, out, np.nan)


def auprc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.sum() == 0:
        raise DegenerateLabels("AUPRC needs at least one positive")
    return float(_ap_rows(scores[None], labels[None])[0])


METRICS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc}
_ROW_METRICS = {"auroc": _auroc_rows, "auprc": _ap_rows}


def macro_average(per_finding, included=None) -> float:
    """Mean over included, defined (non-NaN) findings."""
    v = np.asarray(per_finding, dtype=np.float64)
    mask = ~np.isnan(v)
    if included is not None:
        mask &= np.asarray(included, dtype=bool)
    if not mask.any():
        raise DegenerateLabels("no defined finding to average")
    return float(v[mask].mean())


def per_finding(metric: str, scores, labels) -> np.ndarray:
    """Metric for each column of (n, M) scores/labels; NaN for undefined columns."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return _ROW_METRICS[metric](scores.T, labels.T)


def macro_metric(metric: str) -> Callable[[np.ndarray, np.ndarray], float]:
    """Matrix-level macro metric that skips degenerate findings."""

    def fn(scores, labels):
        return macro_average(per_finding(metric, scores, labels))

    fn.__name__ = f"macro_{metric}"
    return fn


# ---------------------------------------------------------------------------
# bootstrap and permutation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    mean: float
    lo95: float
    hi95: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "lo95": self.lo95, "hi95": self.hi95}


def _interval(samples: np.ndarray) -> Interval:
    samples = samples[~np.isnan(samples)]
    if not len(samples):
        raise DegenerateLabels("metric undefined in every resample")
    lo, hi = np.percentile(samples, [2.5, 97.5])
    return Interval(float(samples.mean()), float(lo), float(hi))


def bootstrap_ci(metric_fn, scores, labels, n_boot: int = 1000, seed: int = 0) -> Interval:
    """Percentile interval of ``metric_fn(scores, labels)`` over image resamples.

    Rows are resampled with replacement. ``metric_fn`` may raise
    :class:`DegenerateLabels` (or return NaN) for a resample; such resamples
    are dropped.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    n = len(scores)
    out = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        try:
            out[b] = metric_fn(scores[idx], labels[idx])
        except DegenerateLabels:
            out[b] = np.nan
    return _interval(out)


def bootstrap_samples(scores, labels, metric: str, n_boot: int = 1000, seed: int = 0):
    """Per-finding metric samples (n_boot, M) and macro samples (n_boot,).

    Vectorised over resamples; a finding degenerate in a resample is NaN there
    and is left out of that resample's macro.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    rng = np.random.default_rng(seed)
    n, M = scores.shape
    idx = rng.integers(0, n, size=(n_boot, n))
    rows = _ROW_METRICS[metric]
    per = np.stack([rows(scores[idx, m], labels[idx, m]) for m in range(M)], axis=1)
    return per, _nanmean_rows(per)


def _nanmean_rows(a: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(a)
    count = ok.sum(axis=1)
    total = np.where(ok, a, 0.0).sum(axis=1)
    return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def permutation_test(
    scores_a, scores_b, labels, metric_fn, n_perm: int = 1000, seed: int = 0, ids_a=None, ids_b=None
) -> float:
    """Two-sided paired permutation test of ``metric(A) - metric(B)``.

    Each permutation swaps the two models' score rows for every image
    independently with probability 1/2. Returns
    ``(1 + #{|delta*| >= |delta|}) / (1 + n_perm)``. When image ids are given
    for both score matrices they must match row for row.
    """
    if (ids_a is None) != (ids_b is None) or (
        ids_a is not None and not np.array_equal(np.asarray(ids_a), np.asarray(ids_b))
    ):
        raise ValueError("permutation_test: image ids of A and B are misaligned")
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if a.shape != b.shape or len(a) != len(labels):
        raise ValueError("permutation_test: score matrices are not aligned")
    rng = np.random.default_rng(seed)
    observed = abs(metric_fn(a, labels) - metric_fn(b, labels))
    tol = 1e-12 * max(1.0, observed)
    hits = 0
    for _ in range(n_perm):
        swap = rng.random(len(a)) < 0.5
        if a.ndim > 1:
            swap = swap[:, None]
        pa = np.where(swap, b, a)
        pb = np.where(swap, a, b)
        if abs(metric_fn(pa, labels) - metric_fn(pb, labels)) >= observed - tol:
            hits += 1
    return (1 + hits) / (1 + n_perm)


def permutation_pvalues(scores_a, scores_b, labels, metric: str, n_perm: int = 1000, seed: int = 0):
    """Per-finding and macro permutation p-values from one shared swap stream.

    Returns ``(per_finding (M,), macro)``; NaN for findings undefined on the
    observed data.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if a.shape != b.shape or a.shape[0] != labels.shape[0]:
        raise ValueError("permutation_pvalues: score matrices are not aligned")
    n, M = a.shape
    rows = _ROW_METRICS[metric]
    rng = np.random.default_rng(seed)
    swap = rng.random((n_perm, n)) < 0.5
    obs = rows(a.T, labels.T) - rows(b.T, labels.T)
    defined = ~np.isnan(obs)
    if not defined.any():
        raise DegenerateLabels("no finding is defined on the observed data")
    obs_macro = obs[defined].mean()
    deltas = np.empty((n_perm, M))
    for m in range(M):
        if not defined[m]:
            deltas[:, m] = np.nan
            continue
        pa = np.where(swap, b[:, m], a[:, m])
        pb = np.where(swap, a[:, m], b[:, m])
        y = np.broadcast_to(labels[:, m], pa.shape)
        deltas[:, m] = rows(pa, y) - rows(pb, y)
    per = np.full(M, np.nan)
    for m in np.flatnonzero(defined):
        o = abs(obs[m])
        per[m] = (1 + np.sum(np.abs(deltas[:, m]) >= o - 1e-12 * max(1.0, o))) / (1 + n_perm)
    o = abs(obs_macro)
    macro_d = np.abs(deltas[:, defined].mean(axis=1))
    macro = (1 + np.sum(macro_d >= o - 1e-12 * max(1.0, o))) / (1 + n_perm)
    return per, float(macro)


# ---------------------------------------------------------------------------
# prevalence tiers
# ---------------------------------------------------------------------------

TIERS = ("high", "medium", "low")


def stratify_prevalence(labels, low_hi: float = 0.01, med_hi: float = 0.10) -> list[str]:
    """Tier per finding: low < ``low_hi`` <= medium < ``med_hi`` <= high."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] < 1:
        raise ValueError("stratify_prevalence: no images")
    prev = labels.mean(axis=0)
    return ["low" if p < low_hi else "medium" if p < med_hi else "high" for p in prev]


# ---------------------------------------------------------------------------
# survival
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: int
    time: float
    event: int
    risk_score: float = 0.0


@dataclass
class KMCurve:
    """Right-continuous step function; ``times[0] == 0`` and ``survival[0] == 1``."""

    times: np.ndarray
    survival: np.ndarray

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right") - 1
        return self.survival[np.maximum(idx, 0)]


def _times_events(records):
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.int64)
    return t, e


def kaplan_meier(records) -> KMCurve:
    records = list(records)
    if not records:
        raise ValueError("kaplan_meier: no records")
    t, e = _times_events(records)
    if np.any(t < 0):
        raise ValueError("kaplan_meier: negative time")
    uniq = np.unique(t[e == 1])
    s = 1.0
    times, surv = [0.0], [1.0]
    for u in uniq:
        at_risk = np.sum(t >= u)
        d = np.sum((t == u) & (e == 1))
        s *= (at_risk - d) / at_risk  # exact for the 2/3, 1/3 hand case
        if u == 0.0:
            surv[0] = s
        else:
            times.append(float(u))
            surv.append(s)
    return KMCurve(np.array(times), np.array(surv))


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    observed_a: float
    expected_a: float


def chi2_sf_1dof(x: float) -> float:
    """Upper tail of the chi-square(1) distribution: ``erfc(sqrt(x / 2))``."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def log_rank(group_a, group_b) -> LogRankResult:
    a, b = list(group_a), list(group_b)
    if not a or not b:
        raise ValueError("log_rank: both groups need subjects")
    ta, ea = _times_events(a)
    tb, eb = _times_events(b)
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    if not len(event_times):
        raise DegenerateLabels("log_rank: no events in either group")
    obs = exp_ = var = 0.0
    for u in event_times:
        na, nb = np.sum(ta >= u), np.sum(tb >= u)
        da = np.sum((ta == u) & (ea == 1))
        d = da + np.sum((tb == u) & (eb == 1))
        n = na + nb
        obs += da
        exp_ += d * na / n
        if n > 1:
            var += na * nb * d * (n - d) / (n * n * (n - 1))
    if var <= 0:
        raise DegenerateLabels("log_rank: zero variance")
    chi2 = (obs - exp_) ** 2 / var
    return LogRankResult(float(chi2), chi2_sf_1dof(chi2), float(obs), float(exp_))


def risk_groups(records, quantile: float = 0.5):
    """Split at the ``quantile`` order statistic of the risk scores; ties go low."""
    records = list(records)
    if not records:
        raise ValueError("risk_groups: no records")
    if not 0 < quantile < 1:
        raise ValueError("risk_groups: quantile must lie in (0, 1)")
    scores = np.sort([r.risk_score for r in records])
    k = max(1, math.ceil(quantile * len(scores) - 1e-9))
    cut = scores[k - 1]
    low = [r for r in records if r.risk_score <= cut]
    high = [r for r in records if r.risk_score > cut]
    return low, high


def km_table(low: KMCurve, high: KMCurve) -> list[tuple[float, float, float]]:
    """Both curves evaluated on the union of their step times."""
    t = np.union1d(low.times, high.times)
    return list(zip(t.tolist(), low(t).tolist(), high(t).tolist()))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    findings: list[str]
    n_images: int
    per_finding: dict[str, dict]
    macro: dict[str, dict]
    tiers: dict[str, dict]
    undefined: dict[str, list[str]] = field(default_factory=dict)
    comparison: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "findings": self.findings,
            "n_images": self.n_images,
            "per_finding": self.per_finding,
            "macro": self.macro,
            "tiers": self.tiers,
            "undefined": self.undefined,
        }
        if self.comparison is not None:
            d["comparison"] = self.comparison
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["finding", "tier", "prevalence"]
        for m in ("auprc", "auroc"):
            cols += [f"{m}_mean", f"{m}_lo95", f"{m}_hi95", f"{m}_pvalue"]
        w.writerow(cols)
        for f in self.findings:
            row = self.per_finding[f]
            out = [f, row["tier"], _fmt(row["prevalence"])]
            for m in ("auprc", "auroc"):
                ci = row.get(m)
                out += [_fmt(ci[k]) if ci else "" for k in ("mean", "lo95", "hi95")]
                out.append(_fmt(row.get(f"{m}_pvalue")))
            w.writerow(out)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def evaluate(
    scores,
    labels,
    findings,
    n_boot: int = 1000,
    seed: int = 0,
    compare_scores=None,
    n_perm: int = 1000,
    tier_labels=None,
) -> MetricsReport:
    """Per-finding, macro and per-tier AUPRC/AUROC with bootstrap intervals.

    With ``compare_scores`` each metric also gets permutation p-values for
    the difference between the two models. Tiers come from the prevalence of
    ``tier_labels`` (default: ``labels``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, M = scores.shape
    if labels.shape != (n, M) or len(findings) != M:
        raise ValueError("evaluate: scores, labels and findings disagree in shape")
    tiers = stratify_prevalence(labels if tier_labels is None else tier_labels)
    prevalence = labels.mean(axis=0)
    per = {f: {"tier": tiers[m], "prevalence": float(prevalence[m])} for m, f in enumerate(findings)}
    macro, tier_out, undefined = {}, {t: {"findings": []} for t in TIERS}, {}
    for m, f in enumerate(findings):
        tier_out[tiers[m]]["findings"].append(f)
    for k, metric in enumerate(("auprc", "auroc")):
        point = per_finding(metric, scores, labels)
        undefined[metric] = [f for m, f in enumerate(findings) if np.isnan(point[m])]
        samples, macro_samples = bootstrap_samples(scores, labels, metric, n_boot, seed + k)
        for m, f in enumerate(findings):
            per[f][metric] = None if np.isnan(point[m]) else _interval(samples[:, m]).as_dict()
        macro[metric] = _interval(macro_samples).as_dict()
        for t in TIERS:
            cols = [m for m in range(M) if tiers[m] == t and not np.isnan(point[m])]
            if not cols:
                tier_out[t][metric] = None
                continue
            tier_out[t][metric] = _interval(_nanmean_rows(samples[:, cols])).as_dict()
        if compare_scores is not None:
            pv, pm = permutation_pvalues(scores, compare_scores, labels, metric, n_perm, seed + 10 + k)
            for m, f in enumerate(findings):
                per[f][f"{metric}_pvalue"] = None if np.isnan(pv[m]) else float(pv[m])
            macro[metric]["pvalue"] = pm
    comparison = None
    if compare_scores is not None:
        comparison = {"n_permutations": n_perm}
        for metric in ("auprc", "auroc"):
            a = macro_average(per_finding(metric, scores, labels))
            b = macro_average(per_finding(metric, compare_scores, labels))
            comparison[f"macro_{metric}_difference"] = a - b
    return MetricsReport(list(findings), n, per, macro, tier_out, undefined, comparison)
