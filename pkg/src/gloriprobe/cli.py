"""Command-line front end: gen-synth, train, eval, attn-maps, km.

Every artifact-producing command writes a JSON run manifest next to its
outputs. Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import __version__
from . import data as D
from . import stats as S
from . import tensor as T
from .head import ABLATION_VARIANTS, GLoRIConfig, LinearProbeConfig
from .train import TrainConfig, lr_grid_search, retrain_on_train_plus_val, train

logger = logging.getLogger("gloriprobe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which we reserve for data errors
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    wall_clock_s: float = 0.0

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths}


def _data_inputs(ds: D.Dataset) -> list[Path]:
    m = ds.manifest
    files = [ds.root / D.DATA_MANIFEST, ds.root / m.get("labels", "labels.csv")]
    files += [ds.root / m["splits"][s] for s in sorted(ds.splits)]
    return files


def _check_compatible(head, meta: dict, ds: D.Dataset, name: str) -> None:
    cfg = head.config
    if cfg.n_findings != len(ds.findings):
        raise ValueError(f"{name}: head predicts {cfg.n_findings} findings, data has {len(ds.findings)}")
    if meta.get("findings") not in (None, ds.findings):
        raise ValueError(f"{name}: checkpoint findings {meta['findings']} differ from the data's")
    d_model = next(iter(ds.splits.values())).data.d_model
    if cfg.d_model != d_model:
        raise ValueError(f"{name}: head expects d_model={cfg.d_model}, store has {d_model}")


def _finding_index(ds: D.Dataset, finding: str) -> int:
    if finding in ds.findings:
        return ds.findings.index(finding)
    raise ValueError(f"unknown finding {finding!r}; known: {', '.join(ds.findings)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_spec(arg: str | None) -> dict:
    if arg is None:
        return {}
    text = Path(arg).read_text(encoding="utf-8") if Path(arg).is_file() else arg
    try:
        spec = json.loads(text)
    except ValueError as err:
        raise UsageError(f"--spec is neither a JSON file nor JSON text ({err})") from None
    if not isinstance(spec, dict):
        raise UsageError("--spec must hold a JSON object")
    return spec


def cmd_gen_synth(args) -> list[Path]:
    raw = _load_spec(args.spec)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = D.SyntheticSpec.from_dict(raw)
        spec.validate()
    except (TypeError, KeyError, ValueError) as err:
        raise UsageError(f"infeasible generator spec: {err}") from None
    out = Path(args.out)
    written = D.write_dataset(out, D.gen_synthetic(spec))
    inputs = [Path(args.spec)] if args.spec and Path(args.spec).is_file() else []
    _finish(args, out / "gen-synth.manifest.json", spec.to_dict(), spec.seed, inputs, written)
    return written


def _head_config(args, ds: D.Dataset):
    M = len(ds.findings)
    d_model = ds.splits["train"].data.d_model
    if args.head == "linear":
        return LinearProbeConfig(M, d_model, seed=args.seed)
    return GLoRIConfig(
        M,
        d_model,
        d_glori=args.d_glori,
        heads=args.heads,
        temp_hidden=args.temp_hidden,
        seed=args.seed,
        **ABLATION_VARIANTS[args.variant],
    )


def cmd_train(args) -> list[Path]:
    ds = D.load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log")
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        logger.info(line)

    hcfg = _head_config(args, ds)
    tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    tr = (ds.splits["train"].data, ds.splits["train"].labels)
    va = (ds.splits["val"].data, ds.splits["val"].labels)
    meta = {"findings": ds.findings, "train": tcfg.to_dict()}
    if args.lr_search:
        best, scores = lr_grid_search(hcfg, tr, va, tcfg, log=log, jobs=args.jobs)
        meta["lr_search"] = {"selected_lr": best, "val_metric": {repr(k): v for k, v in sorted(scores.items())}}
        log("retrain on train+val")
        result = retrain_on_train_plus_val(hcfg, tr, va, best, tcfg, log=log)
        meta["train"]["lr"] = best
    else:
        result = train(hcfg, tr, va, tcfg, log=log)
    D.write_checkpoint(out, result.head, meta)
    log_path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    config = {"head": hcfg.to_dict(), "train": tcfg.to_dict(), "lr_search": bool(args.lr_search)}
    written = [out, log_path]
    _finish(args, out.with_name(out.name + ".manifest.json"), config, args.seed, _data_inputs(ds), written)
    return written


def cmd_eval(args) -> list[Path]:
    ds = D.load_dataset(args.data, splits=(args.split,))
    split = ds.splits[args.split]
    head, meta = D.read_checkpoint(args.ckpt)
    _check_compatible(head, meta, ds, args.ckpt)
    scores = head.predict(split.data)
    other = None
    inputs = [Path(args.ckpt)]
    if args.compare_ckpt:
        head_b, meta_b = D.read_checkpoint(args.compare_ckpt)
        _check_compatible(head_b, meta_b, ds, args.compare_ckpt)
        other = head_b.predict(split.data)
        inputs.append(Path(args.compare_ckpt))
    report = S.evaluate(
        scores, split.labels, ds.findings, n_boot=args.bootstrap, seed=args.seed,
        compare_scores=other, n_perm=args.permutations,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8", newline="\n")
    config = {"split": args.split, "bootstrap": args.bootstrap, "permutations": args.permutations}
    written = [out / "report.json", out / "report.csv"]
    _finish(args, out / "eval.manifest.json", config, args.seed, inputs + _data_inputs(ds), written)
    return written


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalised; a constant map renders black."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    H, W = pix.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise D.FormatError(f"{path}: not an 8-bit binary PGM")
    W, H = (int(x) for x in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W)


def cmd_attn_maps(args) -> list[Path]:
    ds = D.load_dataset(args.data, splits=(args.split,))
    head, meta = D.read_checkpoint(args.ckpt)
    _check_compatible(head, meta, ds, args.ckpt)
    if head.config.kind != "glori":
        raise ValueError("attention maps need a GLoRI checkpoint, not a linear probe")
    m = _finding_index(ds, args.finding)
    data = ds.splits[args.split].data
    try:
        rec = data[data.index_of(args.image_id)]
    except KeyError:
        raise ValueError(f"image id {args.image_id} is not in the {args.split} split") from None
    amap = head.attention_map(rec, m, args.branch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"attn_{args.image_id}_{args.finding}_{args.branch}"
    pgm, table = out / f"{stem}.pgm", out / f"{stem}.csv"
    write_pgm(pgm, amap)
    with open(table, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in amap:
            w.writerow([repr(float(v)) for v in row])
    config = {"split": args.split, "image_id": args.image_id, "finding": args.finding, "branch": args.branch}
    _finish(args, out / f"{stem}.manifest.json", config, 0, [Path(args.ckpt)] + _data_inputs(ds), [pgm, table])
    return [pgm, table]


def cmd_km(args) -> list[Path]:
    ds = D.load_dataset(args.data, splits=(args.split,))
    head, meta = D.read_checkpoint(args.ckpt)
    _check_compatible(head, meta, ds, args.ckpt)
    surv_path = Path(args.survival) if args.survival else ds.survival_path
    if surv_path is None:
        raise ValueError("no survival table given and the data manifest names none")
    data = ds.splits[args.split].data
    table = D.read_survival(surv_path).align(data.ids)
    prob = expit(head.predict(data))
    risk = prob[:, _finding_index(ds, args.finding)] if args.finding else prob.mean(axis=1)
    records = [
        S.SurvivalRecord(int(i), float(t), int(e), float(r))
        for i, t, e, r in zip(data.ids, table.time, table.event, risk)
    ]
    low, high = S.risk_groups(records, args.quantile)
    if not low or not high:
        raise ValueError("risk split left one group empty (all risk scores tied?)")
    km_low, km_high = S.kaplan_meier(low), S.kaplan_meier(high)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = out / "km.csv"
    with open(curves, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival_low", "survival_high"])
        for t, a, b in S.km_table(km_low, km_high):
            w.writerow([repr(t), repr(a), repr(b)])
    written = [curves]
    inputs = [Path(args.ckpt), surv_path] + _data_inputs(ds)
    config = {"split": args.split, "quantile": args.quantile, "finding": args.finding}
    try:
        lr = S.log_rank(low, high)
    finally:
        # the curves are still useful when the test is undefined
        _finish(args, out / "km.manifest.json", config, 0, inputs, written)
    result = out / "logrank.json"
    body = {
        "chi_square": lr.chi_square,
        "p_value": lr.p_value,
        "n_low": len(low),
        "n_high": len(high),
        "events_low": int(sum(r.event for r in low)),
        "events_high": int(sum(r.event for r in high)),
        "observed_low": lr.observed_a,
        "expected_low": lr.expected_a,
    }
    result.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(result)
    _finish(args, out / "km.manifest.json", config, 0, inputs, written)
    return written


def _finish(args, path, config, seed, inputs, outputs) -> None:
    RunManifest(
        command=args.command,
        config=config,
        seed=int(seed),
        inputs=_digests(inputs),
        outputs=[str(p) for p in outputs],
        wall_clock_s=round(time.monotonic() - args._t0, 3),
    ).write(path)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _quantile(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gloriprobe", description="Probe heads on frozen image embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic planted-signal dataset")
    g.add_argument("--spec", help="generator spec as a JSON file or inline JSON (fields default)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a linear probe or GLoRI head")
    t.add_argument("--head", choices=("linear", "glori"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=_positive_int, default=10)
    lr = t.add_mutually_exclusive_group()
    lr.add_argument("--lr", type=float, default=1e-3)
    lr.add_argument("--lr-search", action="store_true", help="grid search, then retrain on train+val")
    t.add_argument("--batch-size", type=_positive_int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--d-glori", type=_positive_int, default=768)
    t.add_argument("--heads", type=_positive_int, default=8)
    t.add_argument("--temp-hidden", type=_positive_int, default=256)
    t.add_argument("--variant", choices=sorted(ABLATION_VARIANTS), default="full")
    t.add_argument("--jobs", type=_positive_int, default=1, help="parallel grid points")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report with bootstrap CIs and permutation p-values")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--compare-ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=D.SPLITS, default="test")
    e.add_argument("--bootstrap", type=_positive_int, default=1000)
    e.add_argument("--permutations", type=_positive_int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn-maps", help="export one attention map as PGM + CSV")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", choices=D.SPLITS, default="test")
    a.add_argument("--image-id", type=int, required=True)
    a.add_argument("--finding", required=True)
    a.add_argument("--branch", choices=("fine", "coarse"), default="fine")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_attn_maps)

    k = sub.add_parser("km", help="Kaplan-Meier curves and log-rank test for risk groups")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--survival", help="survival CSV (default: the one named in data.json)")
    k.add_argument("--split", choices=D.SPLITS, default="test")
    k.add_argument("--finding", help="risk = this finding's probability (default: mean over findings)")
    k.add_argument("--quantile", type=_quantile, default=0.5)
    k.add_argument("--out", required=True, help="output directory")
    k.set_defaults(func=cmd_km)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    args._t0 = time.monotonic()
    try:
        # overflow is reported by the per-op finite checks, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
