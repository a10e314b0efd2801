"""File formats and the planted-signal synthetic benchmark.

Formats
-------
``.glre`` embedding store (all integers little-endian)::

    magic  b"GLRE"
    u32    version (1)
    u64    n_images
    u8     n_layers
    u16    H_p, u16 W_p
    u32    D_layer
    then per image: u64 image_id, f32[n_layers, 1 + H_p*W_p, D_layer]
    (row 0 of each layer block is [CLS], the rest are patches row-major)

``.glrm`` checkpoint::

    magic  b"GLRM"
    u32    version (1)
    u32    byte length of the config JSON, then the JSON (sorted keys, UTF-8)
    u32    tensor count
    per tensor: u16 name length, name, u8 rank, u32 extents, f64 payload

Label and survival tables are UTF-8 CSV with LF line endings.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet
from .head import GLoRIHead, LinearProbe, config_from_dict
from .tensor import Tensor

STORE_MAGIC = b"GLRE"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIQBHHI")

CKPT_MAGIC = b"GLRM"
CKPT_VERSION = 1

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A file on disk does not match its declared layout."""


# ---------------------------------------------------------------------------
# embedding store
# ---------------------------------------------------------------------------


def _record_dtype(n_layers: int, n_tokens: int, d: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("emb", "<f4", (n_layers, n_tokens, d))])


def write_store(path, data: EmbeddingSet) -> None:
    n = len(data)
    L, D = data.n_layers, data.d_layer
    H, W = data.grid
    if L > 255 or H > 65535 or W > 65535:
        raise FormatError("store header cannot represent these extents")
    rec = np.empty(n, dtype=_record_dtype(L, 1 + H * W, D))
    rec["id"] = data.ids
    rec["emb"][:, :, 0, :] = data.cls
    rec["emb"][:, :, 1:, :] = data.patches.reshape(n, L, H * W, D)
    with open(path, "wb") as f:
        f.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, n, L, H, W, D))
        f.write(rec.tobytes())


def read_store(path) -> EmbeddingSet:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_STORE_HEADER.size)
        if len(head) < _STORE_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, n, L, H, W, D = _STORE_HEADER.unpack(head)
        if magic != STORE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise FormatError(f"{path}: unsupported store version {version}")
        if min(L, H, W, D) == 0:
            raise FormatError(f"{path}: zero extent in header")
        dt = _record_dtype(L, 1 + H * W, D)
        expected = _STORE_HEADER.size + n * dt.itemsize
        # compare before allocating anything sized by the header
        if size < expected:
            raise FormatError(f"{path}: truncated payload ({size} of {expected} bytes)")
        if size > expected:
            raise FormatError(f"{path}: {size - expected} trailing bytes after payload")
        rec = np.frombuffer(f.read(n * dt.itemsize), dtype=dt)
    emb = rec["emb"].astype(np.float64)
    return EmbeddingSet(
        rec["id"].copy(), emb[:, :, 0, :], emb[:, :, 1:, :].reshape(n, L, H, W, D)
    )


# ---------------------------------------------------------------------------
# label and survival tables
# ---------------------------------------------------------------------------


def write_labels(path, ids, labels, findings) -> None:
    labels = np.asarray(labels)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", *findings])
        for i, row in zip(ids, labels):
            w.writerow([int(i), *(int(v) for v in row)])


def read_labels(path, findings, known_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, labels)`` with labels an int8 matrix in ``findings`` order."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty label table")
    expected = ["image_id", *findings]
    if rows[0] != expected:
        raise FormatError(f"{path}: column mismatch, expected {expected}, got {rows[0]}")
    known = None if known_ids is None else {int(i) for i in known_ids}
    ids, out = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise FormatError(f"{path}:{lineno}: expected {len(expected)} cells, got {len(row)}")
        try:
            image_id = int(row[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad image_id {row[0]!r}") from None
        if known is not None and image_id not in known:
            raise FormatError(f"{path}:{lineno}: unknown image_id {image_id}")
        if any(c not in ("0", "1") for c in row[1:]):
            raise FormatError(f"{path}:{lineno}: label cells must be 0 or 1")
        ids.append(image_id)
        out.append([int(c) for c in row[1:]])
    ids = np.array(ids, dtype=np.uint64)
    if len(np.unique(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate image_id")
    return ids, np.array(out, dtype=np.int8).reshape(len(ids), len(findings))


@dataclass
class SurvivalTable:
    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def align(self, ids) -> "SurvivalTable":
        """Reorder to ``ids``; every id must be present."""
        pos = {int(i): k for k, i in enumerate(self.ids)}
        try:
            idx = np.array([pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as err:
            raise FormatError(f"survival table has no row for image {err.args[0]}") from None
        return SurvivalTable(self.ids[idx], self.time[idx], self.event[idx])


def write_survival(path, table: SurvivalTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "time_days", "event"])
        for i, t, e in zip(table.ids, table.time, table.event):
            w.writerow([int(i), repr(float(t)), int(e)])


def read_survival(path) -> SurvivalTable:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["image_id", "time_days", "event"]:
        raise FormatError(f"{path}: expected columns image_id,time_days,event")
    ids, times, events = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 cells")
        try:
            i, t = int(row[0]), float(row[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: unparsable row {row}") from None
        if not math.isfinite(t) or t < 0:
            raise FormatError(f"{path}:{lineno}: time must be a non-negative number")
        if row[2] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: event must be 0 or 1")
        ids.append(i)
        times.append(t)
        events.append(int(row[2]))
    ids = np.array(ids, dtype=np.uint64)
    if len(np.unique(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate image_id")
    return SurvivalTable(ids, np.array(times), np.array(events, dtype=np.int8))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, head, meta: dict | None = None) -> None:
    """Serialise a head; ``meta`` (findings, training config, ...) rides in the config JSON."""
    cfg = {"head": head.config.to_dict(), "meta": meta or {}}
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    blob = _json_bytes(cfg)
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(head.params))]
    for name, t in head.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_checkpoint(path):
    """Return ``(head, meta)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a GLRM checkpoint")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        cfg = json.loads(r.take(n).decode("utf-8"))
        config = config_from_dict(cfg["head"])
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"{path}: bad config block ({err})") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64)) * 8
        data = np.frombuffer(r.take(size), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after tensors")
    head = (GLoRIHead if config.kind == "glori" else LinearProbe)(config, params)
    return head, cfg.get("meta", {})


# ---------------------------------------------------------------------------
# synthetic planted-signal benchmark
# ---------------------------------------------------------------------------

SIGNAL_KINDS = ("focal", "diffuse", "global")


@dataclass
class FindingSpec:
    name: str
    kind: str
    prevalence: float
    amplitude: float


def default_findings() -> list[FindingSpec]:
    return [
        FindingSpec("focal_a", "focal", 0.20, 3.0),
        FindingSpec("focal_b", "focal", 0.10, 3.0),
        FindingSpec("focal_c", "focal", 0.04, 3.0),
        FindingSpec("diffuse_a", "diffuse", 0.25, 0.25),
        FindingSpec("diffuse_b", "diffuse", 0.05, 0.25),
        FindingSpec("global_a", "global", 0.30, 1.0),
        FindingSpec("global_b", "global", 0.03, 1.0),
        FindingSpec("global_c", "global", 0.008, 2.0),
    ]


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    grid: tuple[int, int] = (16, 16)
    d_layer: int = 16
    n_layers: int = 4
    findings: list[FindingSpec] = field(default_factory=default_findings)
    noise: float = 1.0
    # share of the mean patch token mixed into [CLS], as a backbone summary would
    cls_mix: float = 1.0
    survival_beta: float = 0.7
    survival_scale_days: float = 3650.0
    horizon_days: float = 3650.0
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.findings = [
            f if isinstance(f, FindingSpec) else FindingSpec(**f) for f in self.findings
        ]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def validate(self) -> None:
        H, W = self.grid
        if H % 8 or W % 8:
            raise ValueError(f"grid {H}x{W} must be divisible by 8")
        if self.d_layer < 1 or self.n_layers < 1:
            raise ValueError("d_layer and n_layers must be positive")
        if not self.findings:
            raise ValueError("at least one finding is required")
        if len({f.name for f in self.findings}) != len(self.findings):
            raise ValueError("finding names must be unique")
        for f in self.findings:
            if f.kind not in SIGNAL_KINDS:
                raise ValueError(f"{f.name}: unknown signal kind {f.kind!r}")
            if not 0 < f.prevalence < 1:
                raise ValueError(f"{f.name}: prevalence must lie in (0, 1)")
            for split, n in self.split_sizes().items():
                if f.prevalence * n < 1:
                    raise ValueError(
                        f"{f.name}: prevalence {f.prevalence} gives < 1 expected positive "
                        f"in the {split} split (n={n})"
                    )
        if max(1, int(0.04 * self.n_patches)) < 1:
            raise ValueError("grid too small for a focal region")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


_STREAMS = {"directions": 0, "labels": 1, "regions": 2, "embeddings": 3, "survival": 4}


def _stream(seed: int, name: str, split: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name], split)))


def _region_shape(kind: str, H: int, W: int, rng) -> tuple[int, int]:
    if kind == "focal":
        cap = max(1, int(0.04 * H * W))
        shapes = [s for s in ((1, 1), (1, 2), (2, 1), (2, 2)) if s[0] * s[1] <= cap]
        return shapes[rng.integers(len(shapes))]
    return -(-H // 2), -(-W // 2)  # diffuse: at least a quarter of the grid


@dataclass
class SyntheticSplit:
    data: EmbeddingSet
    labels: np.ndarray
    # (image_id, finding_index) -> (row0, col0, height, width) for planted patches
    regions: dict[tuple[int, int], tuple[int, int, int, int]]


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    splits: dict[str, SyntheticSplit]
    survival: SurvivalTable

    @property
    def findings(self) -> list[str]:
        return [f.name for f in self.spec.findings]


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Generate train/val/test embeddings with planted per-finding signals.

    Each randomness consumer draws from its own named substream (directions,
    labels, regions, embeddings, survival), keyed by split, so the outputs
    depend only on the spec.
    """
    spec.validate()
    H, W = spec.grid
    N, L, D, M = spec.n_patches, spec.n_layers, spec.d_layer, len(spec.findings)
    dirs = _stream(spec.seed, "directions").standard_normal((M, L, D))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs.astype(np.float32)

    splits = {}
    next_id = 1
    for s_idx, (split, n) in enumerate(spec.split_sizes().items(), start=1):
        lab_rng = _stream(spec.seed, "labels", s_idx)
        reg_rng = _stream(spec.seed, "regions", s_idx)
        emb_rng = _stream(spec.seed, "embeddings", s_idx)
        ids = np.arange(next_id, next_id + n, dtype=np.uint64)
        next_id += n

        labels = np.zeros((n, M), dtype=np.int8)
        for m, f in enumerate(spec.findings):
            k = int(round(f.prevalence * n))
            labels[lab_rng.choice(n, size=k, replace=False), m] = 1

        patches = emb_rng.standard_normal((n, L, H, W, D), dtype=np.float32)
        cls = emb_rng.standard_normal((n, L, D), dtype=np.float32)
        if spec.noise != 1.0:
            patches *= np.float32(spec.noise)
            cls *= np.float32(spec.noise)

        regions = {}
        for m, f in enumerate(spec.findings):
            amp = np.float32(f.amplitude)
            for i in np.flatnonzero(labels[:, m]):
                if f.kind == "global":
                    cls[i] += amp * dirs[m]
                    continue
                h, w = _region_shape(f.kind, H, W, reg_rng)
                r0 = int(reg_rng.integers(H - h + 1))
                c0 = int(reg_rng.integers(W - w + 1))
                patches[i, :, r0 : r0 + h, c0 : c0 + w, :] += amp * dirs[m][:, None, None, :]
                regions[(int(ids[i]), m)] = (r0, c0, h, w)
        if spec.cls_mix:
            cls += np.float32(spec.cls_mix) * patches.mean(axis=(2, 3), dtype=np.float32)
        splits[split] = SyntheticSplit(EmbeddingSet(ids, cls, patches), labels, regions)

    survival = _gen_survival(spec, splits)
    return SyntheticData(spec, splits, survival)


def _gen_survival(spec: SyntheticSpec, splits) -> SurvivalTable:
    """Exponential event times whose hazard grows with the planted global signal."""
    rng = _stream(spec.seed, "survival")
    glob = np.array([f.kind == "global" for f in spec.findings])
    amps = np.array([f.amplitude for f in spec.findings])
    ids, times, events = [], [], []
    for split in SPLITS:
        s = splits[split]
        load = (s.labels[:, glob] * amps[glob]).sum(axis=1)
        rate = np.exp(spec.survival_beta * load) / spec.survival_scale_days
        t_event = rng.exponential(1.0 / rate)
        t_censor = rng.uniform(0.5 * spec.horizon_days, spec.horizon_days, size=len(rate))
        ids.append(s.data.ids)
        times.append(np.round(np.minimum(t_event, t_censor), 3))
        events.append((t_event <= t_censor).astype(np.int8))
    return SurvivalTable(np.concatenate(ids), np.concatenate(times), np.concatenate(events))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

DATA_MANIFEST = "data.json"


def write_dataset(out_dir, synth: SyntheticData) -> list[Path]:
    """Write stores, tables and the data manifest; return the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split in SPLITS:
        p = out / f"{split}.glre"
        write_store(p, synth.splits[split].data)
        written.append(p)
    ids = np.concatenate([synth.splits[s].data.ids for s in SPLITS])
    labels = np.concatenate([synth.splits[s].labels for s in SPLITS])
    write_labels(out / "labels.csv", ids, labels, synth.findings)
    write_survival(out / "survival.csv", synth.survival)
    written += [out / "labels.csv", out / "survival.csv"]
    manifest = {
        "splits": {s: f"{s}.glre" for s in SPLITS},
        "labels": "labels.csv",
        "survival": "survival.csv",
        "findings": synth.findings,
        "generator": synth.spec.to_dict(),
        "planted_regions": {
            s: [
                [image_id, m, *box]
                for (image_id, m), box in sorted(synth.splits[s].regions.items())
            ]
            for s in SPLITS
        },
    }
    p = out / DATA_MANIFEST
    p.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    written.append(p)
    return written


@dataclass
class Split:
    data: EmbeddingSet
    labels: np.ndarray


@dataclass
class Dataset:
    root: Path
    findings: list[str]
    splits: dict[str, Split]
    survival_path: Path | None
    manifest: dict

    def planted_regions(self, split: str) -> dict[tuple[int, int], tuple[int, int, int, int]]:
        rows = self.manifest.get("planted_regions", {}).get(split, [])
        return {(r[0], r[1]): tuple(r[2:]) for r in rows}


def load_dataset(root, splits=SPLITS) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    mpath = root / DATA_MANIFEST
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        findings = list(manifest["findings"])
        stores = manifest["splits"]
    except FileNotFoundError:
        raise
    except (ValueError, KeyError) as err:
        raise FormatError(f"{mpath}: malformed data manifest ({err})") from None
    loaded = {s: read_store(root / stores[s]) for s in splits}
    all_ids = np.concatenate([d.ids for d in loaded.values()])
    lab_ids, lab = read_labels(root / manifest.get("labels", "labels.csv"), findings)
    pos = {int(i): k for k, i in enumerate(lab_ids)}
    out = {}
    for s, d in loaded.items():
        try:
            rows = np.array([pos[int(i)] for i in d.ids], dtype=np.int64)
        except KeyError as err:
            raise FormatError(f"label table has no row for image {err.args[0]}") from None
        out[s] = Split(d, lab[rows])
    if len(np.unique(all_ids)) != len(all_ids):
        raise FormatError("image ids repeat across splits")
    surv = manifest.get("survival")
    return Dataset(root, findings, out, root / surv if surv else None, manifest)
