"""In-memory frozen backbone outputs.

An :class:`EmbeddingSet` holds ``n`` images worth of per-layer ``[CLS]`` tokens
and patch grids. Arrays are marked read-only so that nothing downstream can
mutate the frozen features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbeddingRecord:
    image_id: int
    cls: np.ndarray      # (L, D_layer)
    patches: np.ndarray  # (L, H_p, W_p, D_layer)

    @property
    def n_layers(self) -> int:
        return self.cls.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.patches.shape[1], self.patches.shape[2]


class EmbeddingSet:
    def __init__(self, ids, cls, patches):
        ids = np.asarray(ids, dtype=np.uint64)
        cls = np.asarray(cls, dtype=np.float64)
        patches = np.asarray(patches, dtype=np.float64)
        if cls.ndim != 3 or patches.ndim != 5:
            raise ValueError(
                f"expected cls (n, L, D) and patches (n, L, H, W, D), got {cls.shape}, {patches.shape}"
            )
        n, L, D = cls.shape
        if ids.shape != (n,) or patches.shape[:2] != (n, L) or patches.shape[-1] != D:
            raise ValueError("inconsistent embedding shapes")
        if len(np.unique(ids)) != n:
            raise ValueError("duplicate image ids")
        for a in (ids, cls, patches):
            a.setflags(write=False)
        self.ids = ids
        self.cls = cls
        self.patches = patches

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(int(self.ids[i]), self.cls[i], self.patches[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_layers(self) -> int:
        return self.cls.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.patches.shape[2], self.patches.shape[3]

    @property
    def d_layer(self) -> int:
        return self.cls.shape[2]

    @property
    def d_model(self) -> int:
        return self.n_layers * self.d_layer

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx)
        return EmbeddingSet(self.ids[idx], self.cls[idx], self.patches[idx])

    def index_of(self, image_id: int) -> int:
        hits = np.flatnonzero(self.ids == np.uint64(image_id))
        if not len(hits):
            raise KeyError(f"image id {image_id} not in set")
        return int(hits[0])

    @classmethod
    def from_records(cls, records) -> "EmbeddingSet":
        records = list(records)
        if not records:
            raise ValueError("no records")
        return cls(
            [r.image_id for r in records],
            np.stack([r.cls for r in records]),
            np.stack([r.patches for r in records]),
        )

    @classmethod
    def union(cls, a: "EmbeddingSet", b: "EmbeddingSet") -> "EmbeddingSet":
        overlap = np.intersect1d(a.ids, b.ids)
        if len(overlap):
            raise ValueError(f"splits share {len(overlap)} image ids")
        return cls(
            np.concatenate([a.ids, b.ids]),
            np.concatenate([a.cls, b.cls]),
            np.concatenate([a.patches, b.patches]),
        )


def concat_layers(cls: np.ndarray, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Join the L per-layer blocks along features.

    ``cls`` (..., L, D) -> (..., L*D); ``patches`` (..., L, H, W, D) -> (..., H, W, L*D).
    Layer-major feature order: layer 0 occupies the first D columns.
    """
    L, D = cls.shape[-2:]
    c = cls.reshape(*cls.shape[:-2], L * D)
    p = np.moveaxis(patches, -4, -2)
    p = p.reshape(*p.shape[:-2], L * D)
    return c, p
