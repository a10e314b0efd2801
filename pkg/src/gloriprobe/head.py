"""GLoRI classification head and the linear-probe baseline.

The GLoRI head turns frozen patch tokens and ``[CLS]`` tokens into one logit
per finding:

* fine branch: patches -> ReLU(linear) -> multi-head attention driven by
  learnable disease queries, with per-query temperatures produced from the
  mean-pooled patches (``exp(tanh(MLP))``);
* coarse branch: patches average-pooled at several block sizes, projected,
  upsampled back to the grid, concatenated, layer-normed, then attended by a
  second query bank at temperature 1;
* a learned projection of ``[CLS]`` added to every disease token;
* one linear classifier row per disease token.

Parameters live in a plain ``dict[str, Tensor]``. All forward functions take a
leading batch axis.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import EmbeddingRecord, EmbeddingSet, concat_layers
from .tensor import Tensor

Params = dict[str, Tensor]

ABLATION_VARIANTS = {
    "pooler": dict(use_global=False, use_temperature=False, use_pyramid=False),
    "global": dict(use_global=True, use_temperature=False, use_pyramid=False),
    "temperature": dict(use_global=True, use_temperature=True, use_pyramid=False),
    "full": dict(use_global=True, use_temperature=True, use_pyramid=True),
}


@dataclass
class GLoRIConfig:
    n_findings: int
    d_model: int
    d_glori: int = 768
    heads: int = 8
    pyramid_ks: tuple[int, ...] = (8, 4, 2)
    temp_hidden: int = 256
    seed: int = 0
    use_global: bool = True
    use_temperature: bool = True
    use_pyramid: bool = True
    ln_eps: float = 1e-5
    kind: str = field(default="glori", init=False)

    def __post_init__(self):
        self.pyramid_ks = tuple(int(k) for k in self.pyramid_ks)
        if self.n_findings < 1:
            raise ValueError("n_findings must be >= 1")
        if self.d_glori % self.heads:
            raise ValueError(f"d_glori={self.d_glori} not divisible by heads={self.heads}")
        if not self.pyramid_ks or min(self.pyramid_ks) < 1:
            raise ValueError("pyramid_ks must be positive")

    @property
    def d_key(self) -> int:
        return self.d_glori // self.heads

    @property
    def d_value(self) -> int:
        return self.d_key

    def pyramid_widths(self) -> list[int]:
        """Per-scale projection widths; they always sum to ``d_model``."""
        n = len(self.pyramid_ks)
        w = -(-self.d_model // n)
        widths = [w] * (n - 1) + [self.d_model - w * (n - 1)]
        if widths[-1] < 1:
            raise ValueError(f"d_model={self.d_model} too small for {n} pyramid scales")
        return widths

    def variant(self) -> str:
        flags = dict(
            use_global=self.use_global,
            use_temperature=self.use_temperature,
            use_pyramid=self.use_pyramid,
        )
        for name, v in ABLATION_VARIANTS.items():
            if v == flags:
                return name
        return "custom"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pyramid_ks"] = list(self.pyramid_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GLoRIConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


@dataclass
class LinearProbeConfig:
    n_findings: int
    d_model: int
    seed: int = 0
    kind: str = field(default="linear", init=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearProbeConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


def config_from_dict(d: dict):
    if d.get("kind") == "linear":
        return LinearProbeConfig.from_dict(d)
    if d.get("kind") == "glori":
        return GLoRIConfig.from_dict(d)
    raise ValueError(f"unknown head kind {d.get('kind')!r}")


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _rng(seed: int, name: str) -> np.random.Generator:
    # one substream per parameter name: toggling a component never shifts
    # the initial values of the others
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def _uniform(seed, name, shape, fan_in) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(_rng(seed, name).uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _affine(p: Params, seed: int, name: str, d_in: int, d_out: int) -> None:
    p[f"{name}.W"] = _uniform(seed, f"{name}.W", (d_in, d_out), d_in)
    p[f"{name}.b"] = _uniform(seed, f"{name}.b", (d_out,), d_in)


def init_glori_params(cfg: GLoRIConfig) -> Params:
    s, M, Dm, Dg = cfg.seed, cfg.n_findings, cfg.d_model, cfg.d_glori
    p: Params = {}
    _affine(p, s, "embed", Dm, Dg)
    p["fine.query"] = Tensor(_rng(s, "fine.query").standard_normal((M, Dg)), True, "fine.query")
    for part in ("key", "value", "out"):
        _affine(p, s, f"fine.{part}", Dg, Dg)
    if cfg.use_temperature:
        _affine(p, s, "temp.hidden", Dm, cfg.temp_hidden)
        _affine(p, s, "temp.out", cfg.temp_hidden, M)
    if cfg.use_pyramid:
        for k, w in zip(cfg.pyramid_ks, cfg.pyramid_widths()):
            _affine(p, s, f"pyramid.{k}", Dm, w)
        p["pyramid.norm.gamma"] = Tensor(np.ones(Dm), True, "pyramid.norm.gamma")
        p["pyramid.norm.beta"] = Tensor(np.zeros(Dm), True, "pyramid.norm.beta")
        p["coarse.query"] = Tensor(
            _rng(s, "coarse.query").standard_normal((M, Dg)), True, "coarse.query"
        )
        _affine(p, s, "coarse.key", Dm, Dg)
        _affine(p, s, "coarse.value", Dm, Dg)
        _affine(p, s, "coarse.out", Dg, Dg)
    if cfg.use_global:
        _affine(p, s, "cls", Dm, Dg)
    p["clf.W"] = _uniform(s, "clf.W", (M, Dg), Dg)
    p["clf.b"] = _uniform(s, "clf.b", (M,), Dg)
    return p


def init_linear_params(cfg: LinearProbeConfig) -> Params:
    p: Params = {}
    _affine(p, cfg.seed, "probe", cfg.d_model, cfg.n_findings)
    return p


# ---------------------------------------------------------------------------
# GLoRI components (batched: leading axis B)
# ---------------------------------------------------------------------------


def embed_patches(u: Tensor, params: Params) -> Tensor:
    """(B, N, D_model) -> (B, N, D_glori), non-negative."""
    return T.relu(T.linear(u, params["embed.W"], params["embed.b"]))


def adaptive_temperature(u: Tensor, params: Params) -> Tensor:
    """Per-query temperatures (B, M) in [1/e, e] from mean-pooled patches (B, N, D_model)."""
    if u.shape[-2] < 1:
        raise T.ShapeError("adaptive_temperature: no patches")
    pooled = T.mean(u, axis=-2)
    h = T.tanh(T.linear(pooled, params["temp.hidden.W"], params["temp.hidden.b"]))
    return T.exp(T.tanh(T.linear(h, params["temp.out.W"], params["temp.out.b"])))


def multi_head_attention(
    query: Tensor,
    tokens: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    tau: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Cross-attention of M learned queries over N tokens.

    query (M, D), tokens (B, N, D_in), tau (B, M) or None for temperature 1.
    Returns the output-projected query tokens (B, M, D) and the head-averaged
    attention weights (B, M, N).
    """
    M, D = query.shape
    B, N, _ = tokens.shape
    if D % heads:
        raise T.ShapeError(f"query width {D} not divisible by {heads} heads")
    dk = D // heads
    k = T.linear(tokens, params[f"{prefix}.key.W"], params[f"{prefix}.key.b"])
    v = T.linear(tokens, params[f"{prefix}.value.W"], params[f"{prefix}.value.b"])
    if k.shape[-1] != D:
        raise T.ShapeError(f"key width {k.shape[-1]} != query width {D}")
    k = T.transpose(T.reshape(k, (B, N, heads, dk)), (0, 2, 3, 1))  # B,h,dk,N
    v = T.transpose(T.reshape(v, (B, N, heads, dk)), (0, 2, 1, 3))  # B,h,N,dk
    q = T.transpose(T.reshape(query, (M, heads, dk)), (1, 0, 2))  # h,M,dk
    logits = T.matmul(T.scale(q, 1.0 / math.sqrt(dk)), k)  # B,h,M,N
    if tau is None:
        tau_h = Tensor(np.ones((B, heads, M)))
    else:
        if tau.shape != (B, M):
            raise T.ShapeError(f"tau {tau.shape} must be {(B, M)}")
        tau_h = T.expand(tau, 1, heads)
    attn = T.softmax_with_temperature(logits, tau_h)
    out = T.matmul(attn, v)  # B,h,M,dk
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, M, D))
    out = T.linear(out, params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])
    return out, attn.data.mean(axis=1)


def attention_fine(q: Tensor, u_embedded: Tensor, tau: Tensor | None, params: Params, heads: int):
    return multi_head_attention(q, u_embedded, params, "fine", heads, tau)


def attention_coarse(q: Tensor, u_pyr: Tensor, params: Params, heads: int):
    return multi_head_attention(q, u_pyr, params, "coarse", heads, None)


def pyramid_merge(u_grid: Tensor, params: Params, cfg: GLoRIConfig) -> Tensor:
    """(B, H, W, D_model) -> layer-normed multi-scale tokens (B, H*W, D_model)."""
    B, H, W, Dm = u_grid.shape
    kmax = max(cfg.pyramid_ks)
    if H % kmax or W % kmax:
        raise T.ShapeError(f"grid {H}x{W} not divisible by pyramid size {kmax}")
    scales = []
    for k in cfg.pyramid_ks:
        pooled = T.avg_pool2d(u_grid, k)
        proj = T.relu(T.linear(pooled, params[f"pyramid.{k}.W"], params[f"pyramid.{k}.b"]))
        scales.append(T.upsample_nearest(proj, k))
    merged = T.concat(scales, axis=-1)
    normed = T.layer_norm(
        merged, params["pyramid.norm.gamma"], params["pyramid.norm.beta"], cfg.ln_eps
    )
    return T.reshape(normed, (B, H * W, Dm))


def integrate_global(
    fine: Tensor | None, coarse: Tensor | None, cls: Tensor | None, params: Params
) -> Tensor:
    """Sum the branch outputs (B, M, D) and the projected [CLS] token.

    Any of the three terms may be ``None`` (ablated); at least one is needed.
    """
    terms = [t for t in (fine, coarse) if t is not None]
    if cls is not None:
        proj = T.linear(cls, params["cls.W"], params["cls.b"])  # B,D
        M = terms[0].shape[1] if terms else params["clf.W"].shape[0]
        terms.append(T.expand(proj, 1, M))
    if not terms:
        raise ValueError("integrate_global: nothing to integrate")
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def classify(tokens: Tensor, params: Params) -> Tensor:
    """Per-disease affine readout: (B, M, D) -> (B, M)."""
    return T.add(T.sum_(T.mul(tokens, params["clf.W"]), axis=-1), params["clf.b"])


def _as_inputs(cls, patches) -> tuple[Tensor, Tensor]:
    cls = np.asarray(cls, dtype=np.float64)
    patches = np.asarray(patches, dtype=np.float64)
    if cls.ndim == 2:  # single record
        cls, patches = cls[None], patches[None]
    c, p = concat_layers(cls, patches)
    return Tensor(c), Tensor(p)


def glori_forward(cls, patches, params: Params, cfg: GLoRIConfig):
    """Full head on a batch.

    ``cls`` is (B, L, D_layer) and ``patches`` (B, L, H, W, D_layer); a single
    record without the batch axis is accepted too. Returns ``(logits (B, M),
    fine_maps (B, M, H, W), coarse_maps (B, M, H, W) or None)``.
    """
    c, grid = _as_inputs(cls, patches)
    B, H, W, Dm = grid.shape
    if Dm != cfg.d_model:
        raise T.ShapeError(f"record width {Dm} != configured d_model {cfg.d_model}")
    u = T.reshape(grid, (B, H * W, Dm))
    u_emb = embed_patches(u, params)
    tau = adaptive_temperature(u, params) if cfg.use_temperature else None
    fine, fine_maps = attention_fine(params["fine.query"], u_emb, tau, params, cfg.heads)
    coarse = coarse_maps = None
    if cfg.use_pyramid:
        u_pyr = pyramid_merge(grid, params, cfg)
        coarse, coarse_maps = attention_coarse(params["coarse.query"], u_pyr, params, cfg.heads)
        coarse_maps = coarse_maps.reshape(B, -1, H, W)
    tokens = integrate_global(fine, coarse, c if cfg.use_global else None, params)
    logits = classify(tokens, params)
    return logits, fine_maps.reshape(B, -1, H, W), coarse_maps


def linear_probe_forward(cls, params: Params, cfg: LinearProbeConfig | None = None) -> Tensor:
    """Affine map of the layer-concatenated [CLS] tokens (B, L, D_layer) -> (B, M)."""
    cls = np.asarray(cls, dtype=np.float64)
    if cls.ndim == 2:
        cls = cls[None]
    c = Tensor(cls.reshape(cls.shape[0], -1))
    if cfg is not None and c.shape[-1] != cfg.d_model:
        raise T.ShapeError(f"record width {c.shape[-1]} != configured d_model {cfg.d_model}")
    return T.linear(c, params["probe.W"], params["probe.b"])


# ---------------------------------------------------------------------------
# head objects used by the trainer and the CLI
# ---------------------------------------------------------------------------


class GLoRIHead:
    kind = "glori"

    def __init__(self, config: GLoRIConfig, params: Params | None = None):
        self.config = config
        self.params = params if params is not None else init_glori_params(config)

    def forward(self, cls, patches) -> Tensor:
        return glori_forward(cls, patches, self.params, self.config)[0]

    def predict(self, data: EmbeddingSet, batch_size: int = 128) -> np.ndarray:
        out = [
            self.forward(data.cls[i : i + batch_size], data.patches[i : i + batch_size]).data
            for i in range(0, len(data), batch_size)
        ]
        return np.concatenate(out)

    def attention_map(self, rec: EmbeddingRecord, disease_index: int, branch: str = "fine") -> np.ndarray:
        """Head-averaged attention of one disease query over the patch grid; sums to 1."""
        M = self.config.n_findings
        if not 0 <= disease_index < M:
            raise IndexError(f"disease index {disease_index} outside [0, {M})")
        if branch not in ("fine", "coarse"):
            raise ValueError(f"branch must be 'fine' or 'coarse', got {branch!r}")
        _, fine_maps, coarse_maps = glori_forward(rec.cls, rec.patches, self.params, self.config)
        if branch == "coarse":
            if coarse_maps is None:
                raise ValueError("this head has no coarse branch")
            return coarse_maps[0, disease_index]
        return fine_maps[0, disease_index]


class LinearProbe:
    kind = "linear"

    def __init__(self, config: LinearProbeConfig, params: Params | None = None):
        self.config = config
        self.params = params if params is not None else init_linear_params(config)

    def forward(self, cls, patches) -> Tensor:
        return linear_probe_forward(cls, self.params, self.config)

    def predict(self, data: EmbeddingSet, batch_size: int = 1024) -> np.ndarray:
        return linear_probe_forward(data.cls, self.params, self.config).data


def make_head(config):
    if config.kind == "glori":
        return GLoRIHead(config)
    return LinearProbe(config)


def attention_map(rec: EmbeddingRecord, head: GLoRIHead, disease_index: int, branch: str = "fine"):
    return head.attention_map(rec, disease_index, branch)
