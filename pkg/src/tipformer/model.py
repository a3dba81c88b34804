"""The tipFormer network and its CNN-only ablation.

Data flow for one (toxin, protein) pair::

    tokens/embeddings --linear--> conv1d(2d) --GLU--> LayerNorm        (per side)
    -> N x interaction layer (self-attn, cross-attn toxin->protein, FFN)
    -> L2-norm softmax pooling per side -> [o1 | o2]
    -> 4 linear layers (Dropout + LayerNorm after the first three) -> sigmoid

Every sublayer of an interaction layer is wrapped as ``LayerNorm(x + f(x))``.
The protein side runs its own self-attention + FFN track; reverse
cross-attention (protein queries over toxin keys) is off unless
``ModelConfig.symmetric_cross`` is set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from tipformer import autodiff as ad
from tipformer.autodiff import Tensor
from tipformer.embeddings import (
    FALLBACK_DIM,
    PROTEIN_DIM,
    PROTEIN_VOCAB,
    SMILES_VOCAB,
    TOXIN_DIM,
    fallback_embed,
)
from tipformer.errors import ConfigError, DimensionError, UsageError

VARIANTS = ("tipformer", "deepcnn")


@dataclass
class ModelConfig:
    hidden: int = 32
    heads: int = 8
    num_interaction_layers: int = 2
    conv_kernel: int = 3
    ffn_hidden: int | None = None
    dropout_rate: float = 0.2
    head_dims: list[int] | None = None
    variant: str = "tipformer"
    embedding: str = "fallback"
    fallback_dim: int = FALLBACK_DIM
    toxin_input_dim: int = TOXIN_DIM
    protein_input_dim: int = PROTEIN_DIM
    symmetric_cross: bool = False
    hotspot_reduce: str = "mean"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.hidden
        if self.head_dims is None:
            d = self.hidden
            self.head_dims = [2 * d, d, d, d // 2, 1]
        self.head_dims = [int(w) for w in self.head_dims]
        self.validate()

    def validate(self) -> None:
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be a positive multiple of heads ({self.heads})")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.num_interaction_layers < 0:
            raise ConfigError("num_interaction_layers must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        hd = self.head_dims
        if len(hd) < 2 or hd[0] != 2 * self.hidden or hd[-1] != 1 or min(hd) < 1:
            raise ConfigError(f"head_dims must start at 2*hidden={2 * self.hidden}, end at 1, got {hd}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embedding not in ("fallback", "precomputed"):
            raise ConfigError(f"embedding must be 'fallback' or 'precomputed', got {self.embedding!r}")
        if self.hotspot_reduce not in ("mean", "max"):
            raise ConfigError(f"hotspot_reduce must be 'mean' or 'max', got {self.hotspot_reduce!r}")

    @property
    def toxin_in(self) -> int:
        return self.fallback_dim if self.embedding == "fallback" else self.toxin_input_dim

    @property
    def protein_in(self) -> int:
        return self.fallback_dim if self.embedding == "fallback" else self.protein_input_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class EncoderActivation:
    projected: Tensor
    gated: Tensor
    normalized: Tensor


@dataclass
class AttentionMap:
    """Attention weights stacked over layers, plus the toxin x residue map.

    ``toxin_self`` is (layers, h, n, n), ``cross`` (layers, h, n, m),
    ``protein_self`` (layers, h, m, m); ``reverse`` is filled only with
    symmetric cross-attention.
    """

    toxin_self: np.ndarray
    protein_self: np.ndarray
    cross: np.ndarray
    interaction_map: np.ndarray
    reverse: np.ndarray | None = None


@dataclass
class InteractionOutput:
    toxin_repr: np.ndarray
    protein_repr: np.ndarray
    attention: AttentionMap
    toxin_feats: np.ndarray = field(repr=False, default=None)
    protein_feats: np.ndarray = field(repr=False, default=None)

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.toxin_repr, self.protein_repr])


# ---------------------------------------------------------------- parameters


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self.add(f"{prefix}.weight", _uniform(self.rng, (n_in, n_out), n_in))
        if bias:
            self.add(f"{prefix}.bias", np.zeros(n_out, np.float32))

    def norm(self, prefix: str, d: int) -> None:
        self.add(f"{prefix}.gamma", np.ones(d, np.float32))
        self.add(f"{prefix}.beta", np.zeros(d, np.float32))

    def attention(self, prefix: str, d: int) -> None:
        for proj in ("q", "k", "v"):
            self.linear(f"{prefix}.{proj}", d, d)
        # output mix has no bias
        self.linear(f"{prefix}.out", d, d, bias=False)

    def ffn(self, prefix: str, d: int, f: int) -> None:
        self.linear(f"{prefix}.in", d, 2 * f)
        self.linear(f"{prefix}.out", f, d)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LayerNorm."""
    b = _Builder(np.random.default_rng(seed))
    d, k = config.hidden, config.conv_kernel
    for side, n_in, vocab in (("toxin", config.toxin_in, SMILES_VOCAB), ("protein", config.protein_in, PROTEIN_VOCAB)):
        pre = f"encoder.{side}"
        if config.embedding == "fallback":
            b.add(f"{pre}.embed.table", _uniform(b.rng, (len(vocab), n_in), 1))
        b.linear(f"{pre}.proj", n_in, d)
        b.add(f"{pre}.conv.weight", _uniform(b.rng, (k, d, 2 * d), k * d))
        b.add(f"{pre}.conv.bias", np.zeros(2 * d, np.float32))
        b.norm(f"{pre}.norm", d)
    if config.variant == "tipformer":
        for i in range(config.num_interaction_layers):
            pre = f"interaction.{i}"
            b.attention(f"{pre}.toxin.self_attn", d)
            b.norm(f"{pre}.toxin.norm1", d)
            b.attention(f"{pre}.toxin.cross_attn", d)
            b.norm(f"{pre}.toxin.norm2", d)
            b.ffn(f"{pre}.toxin.ffn", d, config.ffn_hidden)
            b.norm(f"{pre}.toxin.norm3", d)
            b.attention(f"{pre}.protein.self_attn", d)
            b.norm(f"{pre}.protein.norm1", d)
            if config.symmetric_cross:
                b.attention(f"{pre}.protein.cross_attn", d)
                b.norm(f"{pre}.protein.norm2", d)
            b.ffn(f"{pre}.protein.ffn", d, config.ffn_hidden)
            b.norm(f"{pre}.protein.norm3", d)
    widths = config.head_dims
    for j in range(len(widths) - 1):
        b.linear(f"head.{j}", widths[j], widths[j + 1])
        if j < len(widths) - 2:
            b.norm(f"head.{j}.norm", widths[j + 1])
    return b.params


# ---------------------------------------------------------------- building blocks


def _ln(x: Tensor, params: dict[str, Tensor], prefix: str, eps: float) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def _lin(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.linear(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"))


def encode(x: Tensor, params: dict[str, Tensor], prefix: str, config: ModelConfig) -> EncoderActivation:
    """Linear projection, conv1d + GLU, LayerNorm. Sequence length is preserved."""
    w = params[f"{prefix}.proj.weight"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigError(f"{prefix}: input has shape {x.shape}, encoder expects L x {w.shape[0]}")
    projected = _lin(x, params, f"{prefix}.proj")
    gated = ad.glu(ad.conv1d(projected, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"]))
    normalized = _ln(gated, params, f"{prefix}.norm", config.ln_eps)
    return EncoderActivation(projected, gated, normalized)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Split d into ``heads`` slices, attend per head and concatenate.

    Returns the (L_q, d) concatenated heads and the (h, L_q, L_k) weights.
    """
    lq, d = q.shape
    lk = k.shape[0]
    if d % heads or k.shape[1] != d or v.shape != k.shape:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} with {heads} heads")
    dk = d // heads
    q3 = ad.transpose(ad.reshape(q, (lq, heads, dk)), (1, 0, 2))
    kt3 = ad.transpose(ad.reshape(k, (lk, heads, dk)), (1, 2, 0))
    v3 = ad.transpose(ad.reshape(v, (lk, heads, dk)), (1, 0, 2))
    weights = ad.softmax(ad.mul(ad.matmul(q3, kt3), 1.0 / math.sqrt(dk)), axis=-1)
    heads_out = ad.matmul(weights, v3)
    return ad.reshape(ad.transpose(heads_out, (1, 0, 2)), (lq, d)), weights.data


def multi_head_attention(
    q_src: Tensor, kv_src: Tensor, params: dict[str, Tensor], prefix: str, heads: int
) -> tuple[Tensor, np.ndarray]:
    q = _lin(q_src, params, f"{prefix}.q")
    k = _lin(kv_src, params, f"{prefix}.k")
    v = _lin(kv_src, params, f"{prefix}.v")
    concat, weights = scaled_dot_product_attention(q, k, v, heads)
    return ad.matmul(concat, params[f"{prefix}.out.weight"]), weights


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return _lin(ad.glu(_lin(x, params, f"{prefix}.in")), params, f"{prefix}.out")


@dataclass
class LayerAttention:
    toxin_self: np.ndarray
    protein_self: np.ndarray
    cross: np.ndarray
    reverse: np.ndarray | None = None


def interaction_layer(
    toxin: Tensor, protein: Tensor, params: dict[str, Tensor], prefix: str, config: ModelConfig
) -> tuple[Tensor, Tensor, LayerAttention]:
    h, eps = config.heads, config.ln_eps
    a, w_ts = multi_head_attention(toxin, toxin, params, f"{prefix}.toxin.self_attn", h)
    t = _ln(ad.add(toxin, a), params, f"{prefix}.toxin.norm1", eps)
    c, w_cross = multi_head_attention(t, protein, params, f"{prefix}.toxin.cross_attn", h)
    t = _ln(ad.add(t, c), params, f"{prefix}.toxin.norm2", eps)
    t = _ln(ad.add(t, feed_forward(t, params, f"{prefix}.toxin.ffn")), params, f"{prefix}.toxin.norm3", eps)

    a, w_ps = multi_head_attention(protein, protein, params, f"{prefix}.protein.self_attn", h)
    p = _ln(ad.add(protein, a), params, f"{prefix}.protein.norm1", eps)
    w_rev = None
    if config.symmetric_cross:
        c, w_rev = multi_head_attention(p, toxin, params, f"{prefix}.protein.cross_attn", h)
        p = _ln(ad.add(p, c), params, f"{prefix}.protein.norm2", eps)
    p = _ln(ad.add(p, feed_forward(p, params, f"{prefix}.protein.ffn")), params, f"{prefix}.protein.norm3", eps)
    return t, p, LayerAttention(w_ts, w_ps, w_cross, w_rev)


def weighted_pool(feats: Tensor) -> Tensor:
    """Softmax over per-position L2 norms, then the weighted sum of rows."""
    n = feats.shape[0]
    w = ad.softmax(ad.row_l2_norm(feats), axis=-1)
    return ad.reshape(ad.matmul(ad.reshape(w, (1, n)), feats), (feats.shape[1],))


def prediction_head(
    features: Tensor, params: dict[str, Tensor], config: ModelConfig, train: bool, rng: np.random.Generator | None
) -> Tensor:
    x = ad.reshape(features, (1, features.shape[0]))
    n_layers = len(config.head_dims) - 1
    for j in range(n_layers):
        x = _lin(x, params, f"head.{j}")
        if j < n_layers - 1:
            x = ad.dropout(x, config.dropout_rate, train, rng)
            x = _ln(x, params, f"head.{j}.norm", config.ln_eps)
    return ad.reshape(ad.sigmoid(x), ())


def rank_hotspots(
    interaction_map: np.ndarray, k: int, residue_offset: int = 0, reduce: str = "mean"
) -> list[tuple[int, float]]:
    """Top-k protein positions by aggregated interaction score.

    Residue numbers are 1-based token positions plus ``residue_offset``;
    ties go to the lower residue number.
    """
    m = interaction_map.shape[1]
    if not 1 <= k <= m:
        raise UsageError(f"k must be between 1 and the protein length {m}, got {k}")
    agg = np.asarray(interaction_map, dtype=np.float64)
    scores = agg.max(axis=0) if reduce == "max" else agg.mean(axis=0)
    order = np.lexsort((np.arange(m), -scores))[:k]
    return [(int(j) + 1 + residue_offset, float(scores[j])) for j in order]


# ---------------------------------------------------------------- model


class TipFormer:
    """Parameters plus the forward pass for both variants.

    ``toxin``/``protein`` inputs are either float matrices (precomputed
    embeddings, L x D) or integer token index arrays (fallback path).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.seed = seed
        self.params = params if params is not None else init_params(self.config, seed)
        self.rng = np.random.default_rng([seed, 1])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ConfigError("parameter name sets differ")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]

    # -- embedding

    def _embed(self, x, side: str) -> Tensor:
        arr = np.asarray(x)
        if np.issubdtype(arr.dtype, np.integer):
            table = self.params.get(f"encoder.{side}.embed.table")
            if table is None:
                raise ConfigError(f"{side}: token indices given but the model uses precomputed embeddings")
            return fallback_embed(arr, table)
        if self.config.embedding == "fallback":
            raise ConfigError(f"{side}: float embeddings given but the model uses the token fallback")
        return Tensor(arr)

    def encode_pair(self, toxin, protein) -> tuple[EncoderActivation, EncoderActivation]:
        t = encode(self._embed(toxin, "toxin"), self.params, "encoder.toxin", self.config)
        p = encode(self._embed(protein, "protein"), self.params, "encoder.protein", self.config)
        return t, p

    # -- forward

    def forward(self, toxin, protein, train: bool = False) -> tuple[Tensor, InteractionOutput]:
        if self.config.variant == "deepcnn":
            return self.forward_deepcnn(toxin, protein, train)
        t_enc, p_enc = self.encode_pair(toxin, protein)
        t, p = t_enc.normalized, p_enc.normalized
        layers: list[LayerAttention] = []
        for i in range(self.config.num_interaction_layers):
            t, p, att = interaction_layer(t, p, self.params, f"interaction.{i}", self.config)
            layers.append(att)
        o1, o2 = weighted_pool(t), weighted_pool(p)
        prob = prediction_head(ad.concat([o1, o2]), self.params, self.config, train, self.rng)
        return prob, self._output(o1, o2, t, p, layers)

    def forward_deepcnn(self, toxin, protein, train: bool = False) -> tuple[Tensor, InteractionOutput]:
        t_enc, p_enc = self.encode_pair(toxin, protein)
        t, p = t_enc.normalized, p_enc.normalized
        o1, o2 = ad.mean(t, axis=0), ad.mean(p, axis=0)
        prob = prediction_head(ad.concat([o1, o2]), self.params, self.config, train, self.rng)
        return prob, self._output(o1, o2, t, p, [])

    def _output(self, o1, o2, t, p, layers: Sequence[LayerAttention]) -> InteractionOutput:
        n, m, h = t.shape[0], p.shape[0], self.config.heads

        def stack(attr: str, rows: int, cols: int) -> np.ndarray:
            if not layers or getattr(layers[0], attr) is None:
                return np.zeros((0, h, rows, cols), np.float32)
            return np.stack([getattr(a, attr) for a in layers])

        amap = AttentionMap(
            toxin_self=stack("toxin_self", n, n),
            protein_self=stack("protein_self", m, m),
            cross=stack("cross", n, m),
            interaction_map=t.data @ p.data.T,
            reverse=stack("reverse", m, n) if self.config.symmetric_cross else None,
        )
        return InteractionOutput(o1.data.copy(), o2.data.copy(), amap, t.data, p.data)

    def predict_pair(self, toxin, protein, train: bool = False) -> tuple[float, InteractionOutput]:
        """Probability and interaction details; eval mode is deterministic."""
        with ad.no_grad():
            prob, out = self.forward(toxin, protein, train)
        return float(prob.data), out

    def predict(self, toxin, protein) -> float:
        return self.predict_pair(toxin, protein)[0]

    def extract_hotspots(self, toxin, protein, k: int, residue_offset: int = 0) -> list[tuple[int, float]]:
        _, out = self.predict_pair(toxin, protein)
        return rank_hotspots(out.attention.interaction_map, k, residue_offset, self.config.hotspot_reduce)


def predict_pair(toxin, protein, model: TipFormer, mode: str = "eval") -> tuple[float, InteractionOutput]:
    return model.predict_pair(toxin, protein, train=(mode == "train"))


def predict_pair_deepcnn(toxin, protein, model: TipFormer, mode: str = "eval") -> tuple[float, InteractionOutput]:
    if model.config.variant != "deepcnn":
        raise ConfigError("predict_pair_deepcnn needs a model built with variant='deepcnn'")
    return model.predict_pair(toxin, protein, train=(mode == "train"))


def extract_hotspots(toxin, protein, model: TipFormer, k: int, residue_offset: int = 0) -> list[tuple[int, float]]:
    return model.extract_hotspots(toxin, protein, k, residue_offset)
