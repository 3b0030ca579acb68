"""Forward-only Llama-style causal LM with per-site fake quantization.

Architecture: token embedding, ``n_layers`` pre-norm blocks (RMSNorm,
grouped-query attention with rotary embeddings, RMSNorm, SiLU-gated FFN),
final RMSNorm and an untied output head. All arithmetic is float32.

Weight matrices are stored ``(out_features, in_features)`` and applied as
``x @ W.T``, so both weight and activation quantization blocks run along the
reduction axis.

Tensor inventory for a config (``hd = model_dim // n_heads``):

==============================  ===================================
name                            shape
==============================  ===================================
``embedding``                   ``(vocab_size, model_dim)``
``layers.{i}.attn_norm``        ``(model_dim,)``
``layers.{i}.q``                ``(n_heads * hd, model_dim)``
``layers.{i}.k``                ``(n_kv_heads * hd, model_dim)``
``layers.{i}.v``                ``(n_kv_heads * hd, model_dim)``
``layers.{i}.o``                ``(model_dim, n_heads * hd)``
``layers.{i}.ffn_norm``         ``(model_dim,)``
``layers.{i}.gate``             ``(ffn_dim, model_dim)``
``layers.{i}.up``               ``(ffn_dim, model_dim)``
``layers.{i}.down``             ``(model_dim, ffn_dim)``
``final_norm``                  ``(model_dim,)``
``head``                        ``(vocab_size, model_dim)``
==============================  ===================================
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import InvalidConfig, InvalidInput, SchemaError
from .formats import BlockFormat, fake_quant

MATMULS = ("q", "k", "v", "o", "gate", "up", "down")
LAYER = "layer"
MATMUL = "matmul"

_RMS_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    model_dim: int = 64
    ffn_dim: int = 192
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    max_seq_len: int = 128
    rope_theta: float = 10000.0

    def __post_init__(self):
        dims = (self.model_dim, self.ffn_dim, self.n_layers, self.n_heads,
                self.n_kv_heads, self.max_seq_len)
        if any(int(d) < 1 for d in dims):
            raise InvalidConfig(f"all dimensions must be >= 1: {self}")
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must be >= 2")
        if self.model_dim % self.n_heads:
            raise InvalidConfig("model_dim must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise InvalidConfig("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise InvalidConfig("head_dim must be even for rotary embeddings")
        if not self.rope_theta > 0:
            raise InvalidConfig("rope_theta must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


CLM_MICRO = ModelConfig()

# Shapes of the pretrained CLM series, kept for parameter counting.
CLM_SERIES = {
    "clm-60m": ModelConfig(49152, 384, 1408, 22, 4, 2, 2048),
    "clm-200m": ModelConfig(49152, 768, 2688, 24, 12, 4, 2048),
    "clm-400m": ModelConfig(49152, 960, 3328, 30, 15, 5, 2048),
    "clm-600m": ModelConfig(49152, 1152, 4096, 32, 18, 6, 2048),
    "clm-1.1b": ModelConfig(49152, 1536, 5376, 32, 24, 8, 2048),
}

PRESETS = {"clm-micro": CLM_MICRO, **CLM_SERIES}


def matmul_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, hd = config.model_dim, config.head_dim
    return {
        "q": (config.n_heads * hd, d),
        "k": (config.n_kv_heads * hd, d),
        "v": (config.n_kv_heads * hd, d),
        "o": (d, config.n_heads * hd),
        "gate": (config.ffn_dim, d),
        "up": (config.ffn_dim, d),
        "down": (d, config.ffn_dim),
    }


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape inventory; this order is the checkpoint order."""
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, config.model_dim)}
    mm = matmul_shapes(config)
    for i in range(config.n_layers):
        shapes[f"layers.{i}.attn_norm"] = (config.model_dim,)
        for name in ("q", "k", "v", "o"):
            shapes[f"layers.{i}.{name}"] = mm[name]
        shapes[f"layers.{i}.ffn_norm"] = (config.model_dim,)
        for name in ("gate", "up", "down"):
            shapes[f"layers.{i}.{name}"] = mm[name]
    shapes["final_norm"] = (config.model_dim,)
    shapes["head"] = (config.vocab_size, config.model_dim)
    return shapes


def non_embedding_params(config: ModelConfig) -> int:
    """Parameters in the quantizable matmul weights (the N used by the laws)."""
    per_layer = sum(r * c for r, c in matmul_shapes(config).values())
    return per_layer * config.n_layers


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        validate_tensors(self.config, self.tensors)
        frozen = {}
        for name in tensor_shapes(self.config):
            arr = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
            if arr is self.tensors[name]:
                arr = arr.copy()
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()


def validate_tensors(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    expected = tensor_shapes(config)
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise SchemaError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        arr = np.asarray(tensors[name])
        if arr.shape != shape:
            raise SchemaError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInput(f"{name}: non-finite values")


def init_random(config: ModelConfig, seed: int) -> Checkpoint:
    """Gaussian init with std ``1/sqrt(fan_in)`` (``fan_in = shape[-1]``); norms are ones."""
    if not isinstance(config, ModelConfig):
        raise InvalidConfig("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            std = 1.0 / np.sqrt(shape[-1])
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Checkpoint(config, tensors)


# ---------------------------------------------------------------------------
# Sites and plans


@dataclass(frozen=True, order=True)
class SiteId:
    layer_index: int
    matmul_name: Optional[str] = None
    granularity: str = MATMUL

    def __post_init__(self):
        if self.granularity not in (LAYER, MATMUL):
            raise InvalidInput(f"unknown granularity {self.granularity!r}")
        if self.granularity == LAYER and self.matmul_name is not None:
            raise InvalidInput("layer-granularity sites carry no matmul name")
        if self.granularity == MATMUL and self.matmul_name not in MATMULS:
            raise InvalidInput(f"unknown matmul {self.matmul_name!r}")

    def key(self) -> str:
        if self.granularity == LAYER:
            return f"L{self.layer_index}"
        return f"L{self.layer_index}.{self.matmul_name}"

    def covers(self, layer_index: int, matmul_name: str) -> bool:
        if layer_index != self.layer_index:
            return False
        return self.granularity == LAYER or self.matmul_name == matmul_name


def enumerate_sites(config: ModelConfig, granularity: str) -> list[tuple[SiteId, int]]:
    mm = {k: r * c for k, (r, c) in matmul_shapes(config).items()}
    if granularity == LAYER:
        per_layer = sum(mm.values())
        return [(SiteId(i, None, LAYER), per_layer) for i in range(config.n_layers)]
    if granularity == MATMUL:
        return [(SiteId(i, name, MATMUL), mm[name]) for i in range(config.n_layers) for name in MATMULS]
    raise InvalidInput(f"unknown granularity {granularity!r}")


@dataclass(frozen=True)
class QuantPlan:
    method: BlockFormat
    weight_and_activation: bool = True
    low_precision_sites: frozenset = field(default_factory=frozenset)
    site_param_counts: Mapping[SiteId, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "low_precision_sites", frozenset(self.low_precision_sites))
        unknown = self.low_precision_sites - set(self.site_param_counts)
        if unknown:
            raise InvalidInput(f"plan references unknown sites: {sorted(s.key() for s in unknown)}")

    def achieved_ratio(self) -> float:
        total = sum(self.site_param_counts.values())
        if total == 0:
            return 0.0
        low = sum(self.site_param_counts[s] for s in self.low_precision_sites)
        return low / total

    def is_low(self, layer_index: int, matmul_name: str) -> bool:
        return any(s.covers(layer_index, matmul_name) for s in self.low_precision_sites)

    def digest(self) -> str:
        payload = {
            "method": str(self.method),
            "weight_and_activation": self.weight_and_activation,
            "sites": sorted(s.key() for s in self.low_precision_sites),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Forward pass


def _rms_norm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(_RMS_EPS))) * weight


@functools.lru_cache(maxsize=32)
def _rope_tables(seq_len: int, head_dim: int, theta: float):
    half = head_dim // 2
    inv_freq = 1.0 / (theta ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (B, H, T, hd); rotate-half convention
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _silu(x: np.ndarray) -> np.ndarray:
    d = np.exp(-x)
    d += np.float32(1.0)
    return np.divide(x, d, out=d)


def _quant32(x: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    return fake_quant(x, fmt).astype(np.float32, copy=False)


class QuantizedWeights:
    """Memoizes fake-quantized weight matrices for one checkpoint.

    Safe to share across threads: entries are immutable and a race only
    recomputes the same value.
    """

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self._cache: dict[tuple[str, BlockFormat], np.ndarray] = {}

    def get(self, name: str, fmt: BlockFormat) -> np.ndarray:
        key = (name, fmt)
        w = self._cache.get(key)
        if w is None:
            w = _quant32(self.ckpt.tensors[name], fmt)
            w.flags.writeable = False
            self._cache[key] = w
        return w


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise InvalidInput("token batch must be 2-D")
    if tokens.shape[1] < 2:
        raise InvalidInput("sequence length must be >= 2")
    if tokens.shape[1] > config.max_seq_len:
        raise InvalidInput(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InvalidInput("token id out of range")


def forward_logits(
    ckpt: Checkpoint,
    tokens,
    plan: Optional[QuantPlan] = None,
    *,
    weights: Optional[QuantizedWeights] = None,
    trace: Optional[dict] = None,
) -> np.ndarray:
    """Logits of shape ``(B, T, vocab)`` for a ``(B, T)`` token batch."""
    cfg = ckpt.config
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    _check_tokens(cfg, tok)
    if plan is not None and not plan.low_precision_sites:
        plan = None
    if weights is None:
        weights = QuantizedWeights(ckpt)
    T = ckpt.tensors
    B, S = tok.shape
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim

    def record(name, arr):
        if trace is not None:
            trace[name] = arr.shape

    last_input: list = [None, None]

    def linear(x, layer, name):
        tname = f"layers.{layer}.{name}"
        if plan is not None and plan.is_low(layer, name):
            w = weights.get(tname, plan.method)
            if plan.weight_and_activation:
                # q/k/v and gate/up read the same input; quantize it once.
                if last_input[0] is not x:
                    last_input[:] = [x, _quant32(x, plan.method)]
                x = last_input[1]
        else:
            w = T[tname]
        return x @ w.T

    cos, sin = _rope_tables(S, hd, cfg.rope_theta)
    mask = np.triu(np.full((S, S), -np.inf, dtype=np.float32), k=1)
    scale = np.float32(1.0 / np.sqrt(hd))

    h = T["embedding"][tok]
    record("embedding", h)
    for i in range(cfg.n_layers):
        x = _rms_norm(h, T[f"layers.{i}.attn_norm"])
        q = linear(x, i, "q").reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        k = linear(x, i, "k").reshape(B, S, KV, hd).transpose(0, 2, 1, 3)
        v = linear(x, i, "v").reshape(B, S, KV, hd).transpose(0, 2, 1, 3)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        record(f"layers.{i}.q_heads", q)
        record(f"layers.{i}.k_heads", k)
        record(f"layers.{i}.v_heads", v)
        # Query heads sharing a kv head are folded into the row axis.
        group = H // KV
        qg = (q * scale).reshape(B, KV, group * S, hd)
        scores = qg @ k.transpose(0, 1, 3, 2)
        scores = scores.reshape(B, KV, group, S, S)
        scores += mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores, out=scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        attn = (probs.reshape(B, KV, group * S, S) @ v).reshape(B, H, S, hd)
        probs = probs.reshape(B, H, S, S)
        record(f"layers.{i}.attn_probs", probs)
        attn = attn.transpose(0, 2, 1, 3).reshape(B, S, H * hd)
        record(f"layers.{i}.attn_out", attn)
        h = h + linear(attn, i, "o")
        x = _rms_norm(h, T[f"layers.{i}.ffn_norm"])
        gated = _silu(linear(x, i, "gate")) * linear(x, i, "up")
        record(f"layers.{i}.ffn_hidden", gated)
        h = h + linear(gated, i, "down")
        record(f"layers.{i}.residual", h)
    h = _rms_norm(h, T["final_norm"])
    logits = h @ T["head"].T
    record("logits", logits)
    return logits


def expected_trace_shapes(config: ModelConfig, batch: int, seq: int) -> dict[str, tuple[int, ...]]:
    H, KV, hd, d = config.n_heads, config.n_kv_heads, config.head_dim, config.model_dim
    shapes = {"embedding": (batch, seq, d)}
    for i in range(config.n_layers):
        shapes[f"layers.{i}.q_heads"] = (batch, H, seq, hd)
        shapes[f"layers.{i}.k_heads"] = (batch, KV, seq, hd)
        shapes[f"layers.{i}.v_heads"] = (batch, KV, seq, hd)
        shapes[f"layers.{i}.attn_probs"] = (batch, H, seq, seq)
        shapes[f"layers.{i}.attn_out"] = (batch, seq, H * hd)
        shapes[f"layers.{i}.ffn_hidden"] = (batch, seq, config.ffn_dim)
        shapes[f"layers.{i}.residual"] = (batch, seq, d)
    shapes["logits"] = (batch, seq, config.vocab_size)
    return shapes


def _cross_entropy_sum(logits: np.ndarray, tokens: np.ndarray) -> tuple[float, int]:
    # Next-token targets; per-position terms in float32, summed in float64.
    pred = logits[:, :-1, :]
    tgt = tokens[:, 1:]
    m = pred.max(axis=-1, keepdims=True)
    shifted = pred - m
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, tgt[..., None], axis=-1)[..., 0]
    nll = lse - picked
    return float(nll.sum(dtype=np.float64)), nll.size


def forward_loss(ckpt: Checkpoint, tokens, plan: Optional[QuantPlan] = None,
                 *, weights: Optional[QuantizedWeights] = None) -> float:
    """Mean next-token cross-entropy (nats/token) of one sequence or a batch of equal-length sequences."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    logits = forward_logits(ckpt, tok, plan, weights=weights)
    total, count = _cross_entropy_sum(logits, tok)
    return total / count


def chunk_tokens(tokens: Iterable[int], seq_len: int) -> np.ndarray:
    """Split a token stream into ``(n_chunks, seq_len)``; a short tail is dropped."""
    tok = np.asarray(list(tokens) if not isinstance(tokens, np.ndarray) else tokens, dtype=np.int64).reshape(-1)
    n = tok.size // seq_len
    if n == 0:
        raise InvalidInput(f"need at least {seq_len} tokens, got {tok.size}")
    return tok[: n * seq_len].reshape(n, seq_len)


def corpus_loss(ckpt: Checkpoint, tokens, plan: Optional[QuantPlan] = None,
                *, weights: Optional[QuantizedWeights] = None) -> float:
    """Mean next-token loss over a token stream cut into ``max_seq_len`` chunks."""
    return forward_loss(ckpt, chunk_tokens(tokens, ckpt.config.max_seq_len), plan, weights=weights)


class LossEvaluator:
    """Callable ``plan -> loss`` over a fixed checkpoint and token stream."""

    def __init__(self, ckpt: Checkpoint, tokens):
        self.ckpt = ckpt
        self.batch = chunk_tokens(tokens, ckpt.config.max_seq_len)
        self.weights = QuantizedWeights(ckpt)

    def __call__(self, plan: Optional[QuantPlan]) -> float:
        return forward_loss(self.ckpt, self.batch, plan, weights=self.weights)

    def tokens_digest(self) -> str:
        return tokens_digest(self.batch)


def tokens_digest(tokens) -> str:
    arr = np.asarray(tokens, dtype="<u4").reshape(-1)
    return hashlib.sha256(arr.tobytes()).hexdigest()
