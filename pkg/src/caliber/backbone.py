"""Frozen toy transformer text encoder with adapter injection points.

Each layer is pre-norm: ``a = LN(h)``; multi-head self-attention over
``a`` (queries/keys/values ``W a``), residual add; then a tanh MLP block
with its own residual. The adapted sublayers are the attention
projections named in ``ADAPTABLE`` ("q", "k", "v", "o"); their input
``a`` is the hidden state ``x_t^{l-1}`` that adapters see.

Frozen weights are plain read-only arrays. They never enter a tape
registry, so they cannot receive adjoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Rng, Var, derive_seed

ADAPTABLE = ("q", "k", "v", "o")

# adapter_fn(layer, site, x) -> delta or None; x is (B, T, k)
AdapterFn = Callable[[int, str, Var], Optional[Var]]


@dataclass(frozen=True)
class BackboneConfig:
    L: int = 2
    d: int = 32
    k: int = 32
    T_x_max: int = 32
    vocab: int = 64
    heads: int = 2
    seed: int = 0
    mlp_ratio: int = 2
    shared_offset: float = 1.0  # scale of the embedding offset common to every token

    def validate(self) -> None:
        if self.L < 1:
            raise ConfigError(f"backbone needs L >= 1, got {self.L}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.k != self.d:
            raise ConfigError("adapted attention projections take width-d input; k must equal d")
        if self.vocab < 1 or self.T_x_max < 1 or self.mlp_ratio < 1:
            raise ConfigError("vocab, T_x_max and mlp_ratio must be positive")
        if self.shared_offset < 0:
            raise ConfigError("shared_offset must be >= 0")


class FrozenBackbone:
    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = weights
        for w in weights.values():
            w.flags.writeable = False

    def trainable_parameter_count(self) -> int:
        return 0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def layer(self, ell: int, name: str) -> np.ndarray:
        return self.weights[f"layer{ell}.{name}"]


def build_frozen_backbone(config: BackboneConfig) -> FrozenBackbone:
    config.validate()
    rng = Rng(derive_seed(config.seed, "backbone"))
    d, f = config.d, config.d * config.mlp_ratio
    w = {
        "tok_emb": rng.normal((config.vocab, d)),
        "pos_emb": 0.1 * rng.normal((config.T_x_max, d)),
        "emb_offset": config.shared_offset * rng.child("offset").normal(d),
    }
    for ell in range(config.L):
        for site in ADAPTABLE:
            w[f"layer{ell}.W{site}"] = rng.normal((d, d)) / np.sqrt(d)
        w[f"layer{ell}.W1"] = rng.normal((f, d)) / np.sqrt(d)
        w[f"layer{ell}.W2"] = rng.normal((d, f)) / np.sqrt(f)
    return FrozenBackbone(config, w)


@dataclass
class ForwardOutput:
    hidden: list  # per layer, (B, T, k) arrays: the adapters' inputs x^{l-1}
    pooled: Var  # (B, d)
    logits: Var  # (B, C)


def _split_heads(x: Var, heads: int) -> Var:
    b, t, d = x.shape
    return nx.transpose(x.reshape(b, t, heads, d // heads), (0, 2, 1, 3))


def _merge_heads(x: Var) -> Var:
    b, h, t, dh = x.shape
    return nx.transpose(x, (0, 2, 1, 3)).reshape(b, t, h * dh)


def _projection(x, W: np.ndarray, ell: int, site: str, adapter_fn: AdapterFn | None):
    h = nx.matmul(x, W.T)
    if adapter_fn is None:
        return h
    delta = adapter_fn(ell, site, x)
    if delta is None:
        return h
    if delta.shape != h.shape:
        raise DimensionError(f"adapter delta {delta.shape} does not match sublayer output {h.shape}")
    return h + delta


def forward_with_adapters(
    backbone: FrozenBackbone,
    tokens: np.ndarray,
    token_mask: np.ndarray,
    head_W,
    head_b,
    adapter_fn: AdapterFn | None = None,
) -> ForwardOutput:
    """Run the frozen encoder, adding adapter deltas at the attention
    projections, then mean-pool valid tokens into the linear head."""
    cfg = backbone.config
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    if t > cfg.T_x_max:
        raise DimensionError(f"sequence length {t} exceeds T_x_max={cfg.T_x_max}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise DimensionError("token id outside vocabulary")
    mask = np.asarray(token_mask, dtype=bool)
    w = backbone.weights
    h = nx.const(w["tok_emb"][tokens] + w["pos_emb"][:t] + w["emb_offset"])
    key_mask = mask[:, None, None, :]
    scale = 1.0 / np.sqrt(cfg.d // cfg.heads)
    hidden = []
    for ell in range(cfg.L):
        a = nx.layer_norm(h)
        hidden.append(a.value)
        q = _projection(a, backbone.layer(ell, "Wq"), ell, "q", adapter_fn)
        k = _projection(a, backbone.layer(ell, "Wk"), ell, "k", adapter_fn)
        v = _projection(a, backbone.layer(ell, "Wv"), ell, "v", adapter_fn)
        qh, kh, vh = (_split_heads(x, cfg.heads) for x in (q, k, v))
        att = nx.softmax(nx.matmul(qh, kh.T) * scale, axis=-1, mask=key_mask)
        ctx = _merge_heads(nx.matmul(att, vh))
        h = h + _projection(ctx, backbone.layer(ell, "Wo"), ell, "o", adapter_fn)
        m = nx.layer_norm(h)
        h = h + nx.matmul(nx.tanh(nx.matmul(m, backbone.layer(ell, "W1").T)), backbone.layer(ell, "W2").T)
    fm = mask[..., None].astype(np.float64)
    pooled = (nx.layer_norm(h) * fm).sum(axis=1) * (1.0 / fm.sum(axis=1))
    logits = nx.matmul(pooled, nx.swapaxes(head_W, 0, 1) if isinstance(head_W, Var) else np.asarray(head_W).T) + head_b
    return ForwardOutput(hidden, pooled, logits)
