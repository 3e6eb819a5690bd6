"""Audio projection and token-level text-to-audio cross-attention.

Orientation follows the usual row-vector batch layout:

* ``P_a``: ``tanh(a @ W1.T + b1) @ W2.T + b2``, d_a -> hidden -> c
* ``K = U @ W_K``, ``V = U @ W_V`` with ``W_K, W_V`` of shape (c, d_c)
* ``q = z @ W_Q.T`` with ``W_Q`` of shape (d_c, r)
* ``u~ = attn_out @ W_O.T`` with ``W_O`` of shape (r, d_c)

With several heads, d_c is split evenly across heads; logits of every
head are scaled by ``1/sqrt(d_c)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContextError, DimensionError
from .numerics import Rng, Var


@dataclass
class AudioFrames:
    frames: np.ndarray  # (T_a, d_a)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DimensionError("audio frames must be a nonempty (T_a, d_a) matrix")
        if self.mask is None:
            self.mask = np.ones(self.frames.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def T_a(self):
        return self.frames.shape[0]

    @property
    def d_a(self):
        return self.frames.shape[1]


def init_projection(rng: Rng, d_a: int, hidden: int, c: int, prefix: str = "audio") -> dict:
    return {
        f"{prefix}.W1": rng.child("W1").normal((hidden, d_a)) / np.sqrt(d_a),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.W2": rng.child("W2").normal((c, hidden)) / np.sqrt(hidden),
        f"{prefix}.b2": np.zeros(c),
    }


def init_attention(rng: Rng, r: int, c: int, d_c: int, prefix: str, with_kv: bool = True) -> dict:
    p = {
        f"{prefix}.WQ": rng.child("WQ").normal((d_c, r)) / np.sqrt(r),
        f"{prefix}.WO": rng.child("WO").normal((r, d_c)) / np.sqrt(d_c),
    }
    if with_kv:
        p.update(init_kv(rng, c, d_c, prefix))
    return p


def init_kv(rng: Rng, c: int, d_c: int, prefix: str) -> dict:
    return {
        f"{prefix}.WK": rng.child("WK").normal((c, d_c)) / np.sqrt(c),
        f"{prefix}.WV": rng.child("WV").normal((c, d_c)) / np.sqrt(c),
    }


def mlp_project(x, W1, b1, W2, b2):
    """Two-layer tanh perceptron applied along the last axis."""
    return nx.matmul(nx.tanh(nx.matmul(x, nx.swapaxes(W1, 0, 1)) + b1), nx.swapaxes(W2, 0, 1)) + b2


def _cols(W) -> int:
    return (W.value if isinstance(W, Var) else np.asarray(W)).shape[-1]


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Affine-free per-frame standardisation over the embedding axis (zero frames stay zero)."""
    return nx.layer_norm(np.asarray(frames, dtype=np.float64)).value


def project_sequence(frames, P: dict, prefix: str = "audio") -> Var:
    """Batched ``U = P_a(frames)``; ``frames`` is (..., T_a, d_a)."""
    fv = frames.value if isinstance(frames, Var) else np.asarray(frames)
    if fv.shape[-1] != _cols(P[f"{prefix}.W1"]):
        raise DimensionError(f"frame width {fv.shape[-1]} != projection input {_cols(P[f'{prefix}.W1'])}")
    return mlp_project(frames, P[f"{prefix}.W1"], P[f"{prefix}.b1"], P[f"{prefix}.W2"], P[f"{prefix}.b2"])


def attend(z, U, WQ, WK, WV, WO, frame_mask: np.ndarray, heads: int, K=None, V=None):
    """Batched cross-attention.

    z: (B, T, r); U: (B, S, c); frame_mask: (B, S) bool with at least one
    valid frame per row. Returns (context (B, T, r), weights (B, heads, T, S)).
    """
    if K is None:
        K = nx.matmul(U, WK)
    if V is None:
        V = nx.matmul(U, WV)
    q = nx.matmul(z, nx.swapaxes(WQ, 0, 1))
    b, t, d_c = q.shape
    s = K.shape[1]
    if d_c % heads:
        raise DimensionError(f"d_c={d_c} not divisible by heads={heads}")
    dh = d_c // heads
    qh = nx.transpose(q.reshape(b, t, heads, dh), (0, 2, 1, 3))
    kh = nx.transpose(K.reshape(b, s, heads, dh), (0, 2, 3, 1))
    vh = nx.transpose(V.reshape(b, s, heads, dh), (0, 2, 1, 3))
    scores = nx.matmul(qh, kh) * (1.0 / np.sqrt(d_c))
    att = nx.softmax(scores, axis=-1, mask=frame_mask[:, None, None, :])
    out = nx.transpose(nx.matmul(att, vh), (0, 2, 1, 3)).reshape(b, t, d_c)
    return nx.matmul(out, nx.swapaxes(WO, 0, 1)), att.value


def pooled_frames(frames: np.ndarray, frame_mask: np.ndarray) -> np.ndarray:
    """Mean of valid frames, (B, S, d_a) -> (B, d_a); rows without audio give 0."""
    m = frame_mask[..., None].astype(np.float64)
    return (frames * m).sum(axis=1) / np.maximum(m.sum(axis=1), 1.0)


def global_context(frames: np.ndarray, frame_mask: np.ndarray, P: dict, W_map, b_map) -> Var:
    """Pool frames, project to c, map to r: (B, S, d_a) -> (B, r)."""
    pooled = project_sequence(pooled_frames(frames, frame_mask), P)
    return nx.matmul(pooled, nx.swapaxes(W_map, 0, 1)) + b_map


# ----------------------------------------------------------------------------
# Single-sample API
# ----------------------------------------------------------------------------


def project_audio(audio: AudioFrames, P: dict) -> np.ndarray:
    """U(x) for one sample; masked frames come back as zero rows."""
    U = project_sequence(audio.frames, P).value
    return np.where(audio.mask[:, None], U, 0.0)


def cross_attention_context(z_t, U, layer: dict, mask=None, heads: int = 1):
    """One token's audio context ``u~_t`` and its attention row.

    ``layer`` holds arrays under keys WQ, WK, WV, WO.
    """
    z_t = np.asarray(z_t, dtype=np.float64).reshape(1, 1, -1)
    U = np.asarray(U, dtype=np.float64)
    mask = np.ones(U.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if U.shape[0] == 0 or not mask.any():
        raise ContextError("no unmasked audio frame to attend to")
    ctx, w = attend(z_t, U[None], layer["WQ"], layer["WK"], layer["WV"], layer["WO"], mask[None], heads)
    return ctx.value[0, 0], w[0, :, 0, :].mean(axis=0)


def global_audio_context(audio: AudioFrames, P: dict, maps: dict) -> dict:
    """Per-layer context for the global variant; ``maps`` is
    ``{name: (W (r, c), b (r,))}``."""
    if not audio.mask.any():
        raise ContextError("no unmasked audio frame to pool")
    f, m = audio.frames[None], audio.mask[None]
    return {name: global_context(f, m, P, W, b).value[0] for name, (W, b) in maps.items()}


@dataclass
class AttentionRecord:
    """Head-averaged attention weights per adapted layer for one sample."""

    weights: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (T_x, T_a)

    def rows(self):
        for layer, w in self.weights.items():
            for t in range(w.shape[0]):
                for s in range(w.shape[1]):
                    yield layer, t, s, float(w[t, s])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["layer", "token_index", "frame_index", "weight"])
            for layer, t, s, w in self.rows():
                out.writerow([layer, t, s, repr(w)])
