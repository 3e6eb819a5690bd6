"""Low-rank adapter variants and their parameter layout.

Variants (CLI names in parentheses):

* ``lora``: deterministic ``(alpha/r) B A x``
* ``blob``: mean-field Gaussian over A, B deterministic
* ``clora``: latent E conditioned on the low-rank feature only
* ``caliber_g`` (caliber-g): E conditioned on a pooled audio embedding
* ``caliber_x`` (caliber-x): E conditioned on token-level cross-attention
* ``caliber_x_shared`` (caliber-x-shared): as caliber_x, one W_K/W_V for all layers

Every adapted sublayer ("site") owns its A, B and, where relevant, its
inference head, query/output maps or global context map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import crossmodal
from .errors import ConfigError, DimensionError, InputError
from .numerics import Rng
from .variational import context_summary, init_inference_head

VARIANTS = ("lora", "blob", "clora", "caliber_g", "caliber_x", "caliber_x_shared")
LATENT_VARIANTS = ("clora", "caliber_g", "caliber_x", "caliber_x_shared")
CALIBER_VARIANTS = ("caliber_g", "caliber_x", "caliber_x_shared")
ATTENTION_VARIANTS = ("caliber_x", "caliber_x_shared")
AUDIO_VARIANTS = CALIBER_VARIANTS


def canonical_variant(name: str) -> str:
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(cli_name(x) for x in VARIANTS)}")
    return v


def cli_name(variant: str) -> str:
    return variant.replace("_", "-")


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "caliber_x"
    r: int = 8
    alpha: float = 32.0
    layers: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self) -> None:
        if self.r < 1:
            raise ConfigError("adapter rank r must be >= 1")
        if not self.layers:
            raise ConfigError("at least one adapted sublayer is required")
        for s in self.layers:
            if s not in ("q", "k", "v", "o"):
                raise ConfigError(f"cannot adapt sublayer {s!r}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


@dataclass
class LowRankPair:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)


def init_pair(rng: Rng, r: int, d: int, k: int) -> LowRankPair:
    return LowRankPair(rng.child("A").normal((r, k)) / np.sqrt(k), np.zeros((d, r)))


def local_feature(x_t, A) -> np.ndarray:
    x_t, A = np.asarray(x_t, dtype=np.float64), np.asarray(A, dtype=np.float64)
    if A.shape[1] != x_t.shape[-1]:
        raise DimensionError(f"A has {A.shape[1]} columns, input has {x_t.shape[-1]}")
    return A @ x_t


def adapter_delta(x_t, pair: LowRankPair, E=None, alpha: float = 32.0) -> np.ndarray:
    """``(alpha / r) B E A x``; ``E=None`` is the plain LoRA path."""
    z = local_feature(x_t, pair.A)
    r = pair.A.shape[0]
    if pair.B.shape[1] != r:
        raise DimensionError(f"B has {pair.B.shape[1]} columns, rank is {r}")
    if E is not None:
        E = np.asarray(E, dtype=np.float64)
        if E.shape != (r, r):
            raise DimensionError(f"E must be {r}x{r}, got {E.shape}")
        z = E @ z
    return (alpha / r) * (pair.B @ z)


def context_for_variant(variant: str, z_t, frames=None, params: dict | None = None, site: str = "", heads: int = 2,
                        audio_norm: bool = True):
    """Conditioning summary for one token: None, [z; z], or [z; u~].

    ``params`` maps names to arrays; for the audio variants ``frames`` is
    an ``AudioFrames``, standardised per frame first when ``audio_norm``.
    """
    variant = canonical_variant(variant)
    z_t = np.asarray(z_t, dtype=np.float64)
    if variant in ("lora", "blob"):
        return None
    if variant == "clora":
        return context_summary(z_t, z_t)
    if frames is None:
        raise InputError(f"variant {cli_name(variant)} needs audio frames")
    if audio_norm:
        frames = crossmodal.AudioFrames(crossmodal.normalize_frames(frames.frames), frames.mask)
    if variant == "caliber_g":
        maps = {site: (params[f"{site}.ctx.W"], params[f"{site}.ctx.b"])}
        u = crossmodal.global_audio_context(frames, params, maps)[site]
    else:
        U = crossmodal.project_audio(frames, params)
        kv = "shared.att" if variant == "caliber_x_shared" else f"{site}.att"
        layer = {
            "WQ": params[f"{site}.att.WQ"],
            "WO": params[f"{site}.att.WO"],
            "WK": params[f"{kv}.WK"],
            "WV": params[f"{kv}.WV"],
        }
        u, _ = crossmodal.cross_attention_context(z_t, U, layer, frames.mask, heads)
    return context_summary(z_t, u)


def init_site(rng: Rng, variant: str, site: str, r: int, d: int, k: int, c: int, d_c: int) -> dict:
    pair = init_pair(rng.child(site, "pair"), r, d, k)
    p = {f"{site}.A": pair.A, f"{site}.B": pair.B}
    if variant == "blob":
        p[f"{site}.A_rho"] = np.zeros((r, k))
    if variant in LATENT_VARIANTS:
        p.update(init_inference_head(rng.child(site, "phi"), r, f"{site}.phi"))
    if variant == "caliber_g":
        p[f"{site}.ctx.W"] = rng.child(site, "ctx").normal((r, c)) / np.sqrt(c)
        p[f"{site}.ctx.b"] = np.zeros(r)
    if variant in ATTENTION_VARIANTS:
        p.update(crossmodal.init_attention(rng.child(site, "att"), r, c, d_c, f"{site}.att", with_kv=variant == "caliber_x"))
    return p


def expected_param_count(variant: str, n_sites: int, r: int, d: int, k: int, n_classes: int,
                         d_a: int = 24, pa_hidden: int = 32, c: int = 16, d_c: int = 16) -> int:
    """Closed-form trainable-parameter count."""
    variant = canonical_variant(variant)
    per_site = r * (d + k)
    if variant == "blob":
        per_site += r * k
    if variant in LATENT_VARIANTS:
        per_site += (2 * r * 4 * r + 4 * r) + (4 * r * 2 * r * r + 2 * r * r)
    shared = d * n_classes + n_classes
    if variant in AUDIO_VARIANTS:
        shared += d_a * pa_hidden + pa_hidden + pa_hidden * c + c
    if variant == "caliber_g":
        per_site += c * r + r
    if variant in ATTENTION_VARIANTS:
        per_site += 2 * r * d_c
    if variant == "caliber_x":
        per_site += 2 * c * d_c
    if variant == "caliber_x_shared":
        shared += 2 * c * d_c
    return shared + n_sites * per_site


def trainable_param_count(model) -> int:
    """Count by walking the tape registry the model's parameters bind to."""
    from .numerics import GradTape

    tape = GradTape()
    tape.bind(model.params)
    return sum(v.value.size for v in tape.params.values())
