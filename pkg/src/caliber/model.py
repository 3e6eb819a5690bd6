"""Frozen backbone + adapters + classification head.

``CaliberModel.forward`` evaluates a whole batch. Passing tape-bound
``Var`` parameters records the computation for backpropagation; passing
nothing evaluates with the model's own arrays as constants.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .adapters import (
    ATTENTION_VARIANTS,
    LATENT_VARIANTS,
    AdapterConfig,
    init_site,
)
from .backbone import BackboneConfig, FrozenBackbone, build_frozen_backbone, forward_with_adapters
from .crossmodal import attend, init_kv, init_projection, normalize_frames, pooled_frames, project_sequence
from .errors import ConfigError
from .numerics import Rng, Var, derive_seed
from .variational import PriorConfig, head_moments, kl_terms


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = BackboneConfig()
    adapter: AdapterConfig = AdapterConfig()
    prior: PriorConfig = PriorConfig()
    n_classes: int = 2
    d_a: int = 24
    c: int = 16
    d_c: int = 16
    att_heads: int = 2
    pa_hidden: int = 32
    audio_norm: bool = True
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        self.adapter.validate()
        self.prior.validate()
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.d_c % self.att_heads:
            raise ConfigError(f"d_c={self.d_c} not divisible by att_heads={self.att_heads}")
        if min(self.d_a, self.c, self.d_c, self.pa_hidden) < 1:
            raise ConfigError("d_a, c, d_c and pa_hidden must be positive")

    @property
    def sites(self) -> list[str]:
        return [f"L{ell}.{s}" for ell in range(self.backbone.L) for s in self.adapter.layers]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        adapter = dict(d.pop("adapter"))
        adapter["layers"] = tuple(adapter["layers"])
        return cls(
            backbone=BackboneConfig(**d.pop("backbone")),
            adapter=AdapterConfig(**adapter),
            prior=PriorConfig(**d.pop("prior")),
            **d,
        )


# ----------------------------------------------------------------------------
# Noise sources
# ----------------------------------------------------------------------------


class KeyedNoise:
    """Standard normals keyed by (seed, purpose, step, sample id).

    Each sample gets its own Philox stream and draws one block of shape
    (n_sites, T_x, r^2) for latent variants or (n_sites, r, k) for BLoB,
    sites in model order. Batch composition and padding never change a sample's
    noise. ``consumed`` counts variates actually used.
    """

    def __init__(self, seed: int, step: int = 0, purpose: str = "train"):
        self.seed, self.step, self.purpose = int(seed), int(step), purpose
        self.consumed = 0

    def draw(self, batch, sites, shape_for) -> dict[str, np.ndarray]:
        full = shape_for(batch.tokens.shape[1])
        out = np.zeros((len(sites), len(batch)) + full)
        for i, (sid, n) in enumerate(zip(batch.ids, batch.lengths)):
            rng = Rng(derive_seed(self.seed, self.purpose, self.step, int(sid)))
            shape = shape_for(int(n))
            block = rng.normal((len(sites),) + shape)
            self.consumed += block.size
            out[(slice(None), i) + tuple(slice(0, m) for m in shape)] = block
        return dict(zip(sites, out))


class ZeroNoise:
    """xi = 0 everywhere: the posterior-mean forward."""

    consumed = 0

    def draw(self, batch, sites, shape_for) -> dict[str, np.ndarray]:
        full = shape_for(batch.tokens.shape[1])
        return {s: np.zeros((len(batch),) + full) for s in sites}


@dataclass
class ModelOutput:
    logits: Var
    kl_sites: dict
    attention: dict = field(default_factory=dict)  # site -> (B, heads, T, S)
    moments: dict = field(default_factory=dict)  # site -> (mu, sigma) arrays (B, T, r^2)
    hidden: list = field(default_factory=list)
    pooled: Var | None = None


class CaliberModel:
    def __init__(self, config: ModelConfig, backbone: FrozenBackbone | None = None, params: dict | None = None):
        config.validate()
        self.config = config
        self.backbone = backbone if backbone is not None else build_frozen_backbone(config.backbone)
        self.params = params if params is not None else self.init_params()

    @property
    def variant(self) -> str:
        return self.config.adapter.variant

    def init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        bb, ad = cfg.backbone, cfg.adapter
        rng = Rng(derive_seed(cfg.seed, "init"))
        p = {
            "head.W": rng.child("head").normal((cfg.n_classes, bb.d)) / np.sqrt(bb.d),
            "head.b": np.zeros(cfg.n_classes),
        }
        if ad.variant in ("caliber_g",) + ATTENTION_VARIANTS:
            p.update(init_projection(rng.child("audio"), cfg.d_a, cfg.pa_hidden, cfg.c))
        if ad.variant == "caliber_x_shared":
            p.update(init_kv(rng.child("shared"), cfg.c, cfg.d_c, "shared.att"))
        for s in cfg.sites:
            p.update(init_site(rng, ad.variant, s, ad.r, bb.d, bb.k, cfg.c, cfg.d_c))
        return p

    def copy(self) -> "CaliberModel":
        return CaliberModel(self.config, self.backbone, {k: v.copy() for k, v in self.params.items()})

    def forward(self, batch, params=None, noise=None, n_total: int | None = None) -> ModelOutput:
        cfg = self.config
        P = params if params is not None else self.params
        noise = noise if noise is not None else ZeroNoise()
        variant, r, k = cfg.adapter.variant, cfg.adapter.r, cfg.backbone.k
        scale = cfg.adapter.scaling
        prior = cfg.prior
        sites = cfg.sites
        site_set = set(sites)
        tmask = batch.token_mask
        inv_len = 1.0 / batch.lengths.astype(np.float64)
        n_b, t = batch.tokens.shape

        if variant in LATENT_VARIANTS:
            xis = noise.draw(batch, sites, lambda n: (n, r * r))
        elif variant == "blob":
            xis = noise.draw(batch, sites, lambda n: (r, k))
        else:
            xis = {}

        audio_on = batch.has_audio.astype(np.float64)[:, None, None]
        fmask = batch.frame_mask | ~batch.has_audio[:, None]
        U = K = V = pooled_c = None
        frames = normalize_frames(batch.frames) if cfg.audio_norm else batch.frames
        if variant in ATTENTION_VARIANTS:
            U = project_sequence(frames, P)
            if variant == "caliber_x_shared":
                K, V = nx.matmul(U, P["shared.att.WK"]), nx.matmul(U, P["shared.att.WV"])
        elif variant == "caliber_g":
            pooled_c = project_sequence(pooled_frames(frames, batch.frame_mask), P)

        kl_sites, attention, moments = {}, {}, {}
        ones_t = np.ones((1, t, 1))

        def adapter_fn(ell: int, sub: str, x):
            name = f"L{ell}.{sub}"
            if name not in site_set:
                return None
            A, B = P[f"{name}.A"], P[f"{name}.B"]
            if variant == "blob":
                sigma = nx.vsoftplus(P[f"{name}.A_rho"]) * prior.epsilon + prior.delta
                A_draw = A + sigma * xis[name]
                z = nx.matmul(x, nx.swapaxes(A_draw, -1, -2))
                kl = kl_terms(A.reshape(1, -1), sigma.reshape(1, -1), prior.beta)
                share = 1.0 / (n_total if n_total else n_b)
                kl_sites[name] = kl * np.full(n_b, share)
                return nx.matmul(z, nx.swapaxes(B, 0, 1)) * scale
            z = nx.matmul(x, nx.swapaxes(A, 0, 1))
            if variant == "lora":
                return nx.matmul(z, nx.swapaxes(B, 0, 1)) * scale
            if variant == "clora":
                u = z
            elif variant == "caliber_g":
                g = nx.matmul(pooled_c, nx.swapaxes(P[f"{name}.ctx.W"], 0, 1)) + P[f"{name}.ctx.b"]
                u = g[:, None, :] * ones_t * audio_on
            else:
                kv = "shared.att" if variant == "caliber_x_shared" else f"{name}.att"
                u, w = attend(
                    z, U, P[f"{name}.att.WQ"], P[f"{kv}.WK"], P[f"{kv}.WV"], P[f"{name}.att.WO"],
                    fmask, cfg.att_heads, K, V,
                )
                u = u * audio_on
                attention[name] = w
            eta = nx.concat([z, u], axis=-1)
            mu, sigma = head_moments(
                eta, P[f"{name}.phi.W1"], P[f"{name}.phi.b1"], P[f"{name}.phi.W2"], P[f"{name}.phi.b2"], r, prior
            )
            moments[name] = (mu.value, sigma.value)
            E = (mu + sigma * xis[name]).reshape(n_b, t, r, r)
            Ez = nx.matmul(E, z.reshape(n_b, t, r, 1)).reshape(n_b, t, r)
            kl_tok = kl_terms(mu, sigma, prior.beta)
            kl_sites[name] = (kl_tok * tmask).sum(axis=1) * inv_len
            return nx.matmul(Ez, nx.swapaxes(B, 0, 1)) * scale

        fwd = forward_with_adapters(self.backbone, batch.tokens, tmask, P["head.W"], P["head.b"], adapter_fn)
        return ModelOutput(fwd.logits, kl_sites, attention, moments, fwd.hidden, fwd.pooled)

    def forward_frozen(self, batch) -> np.ndarray:
        """Logits with every adapter switched off (pure frozen backbone + head)."""
        fwd = forward_with_adapters(self.backbone, batch.tokens, batch.token_mask, self.params["head.W"], self.params["head.b"], None)
        return fwd.logits.value
