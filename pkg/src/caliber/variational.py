"""Context-conditioned Gaussian posterior over the r x r adapter latent.

vec/reshape is row-major throughout. The inference head is a
2r -> 4r (tanh) -> 2r^2 perceptron whose first r^2 outputs are the
posterior mean and the rest the raw log-variance, mapped to a standard
deviation by ``eps * softplus(raw) + delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError, DomainError, NumericError
from .numerics import Rng, Var


@dataclass(frozen=True)
class PriorConfig:
    beta: float = 0.2
    gamma: float = 0.008
    epsilon: float = 0.05
    delta: float = 1e-6

    def validate(self) -> None:
        if self.beta <= 0 or self.epsilon <= 0 or self.delta <= 0:
            raise DomainError("beta, epsilon and delta must be positive")
        if self.gamma < 0:
            raise DomainError("gamma must be nonnegative")


@dataclass
class PosteriorMoments:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class ElboBreakdown:
    log_likelihood: float
    kl_per_layer: dict[str, float]
    total: float
    per_sample_ll: np.ndarray = field(default=None, repr=False)


def init_inference_head(rng: Rng, r: int, prefix: str) -> dict:
    """Hidden layer random; output layer all zero so mu = 0 and raw log v = 0."""
    return {
        f"{prefix}.W1": rng.child("W1").normal((4 * r, 2 * r)) / np.sqrt(2 * r),
        f"{prefix}.b1": np.zeros(4 * r),
        f"{prefix}.W2": np.zeros((2 * r * r, 4 * r)),
        f"{prefix}.b2": np.zeros(2 * r * r),
    }


def context_summary(z_t, u_ctx) -> np.ndarray:
    z_t, u_ctx = np.asarray(z_t, dtype=np.float64), np.asarray(u_ctx, dtype=np.float64)
    if z_t.shape != u_ctx.shape:
        raise DimensionError(f"z and context lengths differ: {z_t.shape} vs {u_ctx.shape}")
    return np.concatenate([z_t, u_ctx], axis=-1)


def head_moments(eta, W1, b1, W2, b2, r: int, prior: PriorConfig):
    """Batched mean and std of vec(E) from ``eta`` (..., 2r)."""
    hid = nx.tanh(nx.matmul(eta, nx.swapaxes(W1, 0, 1)) + b1)
    out = nx.matmul(hid, nx.swapaxes(W2, 0, 1)) + b2
    r2 = r * r
    mu = out[..., :r2]
    sigma = nx.vsoftplus(out[..., r2:]) * prior.epsilon + prior.delta
    return mu, sigma


def posterior_params(eta, head: dict, prior: PriorConfig = PriorConfig()) -> PosteriorMoments:
    """``head`` holds arrays under keys W1, b1, W2, b2."""
    eta = np.asarray(eta, dtype=np.float64)
    r = eta.shape[-1] // 2
    if eta.shape[-1] != 2 * r or head["W1"].shape[1] != 2 * r:
        raise DimensionError(f"summary width {eta.shape[-1]} does not match head input {head['W1'].shape[1]}")
    mu, sigma = head_moments(eta[None], head["W1"], head["b1"], head["W2"], head["b2"], r, prior)
    if not (np.all(np.isfinite(mu.value)) and np.all(np.isfinite(sigma.value))):
        raise NumericError("inference head produced a non-finite output")
    return PosteriorMoments(mu.value[0], sigma.value[0])


def sample_latent(moments: PosteriorMoments, xi) -> np.ndarray:
    """Reparameterised ``E = reshape(mu + sigma * xi)``; pass ``Rng`` or frozen noise."""
    mu, sigma = np.asarray(moments.mu), np.asarray(moments.sigma)
    if isinstance(xi, Rng):
        xi = xi.normal(mu.shape)
    r = int(round(np.sqrt(mu.shape[-1])))
    if r * r != mu.shape[-1]:
        raise DimensionError(f"mean length {mu.shape[-1]} is not a square")
    return (mu + sigma * np.asarray(xi)).reshape(mu.shape[:-1] + (r, r))


def kl_to_prior(moments: PosteriorMoments, beta: float) -> float:
    """KL(N(mu, diag sigma^2) || N(0, beta^2 I)), closed form."""
    mu, sigma = np.asarray(moments.mu, dtype=np.float64), np.asarray(moments.sigma, dtype=np.float64)
    if beta <= 0 or np.any(sigma <= 0):
        raise DomainError("KL needs sigma > 0 and beta > 0")
    return float(np.sum(np.log(beta / sigma) + (sigma**2 + mu**2) / (2 * beta**2) - 0.5))


def kl_terms(mu, sigma, beta: float) -> Var:
    """Batched closed-form KL summed over the last axis."""
    quad = (nx.square(sigma) + nx.square(mu)) * (1.0 / (2.0 * beta * beta))
    return (quad - nx.log(sigma)).sum(axis=-1) + mu.shape[-1] * (np.log(beta) - 0.5)


def blob_posterior_sample(mu_A, sigma_A, xi) -> np.ndarray:
    """Mean-field draw of the whole A factor (input independent)."""
    mu_A, sigma_A = np.asarray(mu_A, dtype=np.float64), np.asarray(sigma_A, dtype=np.float64)
    if isinstance(xi, Rng):
        xi = xi.normal(mu_A.shape)
    return mu_A + sigma_A * np.asarray(xi)


def elbo_terms(batch, model, prior: PriorConfig, noise, params=None, n_total: int | None = None):
    """Single-draw ELBO over a batch, summed over samples.

    Returns ``(breakdown, total, log_likelihood)``; the last two are tape
    variables when ``params`` are. ``n_total`` is the training-set size,
    used to spread input-independent KL terms over minibatches.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    out = model.forward(batch, params, noise, n_total=n_total)
    logp = nx.log_softmax(out.logits, axis=-1)
    picked = logp[np.arange(len(batch)), batch.labels]
    ll = picked.sum()
    total = ll
    kl = {}
    for site, k in out.kl_sites.items():
        ks = k.sum()
        kl[site] = float(ks.value)
        total = total - ks * prior.gamma
    breakdown = ElboBreakdown(float(ll.value), kl, float(total.value), picked.value.copy())
    return breakdown, total, ll


def elbo(batch, model, prior: PriorConfig, noise, params=None, n_total: int | None = None) -> ElboBreakdown:
    return elbo_terms(batch, model, prior, noise, params, n_total)[0]
