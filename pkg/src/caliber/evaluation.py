"""Monte Carlo prediction, ranking/calibration metrics and baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .adapters import ATTENTION_VARIANTS, cli_name
from .backbone import forward_with_adapters
from .crossmodal import AttentionRecord, pooled_frames
from .data import Dataset, collate, iter_batches
from .errors import InputError, MetricError
from .model import CaliberModel, KeyedNoise, ZeroNoise
from .numerics import GradTape, Rng, derive_seed


@dataclass
class PredictiveResult:
    probs: np.ndarray  # (N, C), MC-averaged
    entropy: np.ndarray  # (N,)
    draws: np.ndarray | None = None  # (M, N, C)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


@dataclass
class ReliabilityBins:
    edges: np.ndarray  # (bins + 1,)
    confidence: np.ndarray  # mean confidence per bin (nan when empty)
    accuracy: np.ndarray
    count: np.ndarray


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_mc(model: CaliberModel, data, M: int = 10, seed: int = 0, batch_size: int = 256,
               keep_draws: bool = False) -> PredictiveResult:
    """Posterior predictive by averaging ``M`` stochastic forwards.

    ``M = 0`` selects the deterministic posterior-mean forward (xi = 0).
    Draw ``m`` of sample ``i`` uses noise keyed by (seed, "predict", m, id).
    """
    if M < 0:
        raise MetricError("M must be >= 0")
    samples = list(data)
    probs, draws = [], []
    for lo in range(0, len(samples), batch_size):
        batch = collate(samples[lo:lo + batch_size])
        if M == 0:
            per = [_softmax(model.forward(batch, noise=ZeroNoise()).logits.value)]
        else:
            per = [_softmax(model.forward(batch, noise=KeyedNoise(seed, m, "predict")).logits.value) for m in range(M)]
        per = np.stack(per)
        probs.append(per.mean(axis=0))
        if keep_draws:
            draws.append(per)
    p = np.concatenate(probs) if probs else np.zeros((0, model.config.n_classes))
    return PredictiveResult(p, entropy(p), np.concatenate(draws, axis=1) if keep_draws else None)


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_multiclass(probs: np.ndarray, labels) -> float:
    """Binary AUC on class-1 probability, else one-vs-rest macro average."""
    probs, labels = np.asarray(probs), np.asarray(labels)
    if probs.shape[1] == 2:
        return auc(probs[:, 1], labels == 1)
    return float(np.mean([auc(probs[:, c], labels == c) for c in range(probs.shape[1]) if 0 < (labels == c).sum() < len(labels)]))


def ece(probs: np.ndarray, labels, bins: int = 10) -> tuple[float, ReliabilityBins]:
    """Equal-width-bin expected calibration error of the max-probability prediction."""
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    if len(labels) == 0:
        raise MetricError("ECE of an empty prediction set")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = conf_sum / count
        mean_acc = acc_sum / count
    nonempty = count > 0
    value = float(np.sum(count[nonempty] / len(labels) * np.abs(mean_acc[nonempty] - mean_conf[nonempty])))
    return value, ReliabilityBins(edges, mean_conf, mean_acc, count)


def nll(probs: np.ndarray, labels) -> float:
    p = np.asarray(probs)[np.arange(len(labels)), np.asarray(labels)]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


@dataclass
class EntropySplit:
    mean_correct: float
    mean_incorrect: float
    edges: np.ndarray
    hist_correct: np.ndarray
    hist_incorrect: np.ndarray


def entropy_split(results: PredictiveResult, labels, bins: int = 10) -> EntropySplit:
    labels = np.asarray(labels)
    right = results.predictions == labels
    if right.all() or not right.any():
        raise MetricError("entropy split needs at least one correct and one incorrect prediction")
    c = results.probs.shape[1]
    edges = np.linspace(0.0, np.log(c), bins + 1)
    h_ok, _ = np.histogram(results.entropy[right], bins=edges)
    h_bad, _ = np.histogram(results.entropy[~right], bins=edges)
    return EntropySplit(
        float(results.entropy[right].mean()),
        float(results.entropy[~right].mean()),
        edges,
        h_ok,
        h_bad,
    )


def metrics_report(variant: str, seed: int, results: PredictiveResult, labels) -> dict:
    labels = np.asarray(labels)
    value, _ = ece(results.probs, labels)
    try:
        split = entropy_split(results, labels)
        ent_ok, ent_bad = split.mean_correct, split.mean_incorrect
    except MetricError:
        ent_ok = ent_bad = None
    return {
        "variant": cli_name(variant),
        "seed": int(seed),
        "auc": auc_multiclass(results.probs, labels),
        "ece": value,
        "mean_entropy_correct": ent_ok,
        "mean_entropy_incorrect": ent_bad,
        "nll": nll(results.probs, labels),
    }


def write_report(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_reliability_csv(path: str, rb: ReliabilityBins) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["bin_low", "bin_high", "confidence", "accuracy", "count"])
        for i in range(len(rb.count)):
            out.writerow([repr(float(rb.edges[i])), repr(float(rb.edges[i + 1])),
                          "" if rb.count[i] == 0 else repr(float(rb.confidence[i])),
                          "" if rb.count[i] == 0 else repr(float(rb.accuracy[i])), int(rb.count[i])])


def write_entropy_csv(path: str, split: EntropySplit) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["bin_low", "bin_high", "group", "count"])
        for group, hist in (("correct", split.hist_correct), ("incorrect", split.hist_incorrect)):
            for i, n in enumerate(hist):
                out.writerow([repr(float(split.edges[i])), repr(float(split.edges[i + 1])), group, int(n)])


# ----------------------------------------------------------------------------
# Attention export
# ----------------------------------------------------------------------------


def attention_record(model: CaliberModel, sample) -> AttentionRecord:
    """Head-averaged posterior-mean attention of one sample, per adapted layer."""
    if model.variant not in ATTENTION_VARIANTS:
        raise InputError(f"variant {cli_name(model.variant)} has no cross-attention to export")
    out = model.forward(collate([sample]), noise=ZeroNoise())
    tx, ta = len(sample.tokens), sample.frames.shape[0]
    return AttentionRecord({name: w[0].mean(axis=0)[:tx, :ta] for name, w in out.attention.items()})


def window_attention_mass(model: CaliberModel, data, batch_size: int = 256) -> np.ndarray:
    """Per-sample attention mass on the label-carrying frame window,
    averaged over valid tokens, adapted layers and heads."""
    if model.variant not in ATTENTION_VARIANTS:
        raise InputError(f"variant {cli_name(model.variant)} has no cross-attention")
    samples = list(data)
    mass = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        out = model.forward(collate(chunk), noise=ZeroNoise())
        w = np.mean([a.mean(axis=1) for a in out.attention.values()], axis=0)  # (B, T, S)
        for row, s in zip(w, chunk):
            start, length = s.window
            mass.append(row[: len(s.tokens), start:start + length].sum(axis=1).mean())
    return np.asarray(mass)


# ----------------------------------------------------------------------------
# Transfer-fusion baseline
# ----------------------------------------------------------------------------


def pooled_features(model: CaliberModel, data, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooled frozen text states and mean-pooled audio frames."""
    text, audio = [], []
    for batch in iter_batches(data, batch_size):
        fwd = forward_with_adapters(model.backbone, batch.tokens, batch.token_mask,
                                    model.params["head.W"], model.params["head.b"], None)
        text.append(fwd.pooled.value)
        audio.append(pooled_frames(batch.frames, batch.frame_mask))
    return np.concatenate(text), np.concatenate(audio)


def transfer_head_param_count(d_in: int, n_classes: int) -> int:
    return 32 * d_in + 32 + 16 * 32 + 16 + n_classes * 16 + n_classes


def init_transfer_head(d_in: int, n_classes: int, seed: int) -> dict:
    rng = Rng(derive_seed(seed, "transfer"))
    dims = [d_in, 32, 16, n_classes]
    p = {}
    for i in range(3):
        p[f"W{i}"] = rng.child(i).normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i])
        p[f"b{i}"] = np.zeros(dims[i + 1])
    return p


def transfer_logits(P: dict, x):
    h = x
    for i in range(3):
        h = nx.matmul(h, nx.swapaxes(P[f"W{i}"], 0, 1)) + P[f"b{i}"]
        if i < 2:
            h = nx.relu(h)
    return h


def transfer_baseline(text: np.ndarray, audio: np.ndarray, labels, train_idx, test_idx, n_classes: int = 2,
                      epochs: int = 50, lr: float = 1e-3, weight_decay: float = 1e-3, batch_size: int = 32,
                      seed: int = 0) -> float:
    """Concatenate pooled embeddings, fit a 32-16-softmax MLP with AdamW
    on the train split, return held-out AUC."""
    from .training import adamw_step, AdamWState

    x = np.concatenate([np.asarray(text), np.asarray(audio)], axis=1)
    y = np.asarray(labels)
    train_idx, test_idx = np.asarray(train_idx), np.asarray(test_idx)
    P = init_transfer_head(x.shape[1], n_classes, seed)
    state = AdamWState()
    for epoch in range(epochs):
        order = train_idx[Rng(derive_seed(seed, "transfer-epoch", epoch)).permutation(len(train_idx))]
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            tape = GradTape()
            V = tape.bind(P)
            logp = nx.log_softmax(transfer_logits(V, x[idx]), axis=-1)
            loss = -logp[np.arange(len(idx)), y[idx]].sum()
            adamw_step(P, tape.backward(loss), state, lr, weight_decay)
    probs = _softmax(transfer_logits(P, x[test_idx]).value)
    return auc_multiclass(probs, y[test_idx])
