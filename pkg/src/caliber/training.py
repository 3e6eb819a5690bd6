"""Minibatch ELBO ascent with AdamW, config files and checkpoints.

Config files are flat ``key = value`` lines (``#`` starts a comment).
Keys are the ``TrainConfig`` fields, with nested configs addressed by a
dotted prefix, e.g. ``prior.gamma = 0.008`` or ``adapter.variant =
caliber-x``. Model architecture keys live under ``model.`` and
``backbone.``.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"CALCKPT\\0"
    4 bytes   format version (uint32)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header: configs, step, config hash, parameter
              names/shapes, loss trace
    rest      float64 LE: every parameter, then AdamW first moments, then
              second moments, each in header order
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterConfig
from .backbone import BackboneConfig
from .data import Dataset, collate
from .errors import ConfigError, FormatError, TrainingError
from .model import CaliberModel, KeyedNoise, ModelConfig
from .numerics import GradTape, Rng, derive_seed
from .variational import PriorConfig, elbo_terms

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CALCKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    prior: PriorConfig = PriorConfig()
    adapter: AdapterConfig = AdapterConfig()
    clip_norm: float = 0.0  # 0 disables clipping
    objective: str = "elbo"  # "elbo" or "mle" (log-likelihood only)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.objective not in ("elbo", "mle"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        self.prior.validate()
        self.adapter.validate()


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One AdamW update in place; returns ``params``."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at optimizer step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p -= lr * update + lr * weight_decay * p
    return params


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CaliberModel
    loss_trace: list  # per-epoch negative objective, averaged per sample
    state: AdamWState
    step: int


def model_config_for(train: TrainConfig, base: ModelConfig, data: Dataset) -> ModelConfig:
    return dataclasses.replace(
        base,
        adapter=train.adapter,
        prior=train.prior,
        n_classes=data.n_classes,
        d_a=data.d_a,
        seed=derive_seed(train.seed, "model"),
    )


def _clip(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        return {k: g * (max_norm / total) for k, g in grads.items()}
    return grads


def train(data: Dataset, config: TrainConfig, model_config: ModelConfig | None = None,
          model: CaliberModel | None = None, state: AdamWState | None = None, start_step: int = 0,
          max_steps: int | None = None, progress=None) -> TrainResult:
    """Run ``config.epochs`` epochs (or stop after ``max_steps`` total steps).

    Batch order per epoch is a permutation keyed by (seed, epoch), so
    resuming from a checkpoint at any step replays the same stream.
    """
    config.validate()
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if model is None:
        model = CaliberModel(model_config_for(config, model_config or ModelConfig(), data))
    state = state or AdamWState()
    frozen_before = model.backbone.fingerprint()
    n = len(data)
    steps_per_epoch = -(-n // config.batch_size)
    trace = []
    step = start_step
    first_epoch = start_step // steps_per_epoch
    for epoch in range(first_epoch, config.epochs):
        order = Rng(derive_seed(config.seed, "epoch", epoch)).permutation(n)
        neg_elbo = 0.0
        seen = 0
        for bi in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + bi
            if gstep < step:
                continue
            if max_steps is not None and step >= max_steps:
                break
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            batch = collate([data[i] for i in idx])
            neg_elbo -= train_step(model, batch, config, state, step, n)
            seen += len(batch)
            step += 1
        if max_steps is not None and step >= max_steps and seen < n:
            break
        trace.append(neg_elbo / n)
        log.info("epoch %d  -elbo/sample %.5f", epoch, neg_elbo / n)
        if progress:
            progress(epoch, neg_elbo / n)
    if model.backbone.fingerprint() != frozen_before:
        raise TrainingError("frozen backbone weights changed during training")
    return TrainResult(model, trace, state, step)


def train_step(model, batch, config: TrainConfig, state: AdamWState, step: int, n_total: int):
    """Forward, backward and one AdamW update on ``batch``; returns the
    objective value (ELBO, or log-likelihood for ``objective="mle"``)."""
    tape = GradTape()
    P = tape.bind(model.params)
    noise = KeyedNoise(config.seed, step, "train")
    breakdown, total, ll = elbo_terms(batch, model, config.prior, noise, P, n_total=n_total)
    objective = ll if config.objective == "mle" else total
    if not np.isfinite(objective.value):
        raise TrainingError(f"loss diverged (non-finite) at step {step}")
    grads = _clip(tape.backward(-objective), config.clip_norm)
    adamw_step(model.params, grads, state, config.lr, config.weight_decay)
    return float(objective.value)


# ----------------------------------------------------------------------------
# Config files
# ----------------------------------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return value


def apply_kv(obj, prefix: str, kv: dict, used: set):
    changes = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        cur = getattr(obj, f.name)
        if dataclasses.is_dataclass(cur):
            continue
        if key in kv:
            try:
                changes[f.name] = _coerce(kv[key], cur)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {kv[key]!r}") from exc
            used.add(key)
    return dataclasses.replace(obj, **changes) if changes else obj


def configs_from_kv(kv: dict) -> tuple[TrainConfig, ModelConfig]:
    used: set = set()
    prior = apply_kv(PriorConfig(), "prior.", kv, used)
    adapter = apply_kv(AdapterConfig(), "adapter.", kv, used)
    backbone = apply_kv(BackboneConfig(), "backbone.", kv, used)
    if "backbone.d" in kv and "backbone.k" not in kv:
        backbone = dataclasses.replace(backbone, k=backbone.d)
    train = apply_kv(TrainConfig(prior=prior, adapter=adapter), "", kv, used)
    model = apply_kv(ModelConfig(backbone=backbone), "model.", kv, used)
    unknown = set(kv) - used
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    train.validate()
    return train, model


def load_config(path: str) -> tuple[TrainConfig, ModelConfig]:
    with open(path, encoding="utf-8") as fh:
        return configs_from_kv(parse_kv(fh.read()))


def dump_kv(train: TrainConfig, model: ModelConfig | None = None) -> str:
    lines = []

    def emit(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                continue
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{prefix}{f.name} = {v}")

    emit(train, "")
    emit(train.prior, "prior.")
    emit(train.adapter, "adapter.")
    if model is not None:
        emit(model, "model.")
        emit(model.backbone, "backbone.")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def config_hash(train: TrainConfig, model: ModelConfig) -> str:
    blob = json.dumps({"train": dataclasses.asdict(train), "model": model.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    model: CaliberModel
    train_config: TrainConfig
    state: AdamWState
    step: int
    loss_trace: list


def save_checkpoint(path: str, model: CaliberModel, train_cfg: TrainConfig, state: AdamWState,
                    step: int, loss_trace=()) -> None:
    names = list(model.params)
    header = {
        "model_config": model.config.to_dict(),
        "train_config": dataclasses.asdict(train_cfg),
        "config_hash": config_hash(train_cfg, model.config),
        "step": step,
        "adam_t": state.t,
        "has_moments": bool(state.m),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "loss_trace": [float(x) for x in loss_trace],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
        if state.m:
            for table in (state.m, state.v):
                for n in names:
                    fh.write(np.ascontiguousarray(table[n], dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header at byte offset 20") from exc
    model_cfg = ModelConfig.from_dict(header["model_config"])
    tc = dict(header["train_config"])
    adapter = dict(tc.pop("adapter"))
    adapter["layers"] = tuple(adapter["layers"])
    train_cfg = TrainConfig(prior=PriorConfig(**tc.pop("prior")), adapter=AdapterConfig(**adapter), **tc)
    if config_hash(train_cfg, model_cfg) != header["config_hash"]:
        raise FormatError(f"{path}: config hash mismatch")
    off = 20 + hlen

    def read_block(shape):
        nonlocal off
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated data, need bytes up to offset {end}, file ends at {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off = end
        return arr

    params = {n: read_block(tuple(shape)) for n, shape in header["params"]}
    state = AdamWState(t=header["adam_t"])
    if header["has_moments"]:
        state.m = {n: read_block(tuple(shape)) for n, shape in header["params"]}
        state.v = {n: read_block(tuple(shape)) for n, shape in header["params"]}
    model = CaliberModel(model_cfg, params=params)
    return Checkpoint(model, train_cfg, state, header["step"], header["loss_trace"])
