"""Synthetic text+audio classification data and its on-disk format.

Each sample is a token sequence plus a matrix of frame embeddings. The
label is encoded twice:

* in the text, through class-specific token subsets, diluted by
  ``text_ambiguity`` (probability that a token is drawn uniformly from the
  whole vocabulary instead);
* in the audio, through a contiguous window of ``window_len`` frames that
  carry ``audio_signal_strength * prototype[label]``.

Every frame (window or not) receives additive N(0, audio_noise_sigma^2)
noise, so frames outside the window are pure noise. Class prototypes and
token subsets depend only on ``prototype_seed``, which lets train and test
sets drawn with different ``seed`` values share the same task.

On disk a dataset is a directory with two files::

    manifest.txt   header line, then one line per sample:
                   id T_x T_a label win_start win_len tok_off frame_off mask
    data.bin       uint32 little-endian token ids and float64 little-endian
                   frames, at the byte offsets listed in the manifest

``mask`` is ``*`` when every frame is valid, else a string of 0/1 flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import Rng, derive_seed

MANIFEST = "manifest.txt"
BLOB = "data.bin"
MAGIC = "caliber-dataset"
VERSION = 1


@dataclass
class SynthConfig:
    n_samples: int = 2000
    tx_min: int = 4
    tx_max: int = 10
    ta_min: int = 8
    ta_max: int = 16
    d_a: int = 24
    vocab: int = 64
    n_classes: int = 2
    audio_signal_strength: float = 1.0
    audio_noise_sigma: float = 0.25
    text_ambiguity: float = 0.5
    window_len: int = 3
    prototype_scale: float = 0.2
    seed: int = 0
    prototype_seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if not 1 <= self.tx_min <= self.tx_max:
            raise ConfigError("need 1 <= tx_min <= tx_max")
        if not 1 <= self.ta_min <= self.ta_max:
            raise ConfigError("need 1 <= ta_min <= ta_max")
        if not 1 <= self.window_len <= self.ta_min:
            raise ConfigError("window_len must lie in [1, ta_min]")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.vocab < 2 * self.n_classes:
            raise ConfigError("vocab too small for the class token subsets")
        if self.d_a < 1:
            raise ConfigError("d_a must be >= 1")
        if not 0.0 <= self.audio_signal_strength <= 1.0:
            raise ConfigError("audio_signal_strength must lie in [0, 1]")
        if not 0.0 <= self.text_ambiguity <= 1.0:
            raise ConfigError("text_ambiguity must lie in [0, 1]")
        if self.audio_noise_sigma < 0:
            raise ConfigError("audio_noise_sigma must be >= 0")


@dataclass
class MultimodalSample:
    id: int
    tokens: np.ndarray  # int64, (T_x,)
    frames: np.ndarray  # float64, (T_a, d_a)
    label: int
    mask: np.ndarray = None  # bool, (T_a,)
    window: tuple[int, int] = (0, 0)  # (start, length) of the label-carrying frames

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.frames.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    def __eq__(self, other):
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and tuple(self.window) == tuple(other.window)
            and np.array_equal(self.tokens, other.tokens)
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class Dataset:
    samples: list[MultimodalSample]
    d_a: int
    vocab: int
    n_classes: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.d_a, self.vocab, self.n_classes)

    def by_id(self, sample_id: int) -> MultimodalSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(f"no sample with id {sample_id}")


def class_prototypes(config: SynthConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class-mean frame embeddings and per-class token subsets."""
    rng = Rng(derive_seed(config.prototype_seed, "prototypes"))
    means = config.prototype_scale * rng.normal((config.n_classes, config.d_a))
    per_class = config.vocab // (2 * config.n_classes)
    order = rng.permutation(config.vocab)
    subsets = [np.sort(order[c * per_class:(c + 1) * per_class]) for c in range(config.n_classes)]
    return means, subsets


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    means, subsets = class_prototypes(config)
    rng = Rng(derive_seed(config.seed, "samples"))
    s, sigma = config.audio_signal_strength, config.audio_noise_sigma
    samples = []
    for i in range(config.n_samples):
        label = int(rng.integers(0, config.n_classes - 1))
        tx = int(rng.integers(config.tx_min, config.tx_max))
        ta = int(rng.integers(config.ta_min, config.ta_max))
        blurred = rng.uniform(tx) < config.text_ambiguity
        own = subsets[label][rng.integers(0, len(subsets[label]) - 1, size=tx)]
        anywhere = rng.integers(0, config.vocab - 1, size=tx)
        tokens = np.where(blurred, anywhere, own)
        start = int(rng.integers(0, ta - config.window_len))
        frames = sigma * rng.normal((ta, config.d_a))
        frames[start:start + config.window_len] += s * means[label]
        samples.append(MultimodalSample(i, tokens, frames, label, window=(start, config.window_len)))
    return Dataset(samples, config.d_a, config.vocab, config.n_classes)


def with_noise(config: SynthConfig, sigma: float) -> SynthConfig:
    return dataclasses.replace(config, audio_noise_sigma=sigma)


def train_test_split(data: Dataset, test_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(data)
    order = Rng(derive_seed(seed, "split")).permutation(n)
    n_test = int(round(test_frac * n))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, T) int64, padded with 0
    token_mask: np.ndarray  # (B, T) bool
    frames: np.ndarray  # (B, S, d_a), padded with 0
    frame_mask: np.ndarray  # (B, S) bool
    labels: np.ndarray  # (B,)
    lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lengths = self.token_mask.sum(axis=1)

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def has_audio(self) -> np.ndarray:
        return self.frame_mask.any(axis=1)


def collate(samples: list[MultimodalSample]) -> Batch:
    b = len(samples)
    t = max(len(s.tokens) for s in samples)
    sa = max(s.frames.shape[0] for s in samples)
    d_a = samples[0].frames.shape[1]
    tokens = np.zeros((b, t), dtype=np.int64)
    tmask = np.zeros((b, t), dtype=bool)
    frames = np.zeros((b, sa, d_a))
    fmask = np.zeros((b, sa), dtype=bool)
    for i, s in enumerate(samples):
        tokens[i, : len(s.tokens)] = s.tokens
        tmask[i, : len(s.tokens)] = True
        frames[i, : s.frames.shape[0]] = s.frames
        fmask[i, : s.frames.shape[0]] = s.mask
    ids = np.array([s.id for s in samples], dtype=np.int64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Batch(ids, tokens, tmask, frames, fmask, labels)


def iter_batches(data: Dataset, batch_size: int, order=None):
    idx = np.arange(len(data)) if order is None else order
    for lo in range(0, len(idx), batch_size):
        yield collate([data[i] for i in idx[lo:lo + batch_size]])


# ----------------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------------


def save(data: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    lines = [f"{MAGIC} {VERSION} n={len(data)} d_a={data.d_a} vocab={data.vocab} n_classes={data.n_classes}"]
    off = 0
    with open(os.path.join(path, BLOB), "wb") as blob:
        for s in data:
            tok = s.tokens.astype("<u4").tobytes()
            frm = s.frames.astype("<f8").tobytes()
            tok_off, frame_off = off, off + len(tok)
            blob.write(tok)
            blob.write(frm)
            off = frame_off + len(frm)
            mask = "*" if s.mask.all() else "".join("1" if m else "0" for m in s.mask)
            lines.append(
                f"{s.id} {len(s.tokens)} {s.frames.shape[0]} {s.label} "
                f"{s.window[0]} {s.window[1]} {tok_off} {frame_off} {mask}"
            )
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != MAGIC:
        raise FormatError(f"not a dataset manifest (byte offset 0): {line[:40]!r}")
    if parts[1] != str(VERSION):
        raise FormatError(f"unsupported dataset version {parts[1]}")
    try:
        meta = dict(p.split("=", 1) for p in parts[2:])
        return {k: int(meta[k]) for k in ("n", "d_a", "vocab", "n_classes")}
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed manifest header: {line!r}") from exc


def load(path: str) -> Dataset:
    mpath, bpath = os.path.join(path, MANIFEST), os.path.join(path, BLOB)
    if not os.path.exists(mpath) or not os.path.exists(bpath):
        raise FormatError(f"dataset directory {path!r} lacks {MANIFEST} or {BLOB}")
    with open(mpath, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty manifest (byte offset 0)")
    meta = _parse_header(lines[0])
    with open(bpath, "rb") as fh:
        blob = fh.read()
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split()
        if len(f) != 9:
            raise FormatError(f"manifest line {lineno}: expected 9 fields, got {len(f)}")
        sid, tx, ta, label, ws, wl, tok_off, frame_off = (int(x) for x in f[:8])
        tok_end = tok_off + 4 * tx
        frame_end = frame_off + 8 * ta * meta["d_a"]
        for start, end in ((tok_off, tok_end), (frame_off, frame_end)):
            if end > len(blob):
                raise FormatError(
                    f"sample {sid}: blob truncated, need bytes [{start}, {end}) "
                    f"but file ends at byte offset {len(blob)}"
                )
        tokens = np.frombuffer(blob, dtype="<u4", count=tx, offset=tok_off).astype(np.int64)
        frames = np.frombuffer(blob, dtype="<f8", count=ta * meta["d_a"], offset=frame_off)
        frames = frames.reshape(ta, meta["d_a"]).astype(np.float64)
        mask = None if f[8] == "*" else np.array([c == "1" for c in f[8]], dtype=bool)
        samples.append(MultimodalSample(sid, tokens, frames, label, mask, (ws, wl)))
    if len(samples) != meta["n"]:
        raise FormatError(f"manifest header says n={meta['n']} but lists {len(samples)} samples")
    return Dataset(samples, meta["d_a"], meta["vocab"], meta["n_classes"])
