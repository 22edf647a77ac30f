"""Deterministic synthetic corpus: multi-domain, multi-accent utterances
with grapheme labels.

Each grapheme owns a base frame pattern. An utterance's label sequence is
expanded into contiguous frame segments; every frame adds a per-domain
additive bias (an utterance-level channel cue), a per-(accent, grapheme)
mean shift (a frame-level pronunciation cue), and seeded Gaussian noise.
Same config + seed always yields a bit-identical corpus.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

_MAGIC = b"MOEC"
_VERSION = 1


@dataclass
class Utterance:
    frames: np.ndarray          # (T, d_feat) float64
    labels: np.ndarray          # (L,) int32 grapheme ids in [0, V)
    domain_id: int
    accent_id: int
    utt_id: str

    @property
    def t(self) -> int:
        return self.frames.shape[0]


@dataclass
class SynthConfig:
    n_domains: int = 6
    n_accents: int = 4
    vocab_size: int = 8
    d_feat: int = 24
    t_min: int = 20
    t_max: int = 40
    label_min: int = 3
    label_max: int = 8
    domain_bias_scale: float = 1.0
    accent_shift_scale: float = 1.0
    noise_scale: float = 0.5
    domain_priors: list[float] | None = None
    accent_priors: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.n_domains < 1 or self.n_accents < 1:
            raise ConfigError("n_domains and n_accents must be >= 1")
        if self.d_feat < 1:
            raise ConfigError("d_feat must be >= 1")
        if not 1 <= self.label_min <= self.label_max:
            raise ConfigError("need 1 <= label_min <= label_max")
        if self.t_max < 2 * self.label_max + 1:
            raise ConfigError(
                f"t_max={self.t_max} cannot fit label_max={self.label_max} "
                f"(needs >= {2 * self.label_max + 1})")
        if self.t_min > self.t_max:
            raise ConfigError("t_min must be <= t_max")
        for name, priors, m in (("domain_priors", self.domain_priors,
                                 self.n_domains),
                                ("accent_priors", self.accent_priors,
                                 self.n_accents)):
            if priors is not None:
                if len(priors) != m or abs(sum(priors) - 1.0) > 1e-9:
                    raise ConfigError(f"{name} must be {m} values summing to 1")


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate(config: SynthConfig, count: int) -> list[Utterance]:
    """Draw `count` utterances. Every utterance satisfies the CTC
    feasibility bound T >= 2*len(labels) + 1."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    c = config
    rng = np.random.default_rng(c.seed)
    patterns = rng.normal(size=(c.vocab_size, c.d_feat))
    domain_bias = c.domain_bias_scale * _unit_rows(
        rng, (c.n_domains, c.d_feat))
    accent_shift = c.accent_shift_scale * _unit_rows(
        rng, (c.n_accents, c.vocab_size, c.d_feat))
    dom_p = c.domain_priors
    acc_p = c.accent_priors
    utts = []
    for i in range(count):
        domain = int(rng.choice(c.n_domains, p=dom_p))
        accent = int(rng.choice(c.n_accents, p=acc_p))
        n_labels = int(rng.integers(c.label_min, c.label_max + 1))
        labels = rng.integers(0, c.vocab_size, size=n_labels)
        t = int(rng.integers(max(c.t_min, 2 * n_labels + 1), c.t_max + 1))
        seg_lens = rng.multinomial(
            t - n_labels, np.full(n_labels, 1.0 / n_labels)) + 1
        frames = np.empty((t, c.d_feat))
        pos = 0
        for lab, seg in zip(labels, seg_lens):
            base = patterns[lab] + accent_shift[accent, lab] + \
                domain_bias[domain]
            frames[pos:pos + seg] = base
            pos += seg
        frames += rng.normal(scale=c.noise_scale, size=(t, c.d_feat)) \
            if c.noise_scale > 0 else 0.0
        utts.append(Utterance(frames=frames,
                              labels=labels.astype(np.int32),
                              domain_id=domain, accent_id=accent,
                              utt_id=f"u{i:08d}"))
    return utts


def split_by_id_hash(utts: list[Utterance], test_fraction: float = 0.2):
    """Deterministic train/test split keyed on a stable hash of utt_id."""
    train, test = [], []
    threshold = int(test_fraction * 2 ** 32)
    for u in utts:
        h = int.from_bytes(hashlib.md5(u.utt_id.encode()).digest()[:4], "big")
        (test if h < threshold else train).append(u)
    return train, test


# ----------------------------------------------------------------------
# corpus file format: magic, u32 version, u64 count, then per utterance:
# u32 id_len + id bytes, u32 T, u32 d_feat, u32 n_labels, u32 domain_id,
# u32 accent_id, T*d_feat little-endian float64 frames, n_labels
# little-endian int32 labels.

def save_corpus(path, utts: list[Utterance]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(utts)))
        for u in utts:
            uid = u.utt_id.encode("utf-8")
            f.write(struct.pack("<IIIIII", len(uid), u.frames.shape[0],
                                u.frames.shape[1], len(u.labels),
                                u.domain_id, u.accent_id))
            f.write(uid)
            f.write(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(u.labels, dtype="<i4").tobytes())


def load_corpus(path) -> list[Utterance]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a corpus file (bad magic)")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported corpus version {version}")
    off = 16
    utts = []
    try:
        for _ in range(count):
            id_len, t, d_feat, n_labels, domain, accent = \
                struct.unpack_from("<IIIIII", raw, off)
            off += 24
            uid = raw[off:off + id_len].decode("utf-8")
            off += id_len
            frames = np.frombuffer(raw, dtype="<f8", count=t * d_feat,
                                   offset=off).reshape(t, d_feat)
            off += 8 * t * d_feat
            labels = np.frombuffer(raw, dtype="<i4", count=n_labels,
                                   offset=off)
            off += 4 * n_labels
            utts.append(Utterance(frames=frames.astype(np.float64),
                                  labels=labels.astype(np.int32),
                                  domain_id=domain, accent_id=accent,
                                  utt_id=uid))
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated corpus file") from exc
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return utts
