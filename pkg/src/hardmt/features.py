"""Continuous feature frames: binary file I/O and a synthetic generator.

The synthetic generator stands in for self-supervised speech features.  Every
utterance is a sequence of latent units; each unit is rendered as a run of
frames drawn around that unit's centroid, so the ground-truth cluster of
every frame is known.

File layout (little-endian, no padding)::

    magic  b"DSQF"     4 bytes
    version u8 = 1     1 byte
    D      u32         4 bytes
    T      u32         4 bytes
    rate   f32         4 bytes   frame rate in Hz (metadata only)
    data   f32[T*D]    row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TruncationError, ValidationError

MAGIC = b"DSQF"
VERSION = 1
_HEADER = struct.Struct("<4sBIIf")
HEADER_SIZE = _HEADER.size  # 17


@dataclass
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.validate()

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def validate(self):
        if self.frames.ndim != 2:
            raise ValidationError(f"frames must be T x D, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValidationError(f"empty feature matrix {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError(f"{self.utterance_id}: non-finite feature values")
        if not (self.frame_rate_hz > 0 and np.isfinite(self.frame_rate_hz)):
            raise ValidationError(f"frame rate must be positive, got {self.frame_rate_hz}")

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.utterance_id == other.utterance_id
            and self.frame_rate_hz == other.frame_rate_hz
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


def write_features(seq: FeatureSequence, path) -> None:
    seq.validate()
    path = Path(path)
    T, D = seq.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, D, T, seq.frame_rate_hz)
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def read_features(path, utterance_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise FormatError(f"{path}: bad magic")
        raise TruncationError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, D, T, rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = T * D * 4
    body = raw[HEADER_SIZE:]
    if len(body) < expected:
        raise TruncationError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float32)
    return FeatureSequence(utterance_id or path.stem, frames, float(rate))


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthSpec:
    """Generator settings.

    ``latent_grammar`` maps each source symbol to the latent cluster ids its
    "pronunciation" walks through.  Centroids are a pure function of
    ``(n_latent_clusters, dim, noise_stddev, centroid_seed)``.
    """

    n_latent_clusters: int
    dim: int
    noise_stddev: float
    frames_per_unit: tuple[int, int]
    latent_grammar: dict[str, list[int]]
    symbols_per_utt: tuple[int, int] = (3, 8)
    centroid_seed: int = 0
    frame_rate_hz: float = 50.0
    _centroids: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_latent_clusters < 2:
            raise ConfigError("n_latent_clusters must be >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.noise_stddev < 0:
            raise ConfigError("noise_stddev must be non-negative")
        lo, hi = self.frames_per_unit
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad frames_per_unit {self.frames_per_unit}")
        lo, hi = self.symbols_per_utt
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad symbols_per_utt {self.symbols_per_utt}")
        if not self.latent_grammar:
            raise ConfigError("latent_grammar is empty")
        for sym, ids in self.latent_grammar.items():
            if not ids or any(not 0 <= i < self.n_latent_clusters for i in ids):
                raise ConfigError(f"symbol {sym!r} has invalid latent ids {ids}")

    @property
    def centroids(self) -> np.ndarray:
        if self._centroids is None:
            self._centroids = _draw_centroids(
                self.n_latent_clusters, self.dim, self.noise_stddev, self.centroid_seed
            )
        return self._centroids

    @property
    def min_centroid_distance(self) -> float:
        return float(_min_pairwise(self.centroids))

    @property
    def separation_ratio(self) -> float:
        """Minimum centroid distance divided by the noise level."""
        if self.noise_stddev == 0:
            return float("inf")
        return self.min_centroid_distance / self.noise_stddev


def _min_pairwise(c: np.ndarray) -> float:
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    d2[np.diag_indices_from(d2)] = np.inf
    return float(np.sqrt(d2.min()))


def _draw_centroids(k, dim, noise, seed, max_tries=100):
    rng = np.random.default_rng(seed)
    need = 10.0 * noise
    c = rng.standard_normal((k, dim))
    for _ in range(max_tries):
        if _min_pairwise(c) >= need:
            return c
        c = rng.standard_normal((k, dim))
    # rejection failed (tiny dim or huge noise): stretch the last draw
    return c * (need / _min_pairwise(c))


def render_units(spec: SynthSpec, units, rng: np.random.Generator):
    """Frames and frame-level latent ids for a sequence of latent unit ids."""
    lo, hi = spec.frames_per_unit
    counts = rng.integers(lo, hi + 1, size=len(units))
    latent = np.repeat(np.asarray(units, dtype=np.int64), counts)
    frames = spec.centroids[latent]
    if spec.noise_stddev > 0:
        frames = frames + rng.normal(0.0, spec.noise_stddev, size=frames.shape)
    return frames.astype(np.float32), latent


def synth_utterances(spec: SynthSpec, sources, seed: int, prefix: str = "utt"):
    """Render given source symbol strings as feature sequences."""
    rng = np.random.default_rng(seed)
    out = []
    for i, src in enumerate(sources):
        units = [u for sym in src for u in spec.latent_grammar[sym]]
        frames, latent = render_units(spec, units, rng)
        seq = FeatureSequence(f"{prefix}{i:05d}", frames, spec.frame_rate_hz)
        out.append((seq, latent, src))
    return out


def synth_corpus(spec: SynthSpec, n_utts: int, seed: int):
    """Random utterances: list of (FeatureSequence, frame latent ids, source string)."""
    if n_utts < 1:
        raise ConfigError("n_utts must be >= 1")
    rng = np.random.default_rng(seed)
    symbols = sorted(spec.latent_grammar)
    lo, hi = spec.symbols_per_utt
    sources = []
    for _ in range(n_utts):
        n = int(rng.integers(lo, hi + 1))
        sources.append("".join(symbols[j] for j in rng.integers(0, len(symbols), size=n)))
    return synth_utterances(spec, sources, seed=int(rng.integers(2**31)))
