"""Synthetic talking "speakers" and the TVDS dataset file format.

Each sequence is driven by a variance-preserving AR(1) latent trajectory.
Audio is a fixed linear projection of the latent plus noise; the video frame
draws a mouth rectangle whose height follows the (optionally decoupled)
latent's first coordinate on top of a smooth per-sequence background.

TVDS layout (little-endian)::

    "TVDS" | u32 version=1
    | u64 seed | u32 num_sequences, T, A_dim, k | f32 rho, sigma_a, gamma
    | u32 count
    | count x ( u32 id | f32 audio[T*A_dim] | f32 frames[T*32*32] | f32 latent[T*k] )
    | u32 crc32(everything after the magic)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from tavce._io import Reader, atomic_write_bytes, crc32
from tavce.errors import ChecksumError, ConfigError, FormatError, TruncatedFileError
from tavce.rng import SeededRng, derive_seed

MAGIC = b"TVDS"
VERSION = 1
FRAME_SIZE = 32
MOUTH_ROW = 24
MOUTH_COL = 16
MOUTH_WIDTH = 12
MOUTH_BOOST = 0.6
BACKGROUND_GRID = 4

_HEADER = struct.Struct("<QIIIIfff")


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    num_sequences: int = 50
    T: int = 32
    A_dim: int = 64
    k: int = 4
    rho: float = 0.9
    sigma_a: float = 0.05
    gamma: float = 1.0

    def __post_init__(self):
        # float fields live at f32 precision so the file header round-trips exactly
        for name in ("rho", "sigma_a", "gamma"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")
        for name in ("num_sequences", "T", "A_dim", "k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0 or v >= 2**32:
                raise ConfigError(f"{name} must be a positive u32, got {v!r}")
        if self.T < 2:
            raise ConfigError(f"T must be at least 2, got {self.T}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.sigma_a >= 0.0:
            raise ConfigError(f"sigma_a must be non-negative, got {self.sigma_a}")

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.seed, self.num_sequences, self.T, self.A_dim, self.k,
            self.rho, self.sigma_a, self.gamma,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "GeneratorConfig":
        seed, n, t, a, k, rho, sa, g = _HEADER.unpack(raw)
        return cls(seed, n, t, a, k, rho, sa, g)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SequenceSample:
    id: int
    audio: np.ndarray    # T x A_dim
    frames: np.ndarray   # T x 1 x 32 x 32, values in [0, 1]
    latent: np.ndarray   # T x k
    gamma: float = 1.0
    mouth_heights: np.ndarray | None = field(default=None, compare=False)

    @property
    def T(self) -> int:
        return self.audio.shape[0]

    def equals(self, other: "SequenceSample") -> bool:
        return (
            self.id == other.id
            and self.audio.tobytes() == other.audio.tobytes()
            and self.frames.tobytes() == other.frames.tobytes()
            and self.latent.tobytes() == other.latent.tobytes()
        )


def ar1_trajectory(rng: SeededRng, T: int, k: int, rho: float) -> np.ndarray:
    """z_0 ~ N(0, I); z_t = rho z_{t-1} + sqrt(1 - rho^2) eps_t."""
    eps = rng.normal((T, k))
    z = np.empty((T, k))
    z[0] = eps[0]
    c = math.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        z[t] = rho * z[t - 1] + c * eps[t]
    return z


def audio_projection(cfg: GeneratorConfig) -> np.ndarray:
    """Dataset-wide ``A_dim x k`` mixing matrix, scaled so audio entries have unit variance."""
    rng = SeededRng(derive_seed(cfg.seed, "audio-W"))
    return rng.normal((cfg.A_dim, cfg.k)) / math.sqrt(cfg.k)


def smooth_background(rng: SeededRng, size: int = FRAME_SIZE) -> np.ndarray:
    """Bilinear upsampling of a coarse Gaussian grid, squashed into [0.1, 0.5]."""
    grid = rng.normal((BACKGROUND_GRID, BACKGROUND_GRID))
    pos = (np.arange(size) + 0.5) * BACKGROUND_GRID / size - 0.5
    pos = np.clip(pos, 0, BACKGROUND_GRID - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, BACKGROUND_GRID - 1)
    w = pos - lo
    rows = grid[lo] * (1 - w)[:, None] + grid[hi] * w[:, None]
    img = rows[:, lo] * (1 - w)[None, :] + rows[:, hi] * w[None, :]
    return 0.1 + 0.4 / (1.0 + np.exp(-img))


def mouth_height(y0: np.ndarray) -> np.ndarray:
    return np.floor(2.0 + 8.0 / (1.0 + np.exp(-y0)) + 0.5).astype(int)


def render_mouth(background: np.ndarray, h: int) -> np.ndarray:
    img = background.copy()
    top = MOUTH_ROW - h // 2
    left = MOUTH_COL - MOUTH_WIDTH // 2
    region = img[top:top + h, left:left + MOUTH_WIDTH]
    img[top:top + h, left:left + MOUTH_WIDTH] = np.minimum(region + MOUTH_BOOST, 1.0)
    return img


def generate_sequence(cfg: GeneratorConfig, seq_id: int, W_a: np.ndarray | None = None) -> SequenceSample:
    cfg.validate()
    if W_a is None:
        W_a = audio_projection(cfg)
    rng = SeededRng(derive_seed(cfg.seed, "sequence", seq_id))
    z = ar1_trajectory(rng, cfg.T, cfg.k, cfg.rho)
    z_ind = ar1_trajectory(rng, cfg.T, cfg.k, cfg.rho)
    noise = rng.normal((cfg.T, cfg.A_dim))
    background = smooth_background(rng)

    audio = z @ W_a.T + cfg.sigma_a * noise
    y = cfg.gamma * z + (1.0 - cfg.gamma) * z_ind
    heights = mouth_height(y[:, 0])
    frames = np.stack([render_mouth(background, int(h)) for h in heights])[:, None]
    return SequenceSample(
        id=seq_id,
        audio=audio.astype(np.float32),
        frames=frames.astype(np.float32),
        latent=z.astype(np.float32),
        gamma=cfg.gamma,
        mouth_heights=heights,
    )


def generate_dataset(cfg: GeneratorConfig) -> list[SequenceSample]:
    W_a = audio_projection(cfg)
    return [generate_sequence(cfg, i, W_a) for i in range(cfg.num_sequences)]


def split_holdout(samples: list[SequenceSample], fraction: float = 0.2):
    """Train/held-out split by sequence id: the last ``fraction`` of ids are held out."""
    ids = sorted(s.id for s in samples)
    n_hold = max(1, int(round(len(ids) * fraction)))
    held = set(ids[len(ids) - n_hold:])
    train = [s for s in samples if s.id not in held]
    test = [s for s in samples if s.id in held]
    return train, test


# ------------------------------------------------------------------ file format
def _to_le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dataset_bytes(samples: list[SequenceSample], cfg: GeneratorConfig) -> bytes:
    if not samples:
        raise ValueError("write_dataset: sample list is empty")
    body = bytearray(struct.pack("<I", VERSION))
    body += cfg.pack()
    body += struct.pack("<I", len(samples))
    for s in samples:
        want = {
            "audio": (cfg.T, cfg.A_dim),
            "frames": (cfg.T, 1, FRAME_SIZE, FRAME_SIZE),
            "latent": (cfg.T, cfg.k),
        }
        for name, shape in want.items():
            if getattr(s, name).shape != shape:
                raise ValueError(f"sequence {s.id}: {name} has shape {getattr(s, name).shape}, header says {shape}")
        body += struct.pack("<I", s.id)
        body += _to_le(s.audio) + _to_le(s.frames) + _to_le(s.latent)
    body += struct.pack("<I", crc32(bytes(body)))
    return MAGIC + bytes(body)


def write_dataset(samples: list[SequenceSample], cfg: GeneratorConfig, path) -> None:
    atomic_write_bytes(path, dataset_bytes(samples, cfg))


def parse_dataset(raw: bytes) -> tuple[list[SequenceSample], GeneratorConfig]:
    if raw[:4] != MAGIC:
        raise FormatError("not a TVDS file (bad magic)")
    if len(raw) < 12:
        raise FormatError("file truncated: TVDS header incomplete")
    rd = Reader(raw, 4)
    version = rd.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported TVDS version {version}")
    cfg_raw = rd.take(_HEADER.size)
    count = rd.unpack("I")
    try:
        cfg = GeneratorConfig.unpack(cfg_raw)
    except ConfigError:
        cfg = None
    if cfg is not None:
        seq_bytes = 4 + 4 * cfg.T * (cfg.A_dim + FRAME_SIZE * FRAME_SIZE + cfg.k)
        expected = rd.pos + count * seq_bytes + 4
        if len(raw) < expected:
            raise TruncatedFileError(f"file truncated: expected {expected} bytes, found {len(raw)}")
    stored = struct.unpack("<I", raw[-4:])[0]
    if crc32(raw[4:-4]) != stored:
        raise ChecksumError("CRC32 mismatch: TVDS payload is corrupt")
    if cfg is None:
        raise FormatError("TVDS header holds an invalid generator config")
    samples = []
    for _ in range(count):
        sid = rd.unpack("I")
        audio = np.frombuffer(rd.take(4 * cfg.T * cfg.A_dim), "<f4").reshape(cfg.T, cfg.A_dim)
        frames = np.frombuffer(rd.take(4 * cfg.T * FRAME_SIZE * FRAME_SIZE), "<f4").reshape(
            cfg.T, 1, FRAME_SIZE, FRAME_SIZE
        )
        latent = np.frombuffer(rd.take(4 * cfg.T * cfg.k), "<f4").reshape(cfg.T, cfg.k)
        samples.append(
            SequenceSample(sid, audio.astype(np.float32), frames.astype(np.float32),
                           latent.astype(np.float32), cfg.gamma)
        )
    if rd.remaining != 4:
        raise FormatError(f"TVDS file has {rd.remaining - 4} unexpected trailing bytes")
    return samples, cfg


def read_dataset(path) -> tuple[list[SequenceSample], GeneratorConfig]:
    return parse_dataset(Path(path).read_bytes())
