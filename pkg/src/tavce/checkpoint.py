"""TrainConfig, Adam state container and the TVCE checkpoint format.

TVCE layout (little-endian)::

    "TVCE" | u32 version=1 | u8 stage
    | TrainConfig: u8 stage | u32 iterations | f64 learning_rate | u32 batch_sequences
                   | u32 tau | f64 lambda_reg | u8 use_cerl | u8 use_car | u64 seed
                   | u32 a_dim, d, c, frame
    | u32 tensor_count
    | tensor_count x ( u16 name_len | utf-8 name | u8 rank | u32 dims[rank]
                       | u8 dtype (0=f32, 1=f64) | raw payload )
    | u32 crc32(everything after the magic)
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from tavce._io import Reader, atomic_write_bytes, crc32
from tavce.encoders import ModelDims, ModelParams, param_shapes
from tavce.errors import ChecksumError, ConfigError, DimensionMismatchError, FormatError, TruncatedFileError
from tavce.tensor import Tensor

MAGIC = b"TVCE"
VERSION = 1
STEP_TENSOR = "adam.step"
_CFG = struct.Struct("<BIdIIdBBQIIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

STAGE_DEFAULTS = {1: (2000, 1e-4), 2: (1500, 2e-4)}
TRAINABLE = {1: ("E_a", "E_v"), 2: ("E_f", "CERL", "G")}


class MissingTensorError(FormatError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int | None = None
    learning_rate: float | None = None
    batch_sequences: int = 4
    tau: int = 2
    lambda_reg: float = 1.0
    use_cerl: bool = True
    use_car: bool = True
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        iters, lr = STAGE_DEFAULTS[self.stage]
        if self.iterations is None:
            object.__setattr__(self, "iterations", iters)
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", lr)
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_sequences <= 0:
            raise ConfigError(f"batch_sequences must be positive, got {self.batch_sequences}")
        if self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if not self.lambda_reg >= 0:
            raise ConfigError(f"lambda_reg must be non-negative, got {self.lambda_reg}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def trainable_groups(self) -> tuple[str, ...]:
        groups = TRAINABLE[self.stage]
        if self.stage == 2 and not self.use_cerl:
            groups = tuple(g for g in groups if g != "CERL")
        return groups

    def pack(self) -> bytes:
        d = self.dims
        return _CFG.pack(
            self.stage, self.iterations, self.learning_rate, self.batch_sequences, self.tau,
            self.lambda_reg, int(self.use_cerl), int(self.use_car), self.seed,
            d.a_dim, d.d, d.c, d.frame,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "TrainConfig":
        st, it, lr, bs, tau, lam, cerl, car, seed, a, d, c, fr = _CFG.unpack(raw)
        return cls(st, it, lr, bs, tau, lam, bool(cerl), bool(car), seed, ModelDims(a, d, c, fr))

    def as_dict(self) -> dict:
        out = asdict(self)
        dims = out.pop("dims")
        out.update(dims)
        return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in tensors.items()},
            v={k: np.zeros_like(t.data) for k, t in tensors.items()},
        )


@dataclass
class Checkpoint:
    stage: int
    config: TrainConfig
    tensors: dict[str, np.ndarray]

    @classmethod
    def from_training(cls, config: TrainConfig, params: ModelParams, adam: AdamState) -> "Checkpoint":
        tensors = {k: t.data.copy() for k, t in params.items()}
        for k in adam.m:
            tensors[f"adam.m.{k}"] = adam.m[k].copy()
        for k in adam.v:
            tensors[f"adam.v.{k}"] = adam.v[k].copy()
        tensors[STEP_TENSOR] = np.array(adam.t, dtype=np.float64)
        return cls(config.stage, config, tensors)

    def params(self) -> ModelParams:
        dims = self.config.dims
        return ModelParams(dims, {k: Tensor(self.tensors[k].copy()) for k in param_shapes(dims)})

    def adam_state(self) -> AdamState:
        m = {k[7:]: v.copy() for k, v in self.tensors.items() if k.startswith("adam.m.")}
        v = {k[7:]: x.copy() for k, x in self.tensors.items() if k.startswith("adam.v.")}
        return AdamState(m, v, int(self.tensors[STEP_TENSOR]))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return expected_tensor_shapes(self.config)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)


def expected_tensor_shapes(cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    shapes = param_shapes(cfg.dims)
    out = dict(shapes)
    trainable = [k for k in shapes if k.split(".")[0] in cfg.trainable_groups()]
    for k in trainable:
        out[f"adam.m.{k}"] = shapes[k]
    for k in trainable:
        out[f"adam.v.{k}"] = shapes[k]
    out[STEP_TENSOR] = ()
    return out


def validate_tensors(tensors: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    want = expected_tensor_shapes(cfg)
    for name, shape in want.items():
        if name not in tensors:
            raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise DimensionMismatchError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, config dims imply {shape}"
            )
    extra = sorted(set(tensors) - set(want))
    if extra:
        raise FormatError(f"checkpoint has unexpected tensors: {', '.join(extra)}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    validate_tensors(ckpt.tensors, ckpt.config)
    body = bytearray(struct.pack("<IB", VERSION, ckpt.stage))
    body += ckpt.config.pack()
    body += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code, le = 0, "<f4"
        elif arr.dtype == np.float64:
            code, le = 1, "<f8"
        else:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += struct.pack("<B", code) + np.ascontiguousarray(arr, dtype=le).tobytes()
    body += struct.pack("<I", crc32(bytes(body)))
    return MAGIC + bytes(body)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise FormatError("not a TVCE checkpoint (bad magic)")
    if len(raw) < 8:
        raise TruncatedFileError("file truncated: TVCE header incomplete")
    rd = Reader(raw, 4)
    version = rd.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported TVCE version {version}")
    if len(raw) < 4 + 4 + 1 + _CFG.size + 4 + 4:
        raise TruncatedFileError("file truncated: TVCE header incomplete")
    stored = struct.unpack("<I", raw[-4:])[0]
    if crc32(raw[4:-4]) != stored:
        raise ChecksumError("CRC32 mismatch: TVCE payload is corrupt")
    stage = rd.unpack("B")
    config = TrainConfig.unpack(rd.take(_CFG.size))
    if config.stage != stage:
        raise FormatError(f"stage tag {stage} disagrees with config stage {config.stage}")
    count = rd.unpack("I")
    tensors: dict[str, np.ndarray] = {}
    body_end = len(raw) - 4
    for _ in range(count):
        if rd.pos >= body_end:
            raise TruncatedFileError("file truncated inside tensor table")
        name = rd.take(rd.unpack("H")).decode("utf-8")
        rank = rd.unpack("B")
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank)) if rank else ()
        code = rd.unpack("B")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(rd.take(n * dt.itemsize), dt).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if rd.pos != body_end:
        raise FormatError(f"TVCE file has {body_end - rd.pos} unexpected trailing bytes")
    validate_tensors(tensors, config)
    return Checkpoint(stage, config, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
