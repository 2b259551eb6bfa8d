"""Toy audio/visual encoders, spatial feature extractor, correlation fusion and renderer.

Weights follow the shapes used by the tensor ops: dense layers are stored
``in x out`` (applied as ``x @ w``), convolutions ``out x in x kh x kw`` and
pointwise convolutions ``out x in``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from tavce import tensor as T
from tavce.correlation import DEGENERATE_NORM
from tavce.errors import ShapeError
from tavce.rng import SeededRng, derive_seed
from tavce.tensor import Tensor

AUDIO_HIDDEN = 32
VISUAL_HIDDEN = 64
FEATURE_HIDDEN = 16
RENDER_HIDDEN = 16

GROUPS = ("E_a", "E_v", "E_f", "CERL", "G")


@dataclass(frozen=True)
class ModelDims:
    a_dim: int = 64
    d: int = 16
    c: int = 32
    frame: int = 32

    def __post_init__(self):
        for name in ("a_dim", "d", "c", "frame"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.frame % 4:
            raise ValueError(f"frame size must be divisible by 4, got {self.frame}")

    @property
    def feature_hw(self) -> int:
        return self.frame // 4


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    a, d, c, px = dims.a_dim, dims.d, dims.c, dims.frame * dims.frame
    return {
        "E_a.w1": (a, AUDIO_HIDDEN),
        "E_a.b1": (AUDIO_HIDDEN,),
        "E_a.w2": (AUDIO_HIDDEN, d),
        "E_a.b2": (d,),
        "E_v.w1": (px, VISUAL_HIDDEN),
        "E_v.b1": (VISUAL_HIDDEN,),
        "E_v.w2": (VISUAL_HIDDEN, d),
        "E_v.b2": (d,),
        "E_f.w1": (FEATURE_HIDDEN, 1, 3, 3),
        "E_f.b1": (FEATURE_HIDDEN,),
        "E_f.w2": (c, FEATURE_HIDDEN, 3, 3),
        "E_f.b2": (c,),
        "CERL.conv2": (d, c),
        "CERL.conv1": (c, d),
        "G.w_fuse": (c, c + d),
        "G.b_fuse": (c,),
        "G.w_up1": (RENDER_HIDDEN, c, 3, 3),
        "G.b_up1": (RENDER_HIDDEN,),
        "G.w_up2": (1, RENDER_HIDDEN, 3, 3),
        "G.b_up2": (1,),
    }


class ModelParams:
    """Ordered name -> tensor mapping for every trainable weight."""

    def __init__(self, dims: ModelDims, tensors: dict[str, Tensor]):
        self.dims = dims
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def count(self, prefix: str | None = None) -> int:
        src = self.tensors if prefix is None else self.group(prefix)
        return sum(t.size for t in src.values())

    def set_trainable(self, prefixes) -> None:
        prefixes = tuple(prefixes)
        for name, t in self.tensors.items():
            t.requires_grad = name.split(".")[0] in prefixes
            t.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def as_dtype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.dims, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        )

    def copy(self) -> "ModelParams":
        return self.as_dtype(next(iter(self.tensors.values())).dtype)


def _he_fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if name.startswith(("CERL.", "G.w_fuse")):
        return shape[1]  # pointwise conv weights are out x in
    return shape[0]  # dense weights are in x out


def init_params(seed: int, dims: ModelDims, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases; deterministic per seed."""
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(dims).items():
        leaf = name.split(".")[1]
        if leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            rng = SeededRng(derive_seed(seed, "init", name))
            data = rng.normal(shape) * math.sqrt(2.0 / _he_fan_in(name, shape))
        tensors[name] = Tensor(data.astype(dtype))
    return ModelParams(dims, tensors)


# ----------------------------------------------------------------- encoders
def _batched(x: Tensor, tail: tuple[int, ...], op: str) -> tuple[Tensor, bool]:
    if x.shape == tail:
        return T.reshape(x, (1,) + tail), True
    if x.ndim == len(tail) + 1 and x.shape[1:] == tail:
        return x, False
    raise ShapeError(f"{op}: expected input shape {tail} (optionally batched), got {x.shape}")


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    h = T.relu(T.add(T.matmul(x, w1), b1))
    return T.add(T.matmul(h, w2), b2)


def audio_encode(params: ModelParams, a: Tensor) -> Tensor:
    """A_dim clip (or N x A_dim batch) -> D embedding."""
    x, single = _batched(a, (params.dims.a_dim,), "audio_encode")
    p = params
    out = _mlp(x, p["E_a.w1"], p["E_a.b1"], p["E_a.w2"], p["E_a.b2"])
    return T.reshape(out, (params.dims.d,)) if single else out


def visual_encode(params: ModelParams, v: Tensor) -> Tensor:
    """1 x H x W frame (or N x 1 x H x W batch) -> D embedding."""
    s = params.dims.frame
    x, single = _batched(v, (1, s, s), "visual_encode")
    x = T.reshape(x, (x.shape[0], s * s))
    p = params
    out = _mlp(x, p["E_v.w1"], p["E_v.b1"], p["E_v.w2"], p["E_v.b2"])
    return T.reshape(out, (params.dims.d,)) if single else out


def extract_feature_map(params: ModelParams, v0: Tensor) -> Tensor:
    """Two stride-2 3x3 convolutions: 1 x S x S -> C x S/4 x S/4."""
    s = params.dims.frame
    x, single = _batched(v0, (1, s, s), "extract_feature_map")
    p = params
    h = T.relu(T.conv2d(x, p["E_f.w1"], p["E_f.b1"], stride=2, padding=1))
    f = T.relu(T.conv2d(h, p["E_f.w2"], p["E_f.b2"], stride=2, padding=1))
    return T.reshape(f, f.shape[1:]) if single else f


def normalize_correlation(c: Tensor) -> Tensor:
    """Divide each D x D matrix by its Frobenius norm; near-zero matrices become zero."""
    n = T.norm(c, axis=(-2, -1), keepdims=True)
    tiny = n.data < DEGENERATE_NORM
    if not tiny.any():
        return T.div(c, n)
    safe = T.add(n, Tensor(tiny.astype(c.dtype)))
    return T.mul(T.div(c, safe), Tensor((~tiny).astype(c.dtype)))


def correlation_residual(params: ModelParams, f: Tensor, c_hat: Tensor) -> Tensor:
    """``Conv_1(c_hat x Conv_2(f))`` for an already-normalized correlation."""
    n, c, h, w = f.shape
    d = params.dims.d
    reduced = T.conv1x1(f, params["CERL.conv2"])                   # N x D x H x W
    mixed = T.matmul(c_hat, T.reshape(reduced, (n, d, h * w)))     # N x D x HW
    return T.conv1x1(T.reshape(mixed, (n, d, h, w)), params["CERL.conv1"])


def cerl_fuse(params: ModelParams, f: Tensor, c_a: Tensor) -> Tensor:
    """Inject the audio correlation into a feature map by channel attention, residually."""
    dims = params.dims
    if f.ndim not in (3, 4):
        raise ShapeError(f"cerl_fuse: feature map must be C x H x W, got {f.shape}")
    single = f.ndim == 3
    f4 = T.reshape(f, (1,) + f.shape) if single else f
    if f4.shape[1] != dims.c:
        raise ShapeError(f"cerl_fuse: feature map has {f4.shape[1]} channels, params expect {dims.c}")
    if c_a.shape[-2:] != (dims.d, dims.d):
        raise ShapeError(f"cerl_fuse: correlation must be {dims.d} x {dims.d}, got {c_a.shape}")
    c3 = T.reshape(c_a, (1, dims.d, dims.d)) if c_a.ndim == 2 else c_a
    if c3.shape[0] not in (1, f4.shape[0]):
        raise ShapeError(f"cerl_fuse: batch sizes differ {c3.shape[0]} vs {f4.shape[0]}")
    g = T.add(f4, correlation_residual(params, f4, normalize_correlation(c3)))
    return T.reshape(g, g.shape[1:]) if single else g


def render_frame(params: ModelParams, g: Tensor, f_a: Tensor) -> Tensor:
    """Feature map + audio embedding -> 1 x S x S frame with pixels in (0, 1)."""
    dims = params.dims
    hw = dims.feature_hw
    g4, single = _batched(g, (dims.c, hw, hw), "render_frame")
    fa, _ = _batched(f_a, (dims.d,), "render_frame")
    n = g4.shape[0]
    if fa.shape[0] != n:
        raise ShapeError(f"render_frame: batch sizes differ {n} vs {fa.shape[0]}")
    spatial = T.expand(T.reshape(fa, (n, dims.d, 1, 1)), (n, dims.d, hw, hw))
    p = params
    x = T.concat([g4, spatial], axis=1)
    x = T.relu(T.conv1x1(x, p["G.w_fuse"], p["G.b_fuse"]))
    x = T.relu(T.upsample_conv3x3(x, p["G.w_up1"], p["G.b_up1"]))
    x = T.sigmoid(T.upsample_conv3x3(x, p["G.w_up2"], p["G.b_up2"]))
    return T.reshape(x, x.shape[1:]) if single else x
