"""Finite-difference sweep over every registered op and every loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from tavce import tensor as T
from tavce.correlation import car_loss, covariance, flat_cosine, tavc_objective
from tavce.encoders import (
    ModelDims,
    ModelParams,
    audio_encode,
    cerl_fuse,
    extract_feature_map,
    init_params,
    render_frame,
    visual_encode,
)
from tavce.gradcheck import GradCheckReport, check_gradients
from tavce.rng import SeededRng, derive_seed
from tavce.tensor import Tensor

TINY_DIMS = ModelDims(a_dim=8, d=4, c=8, frame=16)

# (name, builder) where builder(rng) -> (f(*tensors) -> scalar, list of float64 inputs)
Case = Callable[[SeededRng], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _u(rng: SeededRng, *shape, lo=-1.0, hi=1.0) -> np.ndarray:
    return lo + (hi - lo) * rng.uniform(int(np.prod(shape))).reshape(shape)


def _away(rng: SeededRng, *shape) -> np.ndarray:
    """Uniform magnitudes in [0.5, 1.5] with random signs (no zero crossings)."""
    mag = _u(rng, *shape, lo=0.5, hi=1.5)
    sign = np.where(rng.uniform(mag.size).reshape(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(w)))


def _unary(op, make=_u, shape=(3, 4)):
    def build(rng):
        x = make(rng, *shape)
        w = _u(rng, *op(Tensor(x)).shape) if op(Tensor(x)).shape else np.array(1.0)
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), make_b=_u):
    def build(rng):
        a, b = _u(rng, *shape_a), make_b(rng, *shape_b)
        w = _u(rng, *op(Tensor(a), Tensor(b)).shape)
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _conv_case(stride, padding, bias=True):
    def build(rng):
        x, k, b = _u(rng, 2, 3, 6, 6), _u(rng, 4, 3, 3, 3), _u(rng, 4)
        out_shape = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding).shape
        w = _u(rng, *out_shape)
        if bias:
            return (lambda xx, kk, bb: _weighted(T.conv2d(xx, kk, bb, stride, padding), w)), [x, k, b]
        return (lambda xx, kk: _weighted(T.conv2d(xx, kk, None, stride, padding), w)), [x, k]
    return build


def _conv1x1_case(rng):
    x, k, b = _u(rng, 2, 3, 4, 4), _u(rng, 5, 3), _u(rng, 5)
    w = _u(rng, 2, 5, 4, 4)
    return (lambda xx, kk, bb: _weighted(T.conv1x1(xx, kk, bb), w)), [x, k, b]


def _upconv_case(rng):
    x, k, b = _u(rng, 1, 2, 3, 3), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    w = _u(rng, 1, 3, 6, 6)
    return (lambda xx, kk, bb: _weighted(T.upsample_conv3x3(xx, kk, bb), w)), [x, k, b]


def _take_case(rng):
    x = _u(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w = _u(rng, 4, 3)
    return (lambda a: _weighted(T.take(a, idx), w)), [x]


def _concat_case(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 2)
    w = _u(rng, 2, 5)
    return (lambda x, y: _weighted(T.concat([x, y], axis=1), w)), [a, b]


def _stack_case(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 3)
    w = _u(rng, 2, 2, 3)
    return (lambda x, y: _weighted(T.stack([x, y]), w)), [a, b]


def _expand_case(rng):
    x = _u(rng, 3, 1)
    w = _u(rng, 2, 3, 4)
    return (lambda a: _weighted(T.expand(a, (2, 3, 4)), w)), [x]


def _norm_case(rng):
    x = _away(rng, 3, 4)
    w = _u(rng, 3)
    return (lambda a: T.add(T.norm(a), _weighted(T.norm(a, axis=1), w))), [x]


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add, (3, 4), (4,)),
    "sub": _binary(T.sub, (3, 4), (3, 1)),
    "mul": _binary(T.mul),
    "div": _binary(T.div, make_b=_away),
    "neg": _unary(T.neg),
    "scale": _unary(lambda a: T.scale(a, -1.7)),
    "relu": _unary(T.relu, make=_away),
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "sqrt": _unary(T.sqrt, make=lambda rng, *s: _u(rng, *s, lo=0.5, hi=1.5)),
    "square": _unary(T.square),
    "matmul": _binary(T.matmul, (2, 3, 4), (4, 5)),
    "conv2d": _conv_case(2, 1),
    "conv1x1": _conv1x1_case,
    "upsample2x": _unary(T.upsample2x, shape=(1, 2, 3, 3)),
    "upsample_conv3x3": _upconv_case,
    "sum": _unary(lambda a: T.sum(a, axis=0)),
    "mean": _unary(lambda a: T.mean(a, axis=1, keepdims=True)),
    "norm": _norm_case,
    "reshape": _unary(lambda a: T.reshape(a, (2, 6))),
    "transpose": _unary(T.transpose, shape=(2, 3, 4)),
    "take": _take_case,
    "concat": _concat_case,
    "stack": _stack_case,
    "expand": _expand_case,
}


# ------------------------------------------------------------------- losses
def _cov_case(rng):
    a, b = _u(rng, 5), _u(rng, 5)
    w = _u(rng, 5, 5)
    return (lambda x, y: _weighted(covariance(x, y), w)), [a, b]


def _cos_case(rng):
    a, b = _u(rng, 4, 4), _u(rng, 4, 4)
    return (lambda x, y: flat_cosine(x, y).value), [a, b]


def _tavc_case(rng):
    fa = [_u(rng, 4, 5) for _ in range(3)]

    def f(e_a, e_v, e_neg):
        c_a = covariance(T.take(e_a, np.arange(3)), T.take(e_a, np.arange(1, 4)))
        pos = covariance(T.take(e_v, np.arange(3)), T.take(e_v, np.arange(1, 4)))
        neg = covariance(T.take(e_v, np.arange(3)), T.take(e_neg, np.array([3, 0, 1])))
        return tavc_objective((c_a, pos, neg))

    return f, fa


def _car_case(rng):
    a, b = _u(rng, 3, 4, 4), _u(rng, 3, 4, 4)
    return (lambda x, y: car_loss((x, y))), [a, b]


def _cerl_case(rng):
    params = init_params(derive_seed(7, "cerl-case"), TINY_DIMS, dtype=np.float64)
    f0, c0 = _u(rng, 2, 8, 4, 4), _u(rng, 2, 4, 4)
    w = _u(rng, 2, 8, 4, 4)
    return (lambda f, c: _weighted(cerl_fuse(params, f, c), w)), [f0, c0]


def _pipeline_case(
    rng, param_names=("E_f.b1", "CERL.conv2", "CERL.conv1", "G.b_fuse", "G.b_up1", "G.b_up2")
):
    """Full stage-2 composite loss at tiny dims: L_render + L_reg, as a function of several tensors."""
    dims = TINY_DIMS
    params = init_params(derive_seed(int(rng.next_u64()), "pipeline"), dims, dtype=np.float64)
    for name, t in params.items():
        if name.split(".")[1].startswith("b"):
            t.data = 0.1 * _u(rng, *t.shape)
    a_prev, a_cur = _u(rng, 2, dims.a_dim), _u(rng, 2, dims.a_dim)
    s = dims.frame
    v_prev = _u(rng, 2, 1, s, s, lo=0.0, hi=1.0)
    v_cur = _u(rng, 2, 1, s, s, lo=0.0, hi=1.0)
    v_id = _u(rng, 2, 1, s, s, lo=0.0, hi=1.0)

    def f(a_in, *weights):
        local = dict(params.tensors)
        local.update(zip(param_names, weights))
        p = ModelParams(dims, local)
        c_a = covariance(audio_encode(p, Tensor(a_prev)), audio_encode(p, a_in))
        g = cerl_fuse(p, extract_feature_map(p, Tensor(v_id)), c_a)
        v_hat = render_frame(p, g, audio_encode(p, a_in))
        render = T.mean(T.square(T.sub(v_hat, Tensor(v_cur))))
        c_gen = covariance(visual_encode(p, Tensor(v_prev)), visual_encode(p, v_hat))
        return T.add(render, car_loss((c_a, c_gen)))

    return f, [a_cur] + [params[n].data.copy() for n in param_names]


LOSS_CASES: dict[str, Case] = {
    "covariance": _cov_case,
    "flat_cosine": _cos_case,
    "cerl_fuse": _cerl_case,
    "tavc_objective": _tavc_case,
    "car_loss": _car_case,
    "stage2_pipeline": _pipeline_case,
}


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float


def check_case(name: str, case: Case, seeds=range(5), eps: float = 1e-5, tol: float = 1e-4) -> SuiteEntry:
    start = time.perf_counter()
    worst = 0.0
    for seed in seeds:
        rng = SeededRng(derive_seed(seed, "gradsuite", name))
        f, inputs = case(rng)
        for k in range(len(inputs)):
            def partial(t, k=k):
                args = [Tensor(x) for x in inputs]
                args[k] = t
                return f(*args)

            rep: GradCheckReport = check_gradients(partial, inputs[k], eps, tol)
            worst = max(worst, rep.max_rel_error)
    return SuiteEntry(name, worst, worst <= tol, time.perf_counter() - start)


def run_suite(seeds=range(5), eps: float = 1e-5, tol: float = 1e-4) -> list[SuiteEntry]:
    missing = set(T.REGISTERED_OPS) - set(OP_CASES)
    if missing:
        raise RuntimeError(f"registered ops without a gradient case: {sorted(missing)}")
    entries = [check_case(n, c, seeds, eps, tol) for n, c in OP_CASES.items()]
    entries += [check_case(n, c, seeds, eps, tol) for n, c in LOSS_CASES.items()]
    return entries


def format_suite(entries: list[SuiteEntry], tol: float) -> str:
    lines = [f"# tol = {tol!r}", "name\tmax_rel_error\tstatus"]
    for e in entries:
        lines.append(f"{e.name}\t{e.max_rel_error:.3e}\t{'PASS' if e.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
