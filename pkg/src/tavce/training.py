"""Two-stage training: correlation metric first, then the generator with the metric frozen."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tavce import tensor as T
from tavce.checkpoint import AdamState, Checkpoint, TrainConfig, validate_tensors
from tavce.correlation import car_loss, correlation_stack, covariance, make_triplet_indices, tavc_objective
from tavce.encoders import (
    ModelParams,
    audio_encode,
    cerl_fuse,
    extract_feature_map,
    init_params,
    param_shapes,
    render_frame,
    visual_encode,
)
from tavce.errors import DimensionMismatchError, DivergenceError, NonFiniteError
from tavce.rng import SeededRng, derive_seed
from tavce.synthdata import SequenceSample
from tavce.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    total: float
    render: float = 0.0
    reg: float = 0.0

    def line(self) -> str:
        return f"{self.iteration}\t{self.total!r}\t{self.render!r}\t{self.reg!r}"


def format_loss_log(records: Sequence[LossRecord]) -> str:
    return "".join(r.line() + "\n" for r in records)


def parse_loss_log(text: str) -> list[LossRecord]:
    out = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        it, tot, ren, reg = line.split("\t")
        out.append(LossRecord(int(it), float(tot), float(ren), float(reg)))
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[LossRecord]


# ------------------------------------------------------------------- optimizer
def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, over the tensors in ``params``."""
    for name in params:
        if name not in grads or grads[name] is None:
            raise ValueError(f"adam_step: missing gradient for {name!r}")
        if not np.isfinite(grads[name]).all():
            raise NonFiniteError(f"gradient of {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = dt.type(b1) * m + dt.type(1 - b1) * g
        v[...] = dt.type(b2) * v + dt.type(1 - b2) * g * g
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data = (p.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))).astype(dt)


def _collect_grads(trainable: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in trainable.items()}


def _check_lengths(data: Sequence[SequenceSample], tau: int) -> None:
    if not data:
        raise ValueError("training needs at least one sequence")
    for s in data:
        if s.T < 2 * tau + 3:
            raise ValueError(f"sequence {s.id} has T={s.T}; tau={tau} needs T >= {2 * tau + 3}")


def _stack(data: Sequence[SequenceSample], picks: Sequence[int], attr: str) -> np.ndarray:
    return np.stack([getattr(data[k], attr) for k in picks])


# --------------------------------------------------------------------- stage 1
def stage1_loss(params: ModelParams, audio: np.ndarray, frames: np.ndarray, triplets) -> Tensor:
    """Batched metric objective: per-sequence triplet sums averaged over sequences.

    ``audio`` is B x T x A, ``frames`` B x T x 1 x S x S, ``triplets`` a list of
    per-sequence :class:`TripletIndex` lists.
    """
    b, t_len = audio.shape[:2]
    ea = audio_encode(params, Tensor(audio.reshape(b * t_len, -1)))
    ev = visual_encode(params, Tensor(frames.reshape((b * t_len,) + frames.shape[2:])))
    prev, cur, neg = [], [], []
    for s, trips in enumerate(triplets):
        base = s * t_len
        for tr in trips:
            prev.append(base + tr.i - 1)
            cur.append(base + tr.i)
            neg.append(base + tr.j)
    c_a = correlation_stack(ea, prev, cur)
    c_pos = correlation_stack(ev, prev, cur)
    c_neg = correlation_stack(ev, prev, neg)
    return T.scale(tavc_objective((c_a, c_pos, c_neg)), 1.0 / b)


def train_stage1(
    data: Sequence[SequenceSample],
    cfg: TrainConfig,
    params: ModelParams | None = None,
    callback: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    if cfg.stage != 1:
        raise ValueError(f"train_stage1 needs a stage-1 config, got stage {cfg.stage}")
    _check_lengths(data, cfg.tau)
    if params is None:
        params = init_params(cfg.seed, cfg.dims)
    params.set_trainable(cfg.trainable_groups())
    trainable = params.trainable()
    adam = AdamState.zeros_like(trainable)
    rng = SeededRng(derive_seed(cfg.seed, "stage1-sampling"))
    n_pick = min(cfg.batch_sequences, len(data))
    records: list[LossRecord] = []
    for it in range(cfg.iterations):
        picks = rng.choice(range(len(data)), size=n_pick)
        triplets = [make_triplet_indices(data[k].T, cfg.tau, rng) for k in picks]
        try:
            loss = stage1_loss(params, _stack(data, picks, "audio"), _stack(data, picks, "frames"), triplets)
            T.backward(loss)
            adam_step(trainable, _collect_grads(trainable), adam, cfg.learning_rate)
        except NonFiniteError as exc:
            raise DivergenceError(it, str(exc)) from exc
        T.zero_grads(trainable.values())
        rec = LossRecord(it, loss.item())
        records.append(rec)
        if callback is not None:
            callback(rec)
    params.set_trainable(())
    return TrainResult(Checkpoint.from_training(cfg, params, adam), records)


# --------------------------------------------------------------------- stage 2
@dataclass
class Stage2Batch:
    a_prev: np.ndarray
    a_cur: np.ndarray
    v_prev: np.ndarray
    v_cur: np.ndarray
    v_id: np.ndarray


@dataclass
class Stage2Losses:
    total: Tensor
    render: Tensor
    reg: Tensor | None
    generated: Tensor


def sample_stage2_batch(data: Sequence[SequenceSample], rng: SeededRng, n: int) -> Stage2Batch:
    picks = rng.choice(range(len(data)), size=min(n, len(data)))
    rows = {k: [] for k in ("a_prev", "a_cur", "v_prev", "v_cur", "v_id")}
    for k in picks:
        s = data[k]
        i = rng.integer(1, s.T)
        j = rng.choice([x for x in range(s.T) if x != i])
        rows["a_prev"].append(s.audio[i - 1])
        rows["a_cur"].append(s.audio[i])
        rows["v_prev"].append(s.frames[i - 1])
        rows["v_cur"].append(s.frames[i])
        rows["v_id"].append(s.frames[j])
    return Stage2Batch(**{k: np.stack(v) for k, v in rows.items()})


def generate(params: ModelParams, a_prev, a_cur, v_id, use_cerl: bool) -> Tensor:
    """Forward generation path: identity frame + audio pair -> predicted frame."""
    with T.no_grad():
        f_prev = audio_encode(params, _t(a_prev))
        f_cur = audio_encode(params, _t(a_cur))
        c_a = covariance(f_prev, f_cur)
    f = extract_feature_map(params, _t(v_id))
    g = cerl_fuse(params, f, c_a) if use_cerl else f
    return render_frame(params, g, f_cur)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stage2_losses(params: ModelParams, batch: Stage2Batch, cfg: TrainConfig) -> Stage2Losses:
    with T.no_grad():
        c_a = covariance(audio_encode(params, _t(batch.a_prev)), audio_encode(params, _t(batch.a_cur)))
    v_hat = generate(params, batch.a_prev, batch.a_cur, batch.v_id, cfg.use_cerl)
    render = T.mean(T.square(T.sub(v_hat, _t(batch.v_cur))))
    if not cfg.use_car:
        return Stage2Losses(render, render, None, v_hat)
    with T.no_grad():
        e_prev = visual_encode(params, _t(batch.v_prev))
    c_gen = covariance(e_prev, visual_encode(params, v_hat))
    reg = car_loss((c_a, c_gen))
    total = T.add(render, T.scale(reg, cfg.lambda_reg))
    return Stage2Losses(total, render, reg, v_hat)


def check_metric_compatible(metric: Checkpoint, cfg: TrainConfig) -> None:
    if metric.stage != 1:
        raise ValueError(f"metric checkpoint must come from stage 1, got stage {metric.stage}")
    want = param_shapes(cfg.dims)
    for name in (k for k in want if k.split(".")[0] in ("E_a", "E_v")):
        have = tuple(metric.tensors[name].shape)
        if have != want[name]:
            raise DimensionMismatchError(
                f"tensor {name!r} in metric checkpoint has shape {have}, stage-2 dims expect {want[name]}"
            )


def train_stage2(
    data: Sequence[SequenceSample],
    metric_ckpt: Checkpoint,
    cfg: TrainConfig,
    callback: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    if cfg.stage != 2:
        raise ValueError(f"train_stage2 needs a stage-2 config, got stage {cfg.stage}")
    validate_tensors(metric_ckpt.tensors, metric_ckpt.config)
    check_metric_compatible(metric_ckpt, cfg)
    if not data:
        raise ValueError("training needs at least one sequence")
    params = init_params(cfg.seed, cfg.dims)
    for name in params:
        if name.split(".")[0] in ("E_a", "E_v"):
            params.tensors[name] = Tensor(metric_ckpt.tensors[name].copy())
    params.set_trainable(cfg.trainable_groups())
    trainable = params.trainable()
    adam = AdamState.zeros_like(trainable)
    rng = SeededRng(derive_seed(cfg.seed, "stage2-sampling"))
    records: list[LossRecord] = []
    for it in range(cfg.iterations):
        batch = sample_stage2_batch(data, rng, cfg.batch_sequences)
        try:
            losses = stage2_losses(params, batch, cfg)
            T.backward(losses.total)
            adam_step(trainable, _collect_grads(trainable), adam, cfg.learning_rate)
        except NonFiniteError as exc:
            raise DivergenceError(it, str(exc)) from exc
        T.zero_grads(trainable.values())
        rec = LossRecord(
            it,
            losses.total.item(),
            losses.render.item(),
            losses.reg.item() if losses.reg is not None else 0.0,
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
    params.set_trainable(())
    return TrainResult(Checkpoint.from_training(cfg, params, adam), records)
