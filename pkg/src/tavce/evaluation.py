"""Held-out measurements: similarity separation, retrieval, reconstruction, ablation grid."""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from tavce import tensor as T
from tavce._io import crc32
from tavce.checkpoint import Checkpoint, TrainConfig
from tavce.correlation import covariance, flat_cosine, negative_candidates
from tavce.encoders import ModelParams, audio_encode, visual_encode
from tavce.errors import DimensionMismatchError, FormatError
from tavce.synthdata import SequenceSample
from tavce.tensor import Tensor
from tavce.training import LossRecord, generate, train_stage2


def thread_count() -> int:
    """Worker count from ``TAVCE_THREADS`` (1 = single-threaded reference mode)."""
    raw = os.environ.get("TAVCE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TAVCE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"TAVCE_THREADS must be a positive integer, got {raw!r}")
    return n


def _map_ordered(fn: Callable, items: Sequence) -> list:
    """Map in input order; merge order is fixed regardless of thread count."""
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class SeparationReport:
    mean_pos_cosine: float
    mean_neg_cosine: float
    separation: float
    num_pos: int
    num_neg: int
    degenerate_count: int
    pos_cosines: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    neg_cosines: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


@dataclass
class EvalReport:
    separation: SeparationReport
    retrieval_top1: float
    chance_level: float
    mse: float | None = None
    psnr: float | None = None
    temporal_consistency: float | None = None
    config: dict = field(default_factory=dict)

    def as_items(self) -> list[tuple[str, float | int]]:
        s = self.separation
        items: list[tuple[str, float | int]] = [
            ("mean_pos_cosine", s.mean_pos_cosine),
            ("mean_neg_cosine", s.mean_neg_cosine),
            ("separation", s.separation),
            ("num_pos", s.num_pos),
            ("num_neg", s.num_neg),
            ("degenerate_count", s.degenerate_count),
            ("retrieval_top1", self.retrieval_top1),
            ("chance_level", self.chance_level),
        ]
        for name in ("mse", "psnr", "temporal_consistency"):
            value = getattr(self, name)
            if value is not None:
                items.append((name, value))
        return items

    def to_text(self) -> str:
        lines = [f"# {k} = {v}" for k, v in self.config.items()]
        lines += [f"{k} = {v!r}" for k, v in self.as_items()]
        return "\n".join(lines) + "\n"

    def to_binary(self) -> bytes:
        """Flat mirror: "TVER" | u32 n | n x (u16 len | key | f64 value) | u32 crc32."""
        body = bytearray(struct.pack("<I", len(self.as_items())))
        for k, v in self.as_items():
            raw = k.encode("utf-8")
            body += struct.pack("<H", len(raw)) + raw + struct.pack("<d", float(v))
        return b"TVER" + bytes(body) + struct.pack("<I", crc32(bytes(body)))


def parse_report_binary(raw: bytes) -> dict[str, float]:
    if raw[:4] != b"TVER":
        raise FormatError("not a TVER report (bad magic)")
    body = raw[4:-4]
    if crc32(body) != struct.unpack("<I", raw[-4:])[0]:
        raise FormatError("CRC32 mismatch in report")
    (n,) = struct.unpack_from("<I", body, 0)
    pos, out = 4, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, pos)
        key = body[pos + 2:pos + 2 + ln].decode("utf-8")
        (val,) = struct.unpack_from("<d", body, pos + 2 + ln)
        out[key] = val
        pos += 2 + ln + 8
    return out


def parse_report_text(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        out[key] = float(value)
    return out


# ------------------------------------------------------------------- helpers
def _check_dims(data: Sequence[SequenceSample], params: ModelParams) -> None:
    if not data:
        raise ValueError("evaluation needs a non-empty dataset")
    dims = params.dims
    for s in data:
        if s.audio.shape[1] != dims.a_dim:
            raise DimensionMismatchError(f"sequence {s.id}: audio dim {s.audio.shape[1]} vs model a_dim {dims.a_dim}")
        if s.frames.shape[-1] != dims.frame:
            raise DimensionMismatchError(f"sequence {s.id}: frame size {s.frames.shape[-1]} vs model {dims.frame}")


def _embed(params: ModelParams, s: SequenceSample) -> tuple[Tensor, Tensor]:
    with T.no_grad():
        return audio_encode(params, Tensor(s.audio)), visual_encode(params, Tensor(s.frames))


def _pair_cosines(c_a: Tensor, c_v: Tensor) -> tuple[np.ndarray, np.ndarray]:
    with T.no_grad():
        cos = flat_cosine(c_a, c_v)
    return np.asarray(cos.value.data, dtype=np.float64), np.asarray(cos.degenerate)


def _sequence_separation(params: ModelParams, tau: int, s: SequenceSample):
    ea, ev = _embed(params, s)
    t_len = s.T
    anchors = np.arange(1, t_len)
    with T.no_grad():
        c_a = covariance(T.take(ea, anchors - 1), T.take(ea, anchors))
        c_pos = covariance(T.take(ev, anchors - 1), T.take(ev, anchors))
    pos, pos_deg = _pair_cosines(c_a, c_pos)
    rows, cols = [], []
    for k, i in enumerate(anchors):
        for j in negative_candidates(t_len, int(i), tau):
            rows.append(k)
            cols.append(j)
    if rows:
        rows_a, cols_a = np.asarray(rows), np.asarray(cols)
        with T.no_grad():
            c_neg = covariance(T.take(ev, anchors[rows_a] - 1), T.take(ev, cols_a))
        neg, neg_deg = _pair_cosines(T.take(c_a, rows_a), c_neg)
    else:
        neg, neg_deg = np.zeros(0), np.zeros(0, dtype=bool)
    return pos, neg, int(pos_deg.sum() + neg_deg.sum())


def separation_stats(data: Sequence[SequenceSample], ckpt: Checkpoint | ModelParams, tau: int = 2) -> SeparationReport:
    """Mean audio/visual correlation cosine for adjacent vs all non-window frames."""
    params = ckpt if isinstance(ckpt, ModelParams) else ckpt.params()
    _check_dims(data, params)
    ordered = sorted(data, key=lambda s: s.id)
    parts = _map_ordered(lambda s: _sequence_separation(params, tau, s), ordered)
    pos = np.concatenate([p[0] for p in parts])
    neg = np.concatenate([p[1] for p in parts])
    deg = sum(p[2] for p in parts)
    mp = float(pos.mean()) if pos.size else 0.0
    mn = float(neg.mean()) if neg.size else 0.0
    return SeparationReport(mp, mn, mp - mn, int(pos.size), int(neg.size), deg, pos, neg)


def _sequence_retrieval(params: ModelParams, s: SequenceSample) -> tuple[int, int]:
    ea, ev = _embed(params, s)
    t_len = s.T
    hits = 0
    with T.no_grad():
        for i in range(1, t_len):
            cands = np.array([j for j in range(t_len) if j != i - 1])
            q = covariance(T.take(ea, np.full(len(cands), i - 1)), T.take(ea, np.full(len(cands), i)))
            c_v = covariance(T.take(ev, np.full(len(cands), i - 1)), T.take(ev, cands))
            scores, _ = _pair_cosines(q, c_v)
            # argmax returns the first maximum: ties go to the lowest j
            if cands[int(np.argmax(scores))] == i:
                hits += 1
    return hits, t_len - 1


def retrieval_accuracy(data: Sequence[SequenceSample], ckpt: Checkpoint | ModelParams) -> tuple[float, float]:
    """Top-1 rate of picking frame ``i`` as the partner of ``i-1`` for audio pair (i-1, i)."""
    params = ckpt if isinstance(ckpt, ModelParams) else ckpt.params()
    _check_dims(data, params)
    ordered = sorted(data, key=lambda s: s.id)
    parts = _map_ordered(lambda s: _sequence_retrieval(params, s), ordered)
    hits = sum(p[0] for p in parts)
    total = sum(p[1] for p in parts)
    chance = float(np.mean([1.0 / (s.T - 1) for s in ordered]))
    return hits / total, chance


def binomial_band(p: float, n: int, k: float = 3.0) -> float:
    return k * math.sqrt(p * (1 - p) / n)


# ------------------------------------------------------------ reconstruction
def generate_frames(data: Sequence[SequenceSample], params: ModelParams, use_cerl: bool) -> list[np.ndarray]:
    """Regenerate frames 1..T-1 of every sequence from frame 0 and the audio."""
    out = []
    with T.no_grad():
        for s in data:
            t_len = s.T
            v_id = np.repeat(s.frames[:1], t_len - 1, axis=0)
            v_hat = generate(params, s.audio[:-1], s.audio[1:], v_id, use_cerl)
            out.append(v_hat.data)
    return out


def reconstruction_from_frames(
    data: Sequence[SequenceSample], generated: Sequence[np.ndarray], params: ModelParams
) -> tuple[float, float, float, int]:
    """mse, psnr, temporal consistency and degenerate count for given frames 1..T-1."""
    sq_sum, count = 0.0, 0
    cosines, degenerate = [], 0
    for s, gen in zip(data, generated):
        target = s.frames[1:].astype(np.float64)
        sq_sum += float(((gen.astype(np.float64) - target) ** 2).sum())
        count += target.size
        with T.no_grad():
            ea = audio_encode(params, Tensor(s.audio))
            ev_prev = visual_encode(params, Tensor(s.frames[:-1]))
            ev_gen = visual_encode(params, Tensor(gen.astype(s.frames.dtype)))
            c_a = covariance(T.take(ea, np.arange(0, s.T - 1)), T.take(ea, np.arange(1, s.T)))
            c_gen = covariance(ev_prev, ev_gen)
        cos, deg = _pair_cosines(c_a, c_gen)
        cosines.append(cos)
        degenerate += int(deg.sum())
    mse = sq_sum / count
    psnr = 10.0 * math.log10(1.0 / mse) if mse > 0 else math.inf
    return mse, psnr, float(np.concatenate(cosines).mean()), degenerate


def reconstruction_metrics(data: Sequence[SequenceSample], stage2_ckpt: Checkpoint) -> tuple[float, float, float]:
    if stage2_ckpt.stage != 2:
        raise ValueError("reconstruction_metrics needs a stage-2 checkpoint")
    params = stage2_ckpt.params()
    _check_dims(data, params)
    ordered = sorted(data, key=lambda s: s.id)
    gen = generate_frames(ordered, params, stage2_ckpt.config.use_cerl)
    mse, psnr, tc, _ = reconstruction_from_frames(ordered, gen, params)
    return mse, psnr, tc


def evaluate(
    data: Sequence[SequenceSample],
    metric_ckpt: Checkpoint,
    stage2_ckpt: Checkpoint | None = None,
    tau: int = 2,
    config: dict | None = None,
) -> EvalReport:
    sep = separation_stats(data, metric_ckpt, tau)
    top1, chance = retrieval_accuracy(data, metric_ckpt)
    report = EvalReport(sep, top1, chance, config=dict(config or {}))
    if stage2_ckpt is not None:
        report.mse, report.psnr, report.temporal_consistency = reconstruction_metrics(data, stage2_ckpt)
    return report


# ------------------------------------------------------------------ ablation
ABLATION_CELLS = ((False, False), (False, True), (True, False), (True, True))


def _onoff(flag: bool) -> str:
    return "on" if flag else "off"


@dataclass
class AblationCell:
    use_cerl: bool
    use_car: bool
    report: EvalReport
    log: list[LossRecord]
    checkpoint: Checkpoint

    @property
    def label(self) -> str:
        return f"cerl={_onoff(self.use_cerl)},car={_onoff(self.use_car)}"


@dataclass
class AblationGrid:
    cells: list[AblationCell]

    def cell(self, use_cerl: bool, use_car: bool) -> AblationCell:
        for c in self.cells:
            if c.use_cerl == use_cerl and c.use_car == use_car:
                return c
        raise KeyError((use_cerl, use_car))

    def to_tsv(self) -> str:
        rows = ["cerl\tcar\tmse\tpsnr\ttemporal_consistency\tfinal_loss_total\tfinal_loss_render\tfinal_loss_reg"]
        for c in self.cells:
            last = c.log[-1]
            r = c.report
            rows.append(
                f"{_onoff(c.use_cerl)}\t{_onoff(c.use_car)}\t{r.mse!r}\t{r.psnr!r}\t"
                f"{r.temporal_consistency!r}\t{last.total!r}\t{last.render!r}\t{last.reg!r}"
            )
        return "\n".join(rows) + "\n"


class AblationError(RuntimeError):
    def __init__(self, label: str, exc: Exception):
        self.label = label
        super().__init__(f"ablation cell {label} failed: {exc}")


def run_ablation(
    train_data: Sequence[SequenceSample],
    eval_data: Sequence[SequenceSample],
    metric_ckpt: Checkpoint,
    base_cfg: TrainConfig,
    callback: Callable[[str, LossRecord], None] | None = None,
) -> AblationGrid:
    """Train the four CERL/CAR stage-2 variants from one metric checkpoint and seed."""
    if base_cfg.stage != 2:
        raise ValueError("run_ablation needs a stage-2 base config")
    sep = separation_stats(eval_data, metric_ckpt, base_cfg.tau)
    top1, chance = retrieval_accuracy(eval_data, metric_ckpt)
    cells = []
    for use_cerl, use_car in ABLATION_CELLS:
        cfg = replace(base_cfg, use_cerl=use_cerl, use_car=use_car)
        label = f"cerl={_onoff(use_cerl)},car={_onoff(use_car)}"
        cb = (lambda rec, label=label: callback(label, rec)) if callback else None
        try:
            result = train_stage2(train_data, metric_ckpt, cfg, callback=cb)
            mse, psnr, tc = reconstruction_metrics(eval_data, result.checkpoint)
        except Exception as exc:  # labelled and re-raised
            raise AblationError(label, exc) from exc
        report = EvalReport(sep, top1, chance, mse, psnr, tc, config=cfg.as_dict())
        cells.append(AblationCell(use_cerl, use_car, report, result.log, result.checkpoint))
    return AblationGrid(cells)
