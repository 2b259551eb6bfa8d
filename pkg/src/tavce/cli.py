"""``tavce`` command line: gen-data, train-metric, train-gen, eval, ablate, grad-check."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from tavce import plotting
from tavce._io import atomic_write_bytes, atomic_write_text
from tavce.checkpoint import load_checkpoint, save_checkpoint
from tavce.config import CliConfig, _unknown, add_schema_flags, read_config_file, resolve
from tavce.errors import ConfigError, TavceError
from tavce.evaluation import evaluate, generate_frames, run_ablation
from tavce.gradsuite import format_suite, run_suite
from tavce.synthdata import generate_dataset, read_dataset, split_holdout, write_dataset
from tavce.training import LossRecord, format_loss_log, train_stage1, train_stage2

log = logging.getLogger("tavce")

COMMANDS = ("gen-data", "train-metric", "train-gen", "eval", "ablate", "grad-check")


def _header(cfg: CliConfig, command: str) -> str:
    return "".join(f"# {line}\n" for line in [f"command = {command}"] + cfg.echo())


def _progress(every: int):
    def cb(rec: LossRecord, label: str = ""):
        if rec.iteration % every == 0:
            log.info("%siter %d loss %.5f", f"[{label}] " if label else "", rec.iteration, rec.total)
    return cb


def _load_split(cfg: CliConfig):
    samples, gen_cfg = read_dataset(cfg.data)
    train, test = split_holdout(samples, cfg.holdout)
    return train, test, gen_cfg


def cmd_gen_data(cfg: CliConfig) -> None:
    cfg.require("data", command="gen-data")
    gen = cfg.generator_config()
    write_dataset(generate_dataset(gen), gen, cfg.data)
    log.info("wrote %d sequences to %s", gen.num_sequences, cfg.data)


def cmd_train_metric(cfg: CliConfig) -> None:
    cfg.require("data", "metric_ckpt", command="train-metric")
    train, _, gen = _load_split(cfg)
    tcfg = cfg.train_config(1, a_dim=gen.A_dim)
    result = train_stage1(train, tcfg, callback=_progress(100))
    save_checkpoint(result.checkpoint, cfg.metric_ckpt)
    atomic_write_text(cfg.metric_ckpt + ".log", _header(cfg, "train-metric") + format_loss_log(result.log))
    if cfg.report_dir:
        plotting.loss_curve(result.log, Path(cfg.report_dir) / "metric_loss.png", "stage 1: metric objective")


def cmd_train_gen(cfg: CliConfig) -> None:
    cfg.require("data", "metric_ckpt", "gen_ckpt", command="train-gen")
    train, _, gen = _load_split(cfg)
    metric = load_checkpoint(cfg.metric_ckpt)
    tcfg = cfg.train_config(2, a_dim=gen.A_dim)
    result = train_stage2(train, metric, tcfg, callback=_progress(100))
    save_checkpoint(result.checkpoint, cfg.gen_ckpt)
    atomic_write_text(cfg.gen_ckpt + ".log", _header(cfg, "train-gen") + format_loss_log(result.log))
    if cfg.report_dir:
        plotting.loss_curve(result.log, Path(cfg.report_dir) / "gen_loss.png", "stage 2: generation")


def cmd_eval(cfg: CliConfig) -> None:
    cfg.require("data", "metric_ckpt", "report_dir", command="eval")
    _, test, _ = _load_split(cfg)
    metric = load_checkpoint(cfg.metric_ckpt)
    stage2 = load_checkpoint(cfg.gen_ckpt) if cfg.gen_ckpt else None
    report = evaluate(test, metric, stage2, cfg.tau, config=cfg.as_dict())
    out = Path(cfg.report_dir)
    atomic_write_text(out / "eval_report.txt", f"# command = eval\n{report.to_text()}")
    atomic_write_bytes(out / "eval_report.bin", report.to_binary())
    plotting.cosine_histogram(report.separation.pos_cosines, report.separation.neg_cosines, out / "cosines.png")
    if stage2 is not None:
        seq = sorted(test, key=lambda s: s.id)[0]
        gen = generate_frames([seq], stage2.params(), stage2.config.use_cerl)[0]
        plotting.frame_strip(seq.frames[1:], gen, out / "frames.png")
    log.info("separation %.4f top1 %.4f", report.separation.separation, report.retrieval_top1)


def cmd_ablate(cfg: CliConfig) -> None:
    cfg.require("data", "metric_ckpt", "report_dir", command="ablate")
    train, test, gen = _load_split(cfg)
    metric = load_checkpoint(cfg.metric_ckpt)
    grid = run_ablation(train, test, metric, cfg.train_config(2, a_dim=gen.A_dim),
                        callback=lambda label, rec: _progress(250)(rec, label))
    out = Path(cfg.report_dir)
    atomic_write_text(out / "ablation.tsv", _header(cfg, "ablate") + grid.to_tsv())
    for cell in grid.cells:
        tag = cell.label.replace(",", "_").replace("=", "-")
        atomic_write_text(out / f"ablation_{tag}.txt", f"# command = ablate\n{cell.report.to_text()}")
    plotting.ablation_bars(
        [c.label for c in grid.cells],
        [c.report.mse for c in grid.cells],
        [c.report.temporal_consistency for c in grid.cells],
        out / "ablation.png",
    )


def cmd_grad_check(cfg: CliConfig) -> int:
    entries = run_suite(seeds=range(cfg.grad_seeds), tol=cfg.grad_tol)
    text = format_suite(entries, cfg.grad_tol)
    sys.stdout.write(text)
    if cfg.report_dir:
        atomic_write_text(Path(cfg.report_dir) / "grad_check.tsv", text)
    failed = [e.name for e in entries if not e.passed]
    if failed:
        raise GradCheckFailed(f"gradient check exceeded tol {cfg.grad_tol} for: {', '.join(failed)}")
    return 0


class GradCheckFailed(TavceError):
    pass


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-metric": cmd_train_metric,
    "train-gen": cmd_train_gen,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", metavar="FILE", help="plain-text 'key = value' config file")
    add_schema_flags(common)
    parser = argparse.ArgumentParser(
        prog="tavce",
        description="Temporal audio-visual correlation embedding: data, training, evaluation.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    docs = {
        "gen-data": "generate a synthetic TVDS dataset",
        "train-metric": "stage 1: train the correlation metric",
        "train-gen": "stage 2: train the generator with the metric frozen",
        "eval": "held-out separation, retrieval and reconstruction report",
        "ablate": "train and evaluate the 4 CERL/CAR variants",
        "grad-check": "finite-difference check of every op and loss",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=docs[name], description=docs[name], allow_abbrev=False)
    return parser


def _fail(exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    sys.stderr.write(f"tavce: error: {type(exc).__name__}: {msg}\n")
    return 2 if isinstance(exc, ConfigError) else 1


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra:
            raise _unknown(extra[0].lstrip("-").split("=")[0].replace("-", "_"))
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(file_values, args)
        HANDLERS[args.command](cfg)
    except (TavceError, ValueError, OSError, KeyError, RuntimeError) as exc:
        return _fail(exc)
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
