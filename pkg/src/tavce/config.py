"""Closed configuration schema shared by the config-file parser and the CLI flags.

Precedence is defaults <- ``key = value`` file <- command-line flags.
"""

from __future__ import annotations

import argparse
import difflib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from tavce.checkpoint import TrainConfig
from tavce.encoders import ModelDims
from tavce.errors import ConfigError
from tavce.synthdata import GeneratorConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(raw: str):
        return None if raw.strip().lower() in ("", "none", "default") else conv(raw)

    parse.__name__ = conv.__name__
    return parse


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: str | None = None  # defaults to --name with dashes
    group: str = "data"

    @property
    def option(self) -> str:
        return "--" + (self.flag or self.name.replace("_", "-"))

    @property
    def is_bool(self) -> bool:
        return self.parse is _parse_bool


SCHEMA: tuple[Key, ...] = (
    # dataset generation
    Key("seed", int, 0, "dataset seed"),
    Key("seqs", int, 50, "number of synthetic sequences"),
    Key("T", int, 32, "frames per sequence", flag="T"),
    Key("a_dim", int, 64, "audio clip dimension"),
    Key("k", int, 4, "latent dimension", flag="k"),
    Key("rho", float, 0.9, "AR(1) smoothness"),
    Key("sigma_a", float, 0.05, "audio noise std"),
    Key("gamma", float, 1.0, "audio-visual coupling in [0, 1]"),
    # model / training
    Key("train_seed", int, 0, "training seed (init and sampling)", group="train"),
    Key("D", int, 16, "embedding dimension", flag="D", group="train"),
    Key("C", int, 32, "feature-map channels", flag="C", group="train"),
    Key("iters", _optional(int), None, "iterations (none = 2000 stage 1 / 1500 stage 2)", group="train"),
    Key("lr", _optional(float), None, "learning rate (none = 1e-4 stage 1 / 2e-4 stage 2)", group="train"),
    Key("batch", int, 4, "sequences per step", group="train"),
    Key("tau", int, 2, "negative exclusion window", group="train"),
    Key("lambda_reg", float, 1.0, "weight of the correlation regularizer", group="train"),
    Key("use_cerl", _parse_bool, True, "fuse the audio correlation into features", flag="cerl", group="train"),
    Key("use_car", _parse_bool, True, "add the correlation-aware regularizer", flag="car", group="train"),
    Key("holdout", float, 0.2, "held-out fraction (last sequence ids)", group="train"),
    Key("grad_tol", float, 1e-4, "grad-check relative tolerance", group="train"),
    Key("grad_seeds", int, 5, "grad-check seeds per case", group="train"),
    # paths
    Key("data", _optional(str), None, "TVDS dataset path", group="paths"),
    Key("metric_ckpt", _optional(str), None, "stage-1 TVCE checkpoint path", group="paths"),
    Key("gen_ckpt", _optional(str), None, "stage-2 TVCE checkpoint path", group="paths"),
    Key("report_dir", _optional(str), None, "directory for reports and figures", group="paths"),
)
KEYS = {k.name: k for k in SCHEMA}


class CliConfig:
    """Fully resolved configuration; attribute access by schema key."""

    def __init__(self, values: dict[str, Any]):
        self._values = dict(values)

    def __getattr__(self, name: str):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other) -> bool:
        return isinstance(other, CliConfig) and self._values == other._values

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def echo(self) -> list[str]:
        return [f"{k.name} = {self._values[k.name]}" for k in SCHEMA]

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            seed=self.seed, num_sequences=self.seqs, T=self.T, A_dim=self.a_dim,
            k=self.k, rho=self.rho, sigma_a=self.sigma_a, gamma=self.gamma,
        )

    def train_config(self, stage: int, a_dim: int | None = None) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            iterations=self.iters,
            learning_rate=self.lr,
            batch_sequences=self.batch,
            tau=self.tau,
            lambda_reg=self.lambda_reg,
            use_cerl=self.use_cerl,
            use_car=self.use_car,
            seed=self.train_seed,
            dims=ModelDims(a_dim=a_dim or self.a_dim, d=self.D, c=self.C),
        )

    def require(self, *names: str, command: str = "") -> None:
        missing = [n for n in names if self._values.get(n) is None]
        if missing:
            opts = ", ".join(KEYS[n].option for n in missing)
            raise ConfigError(f"{command or 'command'} requires {opts}")


def _unknown(name: str) -> ConfigError:
    close = difflib.get_close_matches(name, list(KEYS), n=1, cutoff=0.0)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {name!r}{hint}")


def _convert(key: Key, raw: str, origin: str):
    try:
        return key.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {key.name!r}: {exc}") from None


def read_config_file(path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        name, raw = (part.strip() for part in line.split("=", 1))
        if name not in KEYS:
            raise _unknown(name)
        out[name] = _convert(KEYS[name], raw, f"{path}:{lineno}")
    return out


def add_schema_flags(parser: argparse.ArgumentParser) -> None:
    for key in SCHEMA:
        text = f"[{key.name}] {key.help} (default: {key.default})"
        if key.is_bool:
            parser.add_argument(key.option, dest=key.name, action=argparse.BooleanOptionalAction, default=None, help=text)
        else:
            parser.add_argument(key.option, dest=key.name, type=str, default=None, metavar=key.name.upper(), help=text)


def resolve(file_values: dict[str, Any], flag_ns: argparse.Namespace) -> CliConfig:
    values = {k.name: k.default for k in SCHEMA}
    values.update(file_values)
    for key in SCHEMA:
        raw = getattr(flag_ns, key.name, None)
        if raw is None:
            continue
        values[key.name] = raw if key.is_bool else _convert(key, raw, key.option)
    return CliConfig(values)


def parse_config(file: str | None, flags: list[str]) -> CliConfig:
    """Resolve defaults <- file <- flags for a bare list of flags (no subcommand)."""
    parser = argparse.ArgumentParser(add_help=False, exit_on_error=False, allow_abbrev=False)
    add_schema_flags(parser)
    try:
        ns, extra = parser.parse_known_args(flags)
    except argparse.ArgumentError as exc:
        raise ConfigError(str(exc)) from None
    if extra:
        name = extra[0].lstrip("-").split("=")[0].replace("-", "_")
        raise _unknown(name)
    return resolve(read_config_file(file) if file else {}, ns)
