"""Run configuration: a flat ``key = value`` file with ``[section]`` headers."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .fedsim import SimConfig
from .strategies import Kind, StrategySpec

SECTIONS = {
    "sim": ("num_clients", "active_clients", "levels", "speed_ratio", "compute_delay",
            "comm_delay", "max_merges", "epochs", "eval_every", "seed"),
    "strategy": ("strategy", "keep_rate", "alpha", "lr", "local_iters", "mu", "buffer_size",
                 "mask_mode", "grouping", "batch_size"),
    "data": ("model", "source", "ingest_path", "ingest_format", "n", "test_n", "dim",
             "classes", "separation", "noise", "hidden", "loss", "d_hat", "p", "q", "bound", "width", "kappa",
             "scale", "bias", "classes_per_level"),
    "theory": ("mode", "subnetworks", "max_staleness", "theory_lr"),
    "output": ("out_dir",),
}
HOME = {key: section for section, keys in SECTIONS.items() for key in keys}


@dataclass(frozen=True)
class RunConfig:
    # sim
    num_clients: int = 104
    active_clients: int = 8
    levels: int = 8
    speed_ratio: float = 5.0
    compute_delay: float = 1.0
    comm_delay: float = 0.0001
    max_merges: typing.Optional[int] = 400
    epochs: typing.Optional[float] = None
    eval_every: int = 0
    seed: int = 0
    # strategy
    strategy: str = "asyncdrop"
    keep_rate: float = 0.75
    alpha: float = 1.0
    lr: float = 0.01
    local_iters: int = 50
    mu: float = 0.0
    buffer_size: int = 4
    mask_mode: str = "exact-k"
    grouping: str = "unit"
    batch_size: int = 0
    # data
    model: str = "mlp"
    source: str = "synthetic"
    ingest_path: str = ""
    ingest_format: str = "csv"
    n: int = 2080
    test_n: int = 520
    dim: int = 32
    classes: int = 8
    separation: float = 1.0
    noise: float = 1.0
    hidden: int = 64
    loss: str = "mse"
    d_hat: int = 2
    p: int = 4
    q: int = 2
    bound: float = 1.0
    width: int = 512
    kappa: float = 1.0
    scale: float = 1.0
    bias: float = 0.8
    classes_per_level: int = 1
    # theory
    mode: str = "sim"
    subnetworks: int = 2
    max_staleness: int = 4
    theory_lr: typing.Optional[float] = None
    # output
    out_dir: str = "runs"

    def __post_init__(self):
        if self.model not in ("mlp", "cnn"):
            raise ConfigError("model must be mlp or cnn")
        if self.source not in ("synthetic", "ingest"):
            raise ConfigError("source must be synthetic or ingest")
        if self.source == "ingest" and not Path(self.ingest_path).is_file():
            raise ConfigError(f"ingest_path {self.ingest_path!r} does not exist")
        if self.mode not in ("sim", "theory"):
            raise ConfigError("mode must be sim or theory")
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigError(f"bias must be in [0, 1], got {self.bias}")
        for name in ("n", "dim", "classes", "hidden", "d_hat", "p", "q", "width",
                     "subnetworks", "classes_per_level"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.separation < 0 or self.noise < 0:
            raise ConfigError("separation and noise must be >= 0")
        if self.max_staleness < 0 or self.test_n < 0:
            raise ConfigError("max_staleness and test_n must be >= 0")
        self.sim_config()
        self.strategy_spec()

    def sim_config(self) -> SimConfig:
        return SimConfig(self.num_clients, self.active_clients, self.levels, self.speed_ratio,
                         self.compute_delay, self.comm_delay, self.max_merges, self.epochs,
                         self.eval_every, self.seed)

    def strategy_spec(self) -> StrategySpec:
        try:
            kind = Kind(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown strategy {self.strategy!r}") from None
        return StrategySpec(kind, self.keep_rate, self.alpha, self.lr, self.local_iters,
                            self.mu, self.buffer_size, self.mask_mode, self.grouping,
                            self.batch_size)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str):
    typ = _TYPES[key]
    optional = typing.get_origin(typ) is typing.Union
    if optional:
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
        if raw.lower() == "none":
            return None
    if typ is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(raw)
    if typ is str:
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return raw[1:-1]
        return raw
    return typ(raw)


def parse_text(text: str) -> RunConfig:
    values = {}
    lines = {}
    section = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {line_no}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in HOME:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if section is not None and HOME[key] != section:
            raise ConfigError(f"line {line_no}: key {key!r} belongs in [{HOME[key]}]")
        try:
            values[key] = _convert(key, raw)
        except ValueError:
            raise ConfigError(f"line {line_no}: bad value {raw!r} for {key}") from None
        lines[key] = line_no
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        msg = str(exc)
        for key, line_no in lines.items():
            if msg.startswith(key) or f" {key} " in f" {msg} ":
                raise ConfigError(f"line {line_no}: {key}: {msg}") from None
        raise


def parse_config(path) -> RunConfig:
    """Read and validate a config file; missing keys take their defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"' if value == "" or value != value.strip() else value
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Every effective setting, grouped by section; parses back to ``config``."""
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        out.extend(f"{key} = {_render(getattr(config, key))}" for key in keys)
        out.append("")
    return "\n".join(out)

