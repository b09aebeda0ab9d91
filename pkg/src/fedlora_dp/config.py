"""Flat ``key = value`` run configuration: parsing, validation, snapshots.

The format is line-based: blank lines and ``#`` comments are ignored, every
other line must be ``key = value``.  Unknown keys and out-of-range values are
errors that carry the offending line number.  ``snapshot()`` serialises a
config canonically so that re-parsing reproduces an equal value.
"""

import math
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_text", "MODES"]

MODES = ("run", "verify", "sweep_epsilon", "sweep_clip", "sweep_rank", "sweep_size", "mia", "report")
STRATEGY_NAMES = ("fedavg", "fedprox", "scaffold", "fedavgm", "fedadagrad", "fedyogi", "fedadam")
CLIP_MODES = ("calibrated", "absolute")


class ConfigError(ValueError):
    """Configuration problem, annotated with the source line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the command-line runner, with federation-scale defaults."""

    experiment_name: str = "run"
    output_dir: str = "runs"
    mode: str = "run"
    seed: int = 0

    rounds: int = 200
    clients: int = 20
    sampled_per_round: int = 2
    local_epochs: int = 10
    batch_size: int = 16
    lr_start: float = 5e-5
    lr_end: float = 1e-6
    strategy: str = "fedavg"
    max_workers: int = 1

    dp_enabled: bool = False
    epsilon: float = 25.0
    epsilon_b: float = 0.0  # 0 means "use epsilon"
    epsilon_a: float = 0.0
    delta: float = 1e-5
    clip_mode: str = "calibrated"
    clip_value: float = 0.1
    clip_quantile: float = 0.9
    calibration_rounds: int = 3

    rank: int = 32
    lora_scale: float = 64.0
    prox_mu: float = 0.01
    server_lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    momentum: float = 0.9

    task_m: int = 16
    task_n: int = 8
    task_rank: int = 4
    samples_per_client: int = 50
    sigma_obs: float = 0.0
    heterogeneity: float = 0.0

    verify_fast: bool = False

    sweep_epsilons: tuple[float, ...] = (5.0, 10.0, 15.0, 25.0)
    sweep_clips: tuple[float, ...] = (0.1, 1.0)
    sweep_ranks: tuple[int, ...] = (8, 16, 32, 64, 128)
    sweep_sizes: tuple[tuple[int, int], ...] = ((32, 32), (40, 40))
    noise_draws: int = 100_000
    noise_sigma_beta: float = 1.0
    noise_sigma_alpha: float = 1.0
    sweep_norm_b: float = 1.0
    sweep_norm_a: float = 1.0

    mia_trials: int = 10_000
    mia_epsilon: float = 1.0
    mia_rank: int = 4
    mia_epochs: int = 5
    mia_batch_size: int = 4
    mia_lr: float = 0.01
    mia_dataset_size: int = 8
    mia_input_scale: float = 10.0

    def resolved_epsilon_b(self) -> float:
        return self.epsilon_b if self.epsilon_b > 0 else self.epsilon

    def resolved_epsilon_a(self) -> float:
        return self.epsilon_a if self.epsilon_a > 0 else self.epsilon

    def snapshot(self) -> str:
        """Canonical key = value text re-parsing to an equal config."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{m}x{n}" for m, n in value)
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_bool(raw: str, key: str, line: int) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be a boolean (true/false), got {raw!r}", line)


def _parse_int(raw: str, key: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}", line) from None


def _parse_float(raw: str, key: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}", line) from None
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite, got {raw!r}", line)
    return value


def _parse_float_list(raw: str, key: str, line: int) -> tuple[float, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{key} must be a non-empty comma-separated list", line)
    return tuple(_parse_float(p, key, line) for p in parts)


def _parse_int_list(raw: str, key: str, line: int) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{key} must be a non-empty comma-separated list", line)
    return tuple(_parse_int(p, key, line) for p in parts)


def _parse_size_list(raw: str, key: str, line: int) -> tuple[tuple[int, int], ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{key} must be a non-empty comma-separated list", line)
    pairs = []
    for p in parts:
        if "x" not in p:
            raise ConfigError(f"{key} entries must look like MxN, got {p!r}", line)
        left, _, right = p.partition("x")
        pairs.append((_parse_int(left, key, line), _parse_int(right, key, line)))
    return tuple(pairs)


_PARSERS = {
    bool: _parse_bool,
    int: _parse_int,
    float: _parse_float,
    str: lambda raw, key, line: raw,
}

_LIST_PARSERS = {
    "sweep_epsilons": _parse_float_list,
    "sweep_clips": _parse_float_list,
    "sweep_ranks": _parse_int_list,
    "sweep_sizes": _parse_size_list,
}


def _positive(name):
    def check(cfg_value, line):
        if not cfg_value > 0:
            raise ConfigError(f"{name} must be > 0, got {cfg_value}", line)
    return check


def _non_negative(name):
    def check(cfg_value, line):
        if cfg_value < 0:
            raise ConfigError(f"{name} must be >= 0, got {cfg_value}", line)
    return check


def _in_unit_interval(name, open_ends=False):
    def check(cfg_value, line):
        if open_ends:
            if not 0 < cfg_value < 1:
                raise ConfigError(f"{name} must lie strictly in (0, 1), got {cfg_value}", line)
        elif not 0 <= cfg_value <= 1:
            raise ConfigError(f"{name} must lie in [0, 1], got {cfg_value}", line)
    return check


def _choice(name, options):
    def check(cfg_value, line):
        if cfg_value not in options:
            raise ConfigError(f"{name} must be one of {options}, got {cfg_value!r}", line)
    return check


_VALIDATORS = {
    "mode": _choice("mode", MODES),
    "strategy": _choice("strategy", STRATEGY_NAMES),
    "clip_mode": _choice("clip_mode", CLIP_MODES),
    "seed": _non_negative("seed"),
    "rounds": _non_negative("rounds"),
    "clients": _positive("clients"),
    "sampled_per_round": _positive("sampled_per_round"),
    "local_epochs": _non_negative("local_epochs"),
    "batch_size": _positive("batch_size"),
    "lr_start": _positive("lr_start"),
    "lr_end": _positive("lr_end"),
    "max_workers": _positive("max_workers"),
    "epsilon": _positive("epsilon"),
    "epsilon_b": _non_negative("epsilon_b"),
    "epsilon_a": _non_negative("epsilon_a"),
    "delta": _in_unit_interval("delta", open_ends=True),
    "clip_value": _positive("clip_value"),
    "clip_quantile": _in_unit_interval("clip_quantile"),
    "calibration_rounds": _positive("calibration_rounds"),
    "rank": _positive("rank"),
    "lora_scale": _positive("lora_scale"),
    "prox_mu": _non_negative("prox_mu"),
    "server_lr": _positive("server_lr"),
    "beta1": _in_unit_interval("beta1"),
    "beta2": _in_unit_interval("beta2"),
    "tau": _positive("tau"),
    "momentum": _in_unit_interval("momentum"),
    "task_m": _positive("task_m"),
    "task_n": _positive("task_n"),
    "task_rank": _positive("task_rank"),
    "samples_per_client": _positive("samples_per_client"),
    "sigma_obs": _non_negative("sigma_obs"),
    "heterogeneity": _in_unit_interval("heterogeneity"),
    "noise_draws": _positive("noise_draws"),
    "noise_sigma_beta": _non_negative("noise_sigma_beta"),
    "noise_sigma_alpha": _non_negative("noise_sigma_alpha"),
    "sweep_norm_b": _non_negative("sweep_norm_b"),
    "sweep_norm_a": _non_negative("sweep_norm_a"),
    "mia_trials": _positive("mia_trials"),
    "mia_epsilon": _positive("mia_epsilon"),
    "mia_rank": _positive("mia_rank"),
    "mia_epochs": _non_negative("mia_epochs"),
    "mia_batch_size": _positive("mia_batch_size"),
    "mia_lr": _positive("mia_lr"),
    "mia_dataset_size": _positive("mia_dataset_size"),
    "mia_input_scale": _positive("mia_input_scale"),
}


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; unknown keys, malformed lines and bad values are errors."""
    field_types = {f.name: f.type for f in fields(RunConfig)}
    known = set(field_types)
    values: dict[str, object] = {}
    lines_seen: dict[str, int] = {}

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (already set on line {lines_seen[key]})", lineno)
        if not raw_value:
            raise ConfigError(f"{key} has no value", lineno)
        if key in _LIST_PARSERS:
            values[key] = _LIST_PARSERS[key](raw_value, key, lineno)
        else:
            default = getattr(RunConfig, key)
            parser = _PARSERS[type(default)]
            values[key] = parser(raw_value, key, lineno)
        lines_seen[key] = lineno

    config = RunConfig(**values)
    _validate(config, lines_seen)
    return config


def _validate(config: RunConfig, lines_seen: dict[str, int]) -> None:
    for key, validator in _VALIDATORS.items():
        validator(getattr(config, key), lines_seen.get(key))
    line = lines_seen.get("sampled_per_round", lines_seen.get("clients"))
    if config.sampled_per_round > config.clients:
        raise ConfigError(
            f"sampled_per_round ({config.sampled_per_round}) cannot exceed clients ({config.clients})",
            line,
        )
    if config.lr_end > config.lr_start:
        raise ConfigError(
            f"lr_end ({config.lr_end}) cannot exceed lr_start ({config.lr_start})",
            lines_seen.get("lr_end", lines_seen.get("lr_start")),
        )
    if config.task_rank > min(config.task_m, config.task_n):
        raise ConfigError(
            f"task_rank ({config.task_rank}) cannot exceed min(task_m, task_n)",
            lines_seen.get("task_rank"),
        )
    for key in ("sweep_epsilons", "sweep_clips"):
        for v in getattr(config, key):
            if not v > 0:
                raise ConfigError(f"{key} entries must be > 0, got {v}", lines_seen.get(key))
    ranks = config.sweep_ranks
    if list(ranks) != sorted(ranks) or any(r < 1 for r in ranks):
        raise ConfigError(f"sweep_ranks must be positive and ascending, got {list(ranks)}",
                          lines_seen.get("sweep_ranks"))
    for m, n in config.sweep_sizes:
        if m < 1 or n < 1:
            raise ConfigError(f"sweep_sizes entries must be positive, got {m}x{n}",
                              lines_seen.get("sweep_sizes"))


def parse_config(path: str | Path) -> RunConfig:
    """Parse a config file; a missing file is a validation error."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(), source=str(path))
