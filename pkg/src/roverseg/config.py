"""Plain-text key=value run configuration.

Lines are `key = value`; blank lines and `#` comments are ignored.  Unknown
and duplicate keys are rejected.  Every key has a documented default, and
the effective configuration is echoed at the start of each run so logs
carry their own provenance.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError


def _parse_int(s):
    return int(s, 10)


def _parse_float(s):
    return float(s)


def _parse_ints(s):
    return tuple(int(p.strip(), 10) for p in s.split(",") if p.strip())


@dataclass(frozen=True)
class RunConfig:
    width: int = 96
    height: int = 96
    stage_channels: tuple = (8, 16, 24, 32, 40)
    kernel_size: int = 3
    num_classes: int = 3
    lr0: float = 0.01
    momentum: float = 0.90
    decay: float = 0.95
    epochs: int = 30
    batch_size: int = 4
    tau: float = 0.5
    seed: int = 0
    craters_min: int = 2
    craters_max: int = 5
    rocks_min: int = 2
    rocks_max: int = 6


_PARSERS = {
    "width": _parse_int,
    "height": _parse_int,
    "stage_channels": _parse_ints,
    "kernel_size": _parse_int,
    "num_classes": _parse_int,
    "lr0": _parse_float,
    "momentum": _parse_float,
    "decay": _parse_float,
    "epochs": _parse_int,
    "batch_size": _parse_int,
    "tau": _parse_float,
    "seed": _parse_int,
    "craters_min": _parse_int,
    "craters_max": _parse_int,
    "rocks_min": _parse_int,
    "rocks_max": _parse_int,
}

HELP = {
    "width": "render width in pixels, divisible by 32",
    "height": "render height in pixels, divisible by 32",
    "stage_channels": "comma-separated widths of the 5 encoder stages",
    "kernel_size": "odd encoder kernel size",
    "num_classes": "segmentation classes including background",
    "lr0": "initial learning rate",
    "momentum": "SGD momentum",
    "decay": "per-epoch learning-rate decay factor",
    "epochs": "epochs per training stage",
    "batch_size": "samples per SGD step",
    "tau": "contrastive temperature",
    "seed": "master seed for init, shuffling, and generation",
    "craters_min": "minimum craters per scene",
    "craters_max": "maximum craters per scene",
    "rocks_min": "minimum rocks per scene",
    "rocks_max": "maximum rocks per scene",
}


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    return RunConfig(**values)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def echo_lines(cfg: RunConfig):
    return [f"config {f.name}={format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
