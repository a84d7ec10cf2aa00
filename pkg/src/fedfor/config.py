"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, lists are comma separated and
booleans are ``true``/``false``. Unknown keys are errors. The digest is a
SHA-256 over the canonical serialization of every setting that can change
results (the output directory and worker count are excluded).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .client import METHODS
from .server import CROSS_DEVICE, CROSS_SILO


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


_REQUIRED = ("methods", "rounds")
_NOT_DIGESTED = ("out_dir", "workers")


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    rounds: int
    mode: str = CROSS_DEVICE
    pool_size: int = 10
    clients_per_round: int = 10
    lr: float = 0.01
    alpha: float = 5.0
    fedcurv_alpha: float | None = None  # falls back to alpha
    local_epochs: int = 1
    batch_size: int = 32
    shift: str = "prior"
    imbalance_ratio: float = 0.01
    sample_fraction: float = 0.1
    concept_shift_prob: float = 0.0
    concept_shift_mode: str = "single"
    concept_shift_rounds: tuple[int, ...] = ()
    n_domains: int = 5
    covariate_bias_scale: float = 1.0
    hidden_sizes: tuple[int, ...] = (32,)
    norm_layer: bool = False
    fedbn: bool = False
    n_classes: int = 10
    dim: int = 16
    n_per_class: int = 200
    n_val_per_class: int = 100
    data_path: str | None = None
    val_fraction: float = 0.2
    acc_target: float = 0.7
    weighted_aggregation: bool = False
    scaffold_zero_variates: bool = False
    score_reset_on_shift: bool = True
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self) -> None:
        _validate(self)

    @property
    def digest(self) -> str:
        text = serialize_config(self, include=lambda k: k not in _NOT_DIGESTED)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def method_alpha(self, method: str) -> float:
        if method == "fedcurv" and self.fedcurv_alpha is not None:
            return self.fedcurv_alpha
        return self.alpha


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _kind(name: str) -> str:
    t = str(_FIELDS[name].type)
    for kind in ("tuple[str", "tuple[int", "bool", "int", "float", "str"):
        if t.startswith(kind):
            return kind
    raise AssertionError(t)


def _coerce(key: str, raw: str):
    kind = _kind(key)
    raw = raw.strip()
    optional = "None" in str(_FIELDS[key].type)
    if raw == "" and optional:
        return None
    try:
        if kind == "tuple[str":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if kind == "tuple[int":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot read {raw!r} as {kind.replace('tuple[', 'list of ')}") from None


def _validate(cfg: ExperimentConfig) -> None:
    def check(ok, key, msg):
        if not ok:
            raise ConfigError(key, msg)

    check(len(cfg.methods) > 0, "methods", "at least one method is required")
    for m in cfg.methods:
        check(m in METHODS, "methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    check(cfg.rounds >= 1, "rounds", "must be >= 1")
    check(cfg.mode in (CROSS_DEVICE, CROSS_SILO), "mode", f"must be {CROSS_DEVICE} or {CROSS_SILO}")
    check(cfg.pool_size >= 1, "pool_size", "must be >= 1")
    check(cfg.clients_per_round >= 1, "clients_per_round", "must be >= 1")
    check(cfg.mode != CROSS_SILO or cfg.clients_per_round <= cfg.pool_size,
          "clients_per_round", "must not exceed pool_size in cross-silo mode")
    check(cfg.lr > 0, "lr", "must be > 0")
    check(cfg.alpha >= 0, "alpha", "must be >= 0")
    check(cfg.fedcurv_alpha is None or cfg.fedcurv_alpha >= 0, "fedcurv_alpha", "must be >= 0")
    check(cfg.local_epochs >= 1, "local_epochs", "must be >= 1")
    check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    check(cfg.shift in ("prior", "covariate", "none"), "shift", "must be prior, covariate or none")
    check(0 < cfg.imbalance_ratio <= 1, "imbalance_ratio", "must be in (0, 1]")
    check(0 < cfg.sample_fraction <= 1, "sample_fraction", "must be in (0, 1]")
    check(0 <= cfg.concept_shift_prob <= 1, "concept_shift_prob", "must be in [0, 1]")
    check(cfg.concept_shift_mode in ("single", "per_class"), "concept_shift_mode",
          "must be single or per_class")
    check(all(r >= 1 for r in cfg.concept_shift_rounds), "concept_shift_rounds", "rounds are 1-based")
    check(cfg.n_domains >= 1, "n_domains", "must be >= 1")
    check(cfg.covariate_bias_scale >= 0, "covariate_bias_scale", "must be >= 0")
    check(all(h >= 1 for h in cfg.hidden_sizes), "hidden_sizes", "sizes must be >= 1")
    check(not cfg.norm_layer or cfg.hidden_sizes, "norm_layer", "needs at least one hidden layer")
    check(not cfg.fedbn or cfg.norm_layer, "fedbn", "requires norm_layer = true")
    check(cfg.n_classes >= 2, "n_classes", "must be >= 2")
    check(cfg.dim >= 2, "dim", "must be >= 2")
    check(cfg.n_per_class >= 1, "n_per_class", "must be >= 1")
    check(cfg.n_val_per_class >= 1, "n_val_per_class", "must be >= 1")
    check(0 < cfg.val_fraction < 1, "val_fraction", "must be in (0, 1)")
    check(0 < cfg.acc_target < 1, "acc_target", "must be in (0, 1)")
    check(len(cfg.seeds) >= 1, "seeds", "at least one seed is required")
    check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "seeds must be distinct")
    check(cfg.workers >= 1, "workers", "must be >= 1")


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, f"line {lineno}: duplicate key")
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(pairs) - set(_FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    for key in _REQUIRED:
        if key not in pairs:
            raise ConfigError(key, "missing required key")
    values = {k: _coerce(k, v) for k, v in pairs.items()}
    return ExperimentConfig(**values)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = parse_pairs(text)
    pairs.update(overrides or {})
    return config_from_pairs(pairs)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig, include=lambda key: True) -> str:
    return "".join(f"{name} = {_format(getattr(cfg, name))}\n"
                   for name in _FIELDS if include(name))
