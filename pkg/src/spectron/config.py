"""Run-config documents: strict JSON in, resolved JSON manifest out."""

import json
import re
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .model import ModelConfig, is_factorized, layer_shapes
from .optim import OptimizerVariant


@dataclass(frozen=True)
class OptimizerConfig:
    variant: str = "spectron"
    eta: float = 0.01
    beta: float = 0.95
    k_ns: int = 5
    k_power: int = 1
    weight_decay: float = 0.0
    schedule: str = "cosine"

    def __post_init__(self):
        try:
            OptimizerVariant(self.variant)
        except ValueError:
            valid = ", ".join(v.value for v in OptimizerVariant)
            raise ConfigError(f"optimizer.variant: unknown {self.variant!r} (valid: {valid})") from None
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"optimizer.schedule: expected 'cosine' or 'constant', got {self.schedule!r}")
        if not self.eta > 0:
            raise ConfigError("optimizer.eta must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("optimizer.beta must lie in [0, 1)")
        if self.k_ns < 1 or self.k_power < 1:
            raise ConfigError("optimizer.k_ns and optimizer.k_power must be positive")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 500
    batch: int = 16
    warmup_frac: float = 0.05
    telemetry_layers: tuple = ("block0.attn.o",)
    output_dir: str = "runs/default"
    corpus_tokens: int = 200_000
    eval_batch: int = 64
    ablate_etas: tuple = (0.001, 0.01)
    trace_variants: tuple = ("spectron", "ortho_only", "naive_momentum")

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.eval_batch < 1:
            raise ConfigError("steps must be >= 0; batch and eval_batch must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.corpus_tokens < 10 * (self.model.seq_len + 1):
            raise ConfigError("corpus_tokens is too small for the sequence length")
        for lid in self.telemetry_layers:
            if lid not in layer_ids(self.model):
                raise ConfigError(f"telemetry_layers: unknown layer {lid!r}")
        for v in self.trace_variants:
            OptimizerConfig(variant=v)

    def to_dict(self):
        d = asdict(self)
        for key in ("telemetry_layers", "ablate_etas", "trace_variants"):
            d[key] = list(d[key])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def layer_ids(model_cfg):
    return [lid for lid in layer_shapes(model_cfg) if is_factorized(model_cfg, lid)]


_TYPES = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _line_of(text, key):
    if text is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text, path):
    line = _line_of(text, path.split(".")[-1])
    return f"{path} (line {line})" if line else path


def _build(cls, data, prefix, text):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{_where(text, prefix + key)}: unknown field")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        path = prefix + key
        current = getattr(defaults, key)
        if isinstance(current, (ModelConfig, OptimizerConfig)):
            kwargs[key] = _build(type(current), value, path + ".", text)
            continue
        if isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{_where(text, path)}: expected a list")
            kwargs[key] = tuple(value)
            continue
        expected = _TYPES[type(current)]
        if isinstance(value, bool) and type(current) is not bool or not isinstance(value, expected):
            raise ConfigError(f"{_where(text, path)}: expected {type(current).__name__}, got {value!r}")
        kwargs[key] = type(current)(value)
    try:
        return cls(**kwargs)
    except ConfigError as err:
        raise ConfigError(f"{prefix or 'config'}: {err}") from None


def parse_config(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"line {err.lineno}, column {err.colno}: {err.msg}") from None
    return _build(RunConfig, data, "", text)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def with_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, seed=seed)
