"""Model/training configuration and the flat key=value config file format.

Desk-scale defaults are small enough that finite-difference checks and the
oracle tests run in seconds. Unknown keys in a config file are errors, so
typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .losses import LossWeights

MOE1 = "moe1"
MOE2 = "moe2"


@dataclass
class ModelConfig:
    # architecture
    n_moe_layers: int = 6
    n_memory_layers: int = 6
    attention_every: int = 3
    n_experts: int = 4
    expert_hidden: int = 64
    d_feat: int = 24
    d_model: int = 32
    d_att: int = 32
    memory_order: int = 2
    d_c: int = 32
    d_a: int = 16
    d_d: int = 16
    router_variant: str = MOE2
    vocab_size: int = 8
    n_domains: int = 6
    n_accents: int = 4
    # training
    weights: LossWeights = field(default_factory=LossWeights)
    n_workers: int = 1
    seed: int = 0
    learning_rate: float = 0.01
    grad_clip: float = 50.0
    batch_size: int = 16
    steps: int = 300
    detach_embeddings: bool = False
    aux_scope: str = "global"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("n_moe_layers", "n_memory_layers", "attention_every",
                    "n_experts", "expert_hidden", "d_feat", "d_model",
                    "d_att", "d_c", "vocab_size", "n_domains", "n_accents",
                    "batch_size", "steps")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"config key {name} must be >= 1, "
                                  f"got {getattr(self, name)}")
        if self.memory_order < 0:
            raise ConfigError("config key memory_order must be >= 0")
        if self.n_memory_layers != self.n_moe_layers:
            raise ConfigError(
                "config key n_memory_layers must equal n_moe_layers "
                "(each MoE layer is followed by one memory layer)")
        if self.router_variant not in (MOE1, MOE2):
            raise ConfigError(
                f"config key router_variant must be moe1 or moe2, "
                f"got {self.router_variant!r}")
        if self.router_variant == MOE2 and (self.d_a < 1 or self.d_d < 1):
            raise ConfigError(
                "config keys d_a and d_d must be >= 1 for moe2")
        if self.n_workers < 1:
            raise ConfigError("config key n_workers must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("config key learning_rate must be >= 0")
        if self.grad_clip < 0:
            raise ConfigError("config key grad_clip must be >= 0")
        if self.aux_scope not in ("global", "per_worker"):
            raise ConfigError(
                f"config key aux_scope must be global or per_worker, "
                f"got {self.aux_scope!r}")

    @property
    def d_route(self) -> int:
        """Router input width: grapheme emb + previous layer output, plus
        accent/domain embeddings for the augmented variant."""
        d = self.d_c + self.d_model
        if self.router_variant == MOE2:
            d += self.d_a + self.d_d
        return d

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            if f.name == "weights":
                continue
            d[f.name] = getattr(self, f.name)
        for f in fields(LossWeights):
            d[f.name] = getattr(self.weights, f.name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        wkeys = {f.name for f in fields(LossWeights)}
        wargs = {k: d.pop(k) for k in list(d) if k in wkeys}
        known = {f.name for f in fields(cls) if f.name != "weights"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(
                f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(weights=LossWeights(**wargs), **d)


_BOOL_KEYS = {"detach_embeddings"}
_FLOAT_KEYS = {"learning_rate", "grad_clip", "alpha", "beta", "gamma",
               "eta", "theta"}
_STR_KEYS = {"router_variant", "aux_scope"}
KNOWN_KEYS = ({f.name for f in fields(ModelConfig) if f.name != "weights"}
              | {f.name for f in fields(LossWeights)})


def _coerce(key: str, value: str):
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key(s): {key}")
    if key in _STR_KEYS:
        return value
    if key in _BOOL_KEYS:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, "
                          f"got {value!r}")
    try:
        if key in _FLOAT_KEYS:
            return float(value)
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: bad value {value!r}") from exc


def parse_config_text(text: str) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key}")
        values[key] = _coerce(key, value)
    return ModelConfig.from_dict(values)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def save_config(path, config: ModelConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in config.to_dict().items():
            f.write(f"{key}={value}\n")
