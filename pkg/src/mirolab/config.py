"""Plain-text ``key = value`` configuration files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _floats(v: str):
    return [float(s) for s in v.split(",") if s.strip()]


def _ints(v: str):
    return [int(s) for s in v.split(",") if s.strip()]


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class ExperimentConfig:
    algorithm: str = "erm"
    lam: float = 0.1
    lr: float = 5e-5
    dropout: float = 0.0
    weight_decay: float = 0.0
    batch_per_domain: int = 32
    steps: int = 2000
    eval_every: int = 100
    seed: int = 0
    # dataset
    dataset: str = "rotated_moons"
    angles: list = field(default_factory=lambda: [0.0, 15.0, 30.0, 45.0])
    strengths: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    n_per_domain: int = 400
    noise: float = 0.1
    nuisance_dims: int = 0
    nuisance_std: float = 1.0
    core_sep: float = 3.0
    core_noise: float = 1.0
    domain_shift: float = 0.5
    spurious_noise: float = 1.0
    data_seed: int = 0
    # model
    widths: list = field(default_factory=lambda: [64, 64, 64])
    activation: str = "relu"
    encoder_lr_mult: float = 10.0
    init_variance: float = 0.1
    reduction: str = "mean"
    # checkpoints
    pretrained: str = ""
    oracle: str = ""
    # leave-one-out / search
    target: int = -1
    repeats: int = 3
    lambdas: list = field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001])
    lrs: list = field(default_factory=lambda: [1e-5, 3e-5, 5e-5])
    dropouts: list = field(default_factory=lambda: [0.0, 0.1, 0.5])
    weight_decays: list = field(default_factory=lambda: [1e-4, 1e-6, 0.0])
    # pre-training / oracle
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 1e-3
    broad_angles: list = field(default_factory=lambda: [-30.0 + 7.5 * k for k in range(12)])
    broad_strengths: list = field(default_factory=list)
    # mi analysis
    mine_steps: int = 2000
    mine_batch: int = 512
    mine_lr: float = 1e-3
    mine_hidden: list = field(default_factory=lambda: [128, 128])
    mine_restarts: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ("erm", "miro", "cmiro"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.dataset not in ("rotated_moons", "spurious_blobs"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be mean or sum")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        raw = parse_kv(text)
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in raw.items():
            if key == "lambda":
                key = "lam"
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            default = kinds[key].default
            if default is dataclasses.MISSING:
                default = kinds[key].default_factory()
            try:
                if isinstance(default, bool):
                    kw[key] = _bool(value)
                elif isinstance(default, int):
                    kw[key] = int(value)
                elif isinstance(default, float):
                    kw[key] = float(value)
                elif isinstance(default, list):
                    kw[key] = _ints(value) if key in ("widths", "mine_hidden") else _floats(value)
                else:
                    kw[key] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)
