"""Run configuration: dotted ``section.key = value`` text with env and command-line overrides.

Precedence, lowest to highest: dataclass defaults, config file, ``BIA__SECTION__KEY``
environment variables, explicit overrides.
"""

import os
from dataclasses import dataclass, field, fields, replace
from typing import get_type_hints

ENV_PREFIX = "BIA__"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "shapes"
    source_root: str = ""
    source_train_size: int = 8000
    source_test_size: int = 2000
    target: str = "digits"
    target_root: str = ""
    target_train_size: int = 8000
    target_test_size: int = 2000
    resolution: int = 32
    seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    substitute: tuple[str, ...] = ("smallconv",)
    target: str = "smallres"
    target_stats: str = "half"
    width: int = 16
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    substitute_checkpoint: str = ""
    target_checkpoint: str = ""


@dataclass(frozen=True)
class GeneratorSection:
    down_blocks: int = 2
    residual_blocks: int = 6
    up_blocks: int = 2
    base_channels: int = 16


@dataclass(frozen=True)
class ObjectiveSection:
    variant: str = "bia"
    tap: str = "stage2"
    mu_mean: float = 0.5
    mu_std: float = 0.08
    sigma_mean: float = 0.75
    sigma_std: float = 0.08
    per_image: bool = False
    attention_after_rn: bool = True


@dataclass(frozen=True)
class TrainSection:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 1
    seed: int = 1
    epsilon: float = 10.0
    augment: bool = False
    grad_clip: float = 0.0
    max_steps: int = 0


@dataclass(frozen=True)
class EvalSection:
    attacks: tuple[str, ...] = ("bia", "noise")
    seeds: tuple[int, ...] = (1,)
    checkpoint: str = ""
    compare_checkpoint: str = ""
    batch_size: int = 250
    step: float = 4.0
    iterations: int = 100
    momentum: float = 1.0
    transform_prob: float = 0.7
    parallelism: int = 1


@dataclass(frozen=True)
class SweepSection:
    kind: str = "rn"
    mu_means: tuple[float, ...] = (0.25, 0.5, 0.75)
    sigma_means: tuple[float, ...] = (0.25, 0.5, 0.75)
    rn_std: float = 0.08
    taps: tuple[str, ...] = ("stage1", "stage2", "stage3")


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        for dotted, raw in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in sections or not key:
                raise ConfigError(f"unknown config key {dotted!r}")
            current = sections[section]
            hints = get_type_hints(type(current))
            if key not in hints:
                raise ConfigError(f"unknown config key {dotted!r}")
            sections[section] = replace(current, **{key: _coerce(dotted, raw, hints[key])})
        return RunConfig(**sections)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            section = getattr(self, f.name)
            for sf in fields(section):
                lines.append(f"{f.name}.{sf.name} = {_render(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, float, str):
            return typ(raw)
        inner = typ.__args__[0]
        return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[".".join(p.lower() for p in name[len(ENV_PREFIX):].split("__"))] = value
    return out


def load_config(path: str | None = None, overrides: dict[str, str] | None = None, environ=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cfg.with_overrides(parse_text(text))
    cfg = cfg.with_overrides(env_overrides(environ))
    return cfg.with_overrides(overrides or {})
