"""Run configuration: ``[section]`` headers and ``key = value`` lines.

Every field has a default, so an empty file is a valid configuration.
Unknown sections or keys are errors.  ``serialize`` writes the canonical
form (all sections, all keys, declaration order).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from ..diffusion import DiffusionConfig
from ..models import ModelConfig
from .data import DatasetSpec

KINDS = ("mae", "cls", "ddpm")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    kind: str = "mae"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 64
    eval_every: int = 10
    checkpoint_every: int = 0
    record_time: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs/eval_every/checkpoint_every must be >= 0 and batch_size >= 1")


@dataclass
class OptimConfig:
    lr: float = 0.0           # 0 selects 6e-4 * batch_size / 1024
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.warmup_frac < 1:
            raise ValueError("lr, weight_decay must be >= 0 and warmup_frac in [0, 1)")


@dataclass
class EvalConfig:
    knn_k: int = 20
    probe_epochs: int = 200
    probe_lr: float = 0.01
    probe_batch: int = 1024
    rank_samples: int = 1000
    sample_count: int = 256
    sample_every: int = 0

    def __post_init__(self):
        if self.knn_k < 1 or self.probe_epochs < 1 or self.rank_samples < 2:
            raise ValueError("knn_k, probe_epochs must be >= 1 and rank_samples >= 2")


SECTIONS = {
    "run": RunSection,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "data": DatasetSpec,
    "optim": OptimConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def alpha_min(self) -> float:
        return self.diffusion.alpha_min if self.run.kind == "ddpm" else self.model.alpha_min

    def effective_lr(self) -> float:
        return self.optim.lr or 6e-4 * self.run.batch_size / 1024

    def replace(self, section: str, **changes) -> "RunConfig":
        """Copy with fields of one section changed (validated)."""
        sec = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sec})


def _convert(raw: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected true/false, got {raw!r}")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {name: {} for name in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        known = {f.name: f.type for f in fields(SECTIONS[section])}
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        try:
            values[section][key] = _convert(raw, known[key], key)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**values[name])
        except ValueError as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            lines.append(f"{f.name} = {_fmt(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply one ``section.key=value`` override, with the same checks as the file parser."""
    lhs, sep, raw = assignment.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {assignment!r}: expected section.key=value")
    if section not in SECTIONS:
        raise ConfigError(f"override {assignment!r}: unknown section [{section}]")
    known = {f.name: f.type for f in fields(SECTIONS[section])}
    if key not in known:
        raise ConfigError(f"override {assignment!r}: unknown key {key!r} in [{section}]")
    try:
        return cfg.replace(section, **{key: _convert(raw.strip(), known[key], key)})
    except ValueError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from None
