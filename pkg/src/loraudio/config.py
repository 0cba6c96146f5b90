"""Flat ``key = value`` run configuration shared by every CLI command.

Keys mirror the fields of CorpusSpec, LfccConfig, SENetConfig and
TrainConfig, plus a few run-level keys (the corpus sequence and the split
fraction). The model's ``feature_dims`` follows the LFCC settings and is not
a key; neither are the per-corpus ``seed``/``tag`` fields, which come from the
single ``seed`` and the sequence.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusSpec
from .errors import ValidationError
from .lfcc import LfccConfig
from .senet import SENetConfig
from .trainer import TrainConfig

_SECTIONS = {
    "corpus": (CorpusSpec, {"seed", "tag", "algorithms"}),
    "lfcc": (LfccConfig, set()),
    "model": (SENetConfig, {"feature_dims", "in_channels"}),
    "train": (TrainConfig, {"seed"}),
}
_RUN_KEYS = {"seed": int, "sequence": str, "train_fraction": float, "note": str}
_RUN_DEFAULTS = {"seed": 0, "sequence": "A:S2;B:S3;C:S1", "train_fraction": 0.75, "note": ""}


def _field_types() -> dict[str, tuple[str, object]]:
    out = {}
    for section, (cls, skip) in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name not in skip:
                out[f.name] = (section, hints[f.name])
    for key, typ in _RUN_KEYS.items():
        out[key] = ("run", typ)
    return out


KEYS = _field_types()


def _convert(key: str, text: str, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, float, str):
            return typ(text)
        if origin is tuple:
            items = [s.strip() for s in text.split(",") if s.strip()]
            return tuple(_convert(key, s, args[0]) for s in items)
        if origin in (typing.Union, types.UnionType):
            if text.lower() in ("", "none", "default"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _convert(key, text, inner)
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {text!r}") from None
    raise ValidationError(f"config key {key!r}: unsupported type {typ}")


def parse_assignments(lines, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment, later lines win."""
    raw = {}
    for line_no, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValidationError(f"{source}:{line_no}: expected key = value, got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in KEYS:
            raise ValidationError(f"{source}:{line_no}: unknown config key {key!r}")
        raw[key] = value
    return raw


def derive_seed(seed: int, *keys) -> int:
    """A 32-bit seed for a named sub-stream of the run seed."""
    entropy = [int(seed)]
    for k in keys:
        entropy += list(k.encode()) if isinstance(k, str) else [int(k)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def parse_sequence(text: str) -> list[tuple[str, tuple[str, ...]]]:
    """``"A:S2;B:S3+S4"`` -> [("A", ("S2",)), ("B", ("S3", "S4"))]."""
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        tag, sep, algos = item.partition(":")
        if not sep or not tag.strip() or not algos.strip():
            raise ValidationError(f"sequence item {item!r} must look like TAG:ALGO[+ALGO]")
        out.append((tag.strip(), tuple(a.strip() for a in algos.split("+"))))
    if not out:
        raise ValidationError("sequence lists no corpora")
    return out


@dataclass
class CliConfig:
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", overrides: dict[str, str] | None = None) -> "CliConfig":
        raw = parse_assignments(text.splitlines(), source)
        raw.update(parse_assignments([f"{k} = {v}" for k, v in (overrides or {}).items()], "<flags>"))
        cfg = cls({k: _convert(k, v, KEYS[k][1]) for k, v in raw.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "CliConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"--config: no such file {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path), overrides)

    def _section(self, name: str) -> dict:
        return {k: v for k, v in self.values.items() if KEYS[k][0] == name}

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in _RUN_DEFAULTS:
            return _RUN_DEFAULTS[key]
        section, _ = KEYS[key]
        cls = _SECTIONS[section][0]
        return next(f.default for f in dataclasses.fields(cls) if f.name == key)

    @property
    def seed(self) -> int:
        return int(self.get("seed"))

    def lfcc(self) -> LfccConfig:
        return LfccConfig(**self._section("lfcc"))

    def model(self) -> SENetConfig:
        return SENetConfig(feature_dims=self.lfcc().dims, **self._section("model"))

    def train(self, **changes) -> TrainConfig:
        return TrainConfig(seed=self.seed, **{**self._section("train"), **changes})

    def corpus(self, tag: str, algorithms) -> CorpusSpec:
        return CorpusSpec(algorithms=tuple(algorithms), seed=derive_seed(self.seed, "corpus", tag), tag=tag, **self._section("corpus"))

    def sequence(self) -> list[tuple[str, tuple[str, ...]]]:
        return parse_sequence(str(self.get("sequence")))

    def validate(self) -> None:
        """Build every owning config once so bad values surface at load time."""
        frac = float(self.get("train_fraction"))
        if not 0.0 < frac < 1.0:
            raise ValidationError(f"train_fraction must lie in (0, 1), got {frac}")
        self.lfcc()
        self.model()
        self.train()
        for tag, algos in self.sequence():
            self.corpus(tag, algos)
