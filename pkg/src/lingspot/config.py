"""Run configuration: one YAML tree with typed sections, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .losses import LossWeights
from .plm import PlmConfig, PretrainSchedule
from .spotter import MatchWeights, SpotterConfig, TrainSchedule
from .visual import VisualConfig
from .vocab import VocabConfig


class ConfigError(ValueError):
    pass


@dataclass
class VocabSection:
    charset: str | None = None  # None: printable non-space ASCII
    word_initial: bool = True
    target_size: int | None = 194

    def build(self) -> VocabConfig:
        base = VocabConfig()
        return VocabConfig(self.charset if self.charset is not None else base.charset,
                           word_initial=self.word_initial, target_size=self.target_size)


@dataclass
class CorpusSection:
    # each source is {path: ..., tag: scene-text | nlp-text | poi}; empty means
    # generate the synthetic desk sources
    sources: list[dict] = field(default_factory=list)
    synthetic: bool = True
    window: int = 3
    max_entries: int | None = 500
    max_unknown_ratio: float = 0.0


@dataclass
class SceneSection:
    count: int = 200
    height: int = 64
    width: int = 128
    words_per_scene: list[int] = field(default_factory=lambda: [1, 2])
    word_source: str = "scene-text"  # corpus tag the scene words are drawn from
    degraded: bool = False
    occlusion: float = 0.6
    blur: list[float] = field(default_factory=lambda: [0.6, 1.0])
    noise: float = 0.02


@dataclass
class PlmSection:
    dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_inner: int | None = None
    max_length: int = 32
    epochs: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    warmup: float = 0.05
    decay: str = "cosine"
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    mask_ratio: list[float] = field(default_factory=lambda: [0.2, 0.4])
    span_p: float = 0.5

    def model(self, vocab_size: int) -> PlmConfig:
        return PlmConfig(vocab_size, self.dim, self.heads, self.encoder_layers, self.decoder_layers,
                         self.ffn_inner, self.max_length)

    def schedule(self, seed: int) -> PretrainSchedule:
        return PretrainSchedule(self.epochs, self.batch_size, self.lr, self.warmup, self.decay, self.weight_decay,
                                self.grad_clip, seed, 10, tuple(self.mask_ratio), self.span_p)


@dataclass
class VisualSection:
    dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_inner: int | None = 256
    num_queries: int = 10
    num_points: int = 25
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    ctrl_scale: float = 32.0
    offset_scale: float = 8.0
    presence_threshold: float = 0.5
    proposal_content: bool = True

    def build(self) -> VisualConfig:
        d = asdict(self)
        d["channels"] = tuple(d["channels"])
        return VisualConfig(**d)


@dataclass
class SpotterSection:
    init: str = "plm"  # plm | random
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    lr_drops: list[int] = field(default_factory=lambda: [1600])
    visual_warmup: int = 300
    weight_decay: float = 1e-4
    grad_clip: float | None = 1.0
    # focal terms average over every cell/point, so the desk profile scales them up
    weights: LossWeights = field(default_factory=lambda: LossWeights(enc_cls=100.0, dec_cls=100.0))
    match: MatchWeights = field(default_factory=lambda: MatchWeights(cls=2.0, points=0.05))

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(self.steps, self.batch_size, self.lr, tuple(self.lr_drops), self.visual_warmup,
                             self.weight_decay, self.grad_clip, seed, 50)


@dataclass
class EvalSection:
    lexicon: str = "none"  # none | absolute | normalized
    lexicon_file: str | None = None
    iou_threshold: float = 0.5
    case_sensitive: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    vocab: VocabSection = field(default_factory=VocabSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    scenes: SceneSection = field(default_factory=SceneSection)
    plm: PlmSection = field(default_factory=PlmSection)
    visual: VisualSection = field(default_factory=VisualSection)
    spotter: SpotterSection = field(default_factory=SpotterSection)
    evaluation: EvalSection = field(default_factory=EvalSection)

    def spotter_config(self, vocab_size: int) -> SpotterConfig:
        return SpotterConfig(self.visual.build(), self.plm.model(vocab_size), self.spotter.weights,
                             self.spotter.match)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}{name}.")
        else:
            value = _coerce(value, hint, where + name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(value: Any, hint, where: str):
    """Check scalar leaves against their annotation; ints and numeric strings become floats."""
    args = typing.get_args(hint)
    if type(None) in args:
        if value is None:
            return None
        rest = [a for a in args if a is not type(None)]
        hint = rest[0] if len(rest) == 1 else hint
    origin = typing.get_origin(hint) or hint
    if hint is float:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is bool or hint is str:
        if isinstance(value, hint):
            return value
    elif origin in (list, dict):
        if isinstance(value, origin):
            return value
    else:
        return value
    raise ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` -> {"a": {"b": {"c": value}}}, value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"bad override key {key!r}")
        value = {part: value}
    return value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides."""
    data = asdict(RunConfig())
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _build(RunConfig, _merge(data, loaded), "")  # reject unknown keys early
        data = _merge(data, loaded)
    for item in overrides or []:
        data = _merge(data, parse_override(item))
    return _build(RunConfig, data, "")
