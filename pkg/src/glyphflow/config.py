"""Single-file run configuration with flag overrides.

One YAML file carries sections for every stage (corpus, model, train,
integrate, drs); unknown keys are rejected, every field has a documented
dataclass default, and the fully resolved config is echoed into run
output directories so any run is one command to reproduce. Overrides use
dotted paths (`train.learning_rate=1e-4`) and win last-writer-wins.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .backbone import ModelConfig
from .corpus import CorpusConfig
from .flow import RegimeProbs, TrainConfig
from .forensics import DRSConfig
from .infer import IntegratorConfig


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    corpus_count: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    integrate: IntegratorConfig = field(default_factory=IntegratorConfig)
    drs: DRSConfig = field(default_factory=DRSConfig)

    def validate(self):
        self.corpus.validate(patch_size=self.model.patch_size)
        self.model.validate()
        self.train.validate()
        self.integrate.validate()
        self.drs.validate()
        if self.corpus_count < 0:
            raise ConfigFileError("corpus count must be nonnegative")
        if self.corpus.canvas_size != self.model.canvas_size:
            raise ConfigFileError(
                f"corpus canvas {self.corpus.canvas_size} != model canvas "
                f"{self.model.canvas_size}")
        return self


_TUPLE_FIELDS = {"scale_jitter", "aspect_jitter", "noise_levels", "weights"}
# regime probabilities are flattened into the train section
_PROB_KEYS = ("p_s1", "p_s2", "p_joint", "p_uncond")


def _coerce(value, name):
    if name in _TUPLE_FIELDS and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        allowed = (allowed - {"probs"}) | set(_PROB_KEYS)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigFileError(
            f"unknown key(s) {sorted(unknown)} in section '{section}'; "
            f"allowed: {sorted(allowed)}")
    kwargs = {k: _coerce(v, k) for k, v in data.items()}
    if cls is TrainConfig:
        probs = {k: kwargs.pop(k) for k in _PROB_KEYS if k in kwargs}
        if probs:
            kwargs["probs"] = replace(RegimeProbs(), **probs)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"section '{section}': {exc}") from exc


_SECTIONS = {
    "corpus": (CorpusConfig, "corpus"),
    "model": (ModelConfig, "model"),
    "train": (TrainConfig, "train"),
    "integrate": (IntegratorConfig, "integrate"),
    "drs": (DRSConfig, "drs"),
}


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigFileError(
            f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"override {text!r}: {exc}") from exc
    if isinstance(value, str):
        # YAML 1.1 leaves scientific notation like 1e-4 as a string
        for cast in (int, float):
            try:
                value = cast(value)
                break
            except ValueError:
                continue
    return section, key, value


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigFileError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigFileError(f"config {path} must be a mapping of sections")
    for text in overrides or []:
        section, key, value = parse_override(text)
        if section == "corpus" and key == "count":
            data.setdefault("corpus", {})["count"] = value
            continue
        if section not in _SECTIONS:
            raise ConfigFileError(f"override names unknown section '{section}'")
        data.setdefault(section, {})[key] = value

    unknown_sections = set(data) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigFileError(f"unknown config section(s) {sorted(unknown_sections)}")

    corpus_data = dict(data.get("corpus", {}))
    corpus_count = corpus_data.pop("count", 32)
    built = {"corpus": _build_section(CorpusConfig, corpus_data, "corpus"),
             "corpus_count": corpus_count}
    for name in ("model", "train", "integrate", "drs"):
        cls, _ = _SECTIONS[name]
        built[name] = _build_section(cls, dict(data.get(name, {})), name)
    try:
        return RunConfig(**built).validate()
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, RegimeProbs):
            out.update(dataclasses.asdict(v))
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, dict):
            out[f.name] = dict(v)
        else:
            out[f.name] = v
    return out


def resolved_yaml(cfg: RunConfig) -> str:
    doc = {
        "corpus": {**_section_dict(cfg.corpus), "count": cfg.corpus_count},
        "model": _section_dict(cfg.model),
        "train": _section_dict(cfg.train),
        "integrate": _section_dict(cfg.integrate),
        "drs": _section_dict(cfg.drs),
    }
    return yaml.safe_dump(doc, sort_keys=True)


def echo_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(resolved_yaml(cfg))
