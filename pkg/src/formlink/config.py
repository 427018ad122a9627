"""Sectioned key=value run configuration with a closed key table.

Every key that may appear, by section::

    [data]    root, train_split, eval_split
    [window]  length, stride
    [text]    dim, vocab_buckets, heads
    [layout]  dim
    [model]   lstm_layers, trm_layers, heads, ff_mult, max_entity_len,
              entity_positions, dropout
    [train]   mode, epochs, lr, batch_size_pages, teacher_forcing_rate,
              negative_sample_size, seed, eval_every
    [synth]   pages, pairs_per_page, key_vocab, value_vocab, jitter,
              width, height, test_pages, seed
    [output]  dir

Unknown sections or keys are errors. Parsing reports every problem at once.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataset import SynthConfig
from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


# (section, key) -> (target, attribute, type)
KEY_TABLE: dict[tuple[str, str], tuple[str, str, type]] = {
    ("data", "root"): ("run", "data_root", str),
    ("data", "train_split"): ("run", "train_split", str),
    ("data", "eval_split"): ("run", "eval_split", str),
    ("window", "length"): ("model", "window_length", int),
    ("window", "stride"): ("model", "window_stride", int),
    ("text", "dim"): ("model", "text_dim", int),
    ("text", "vocab_buckets"): ("model", "vocab_buckets", int),
    ("text", "heads"): ("model", "text_heads", int),
    ("layout", "dim"): ("model", "layout_dim", int),
    ("model", "lstm_layers"): ("model", "lstm_layers", int),
    ("model", "trm_layers"): ("model", "trm_layers", int),
    ("model", "heads"): ("model", "heads", int),
    ("model", "ff_mult"): ("model", "ff_mult", int),
    ("model", "max_entity_len"): ("model", "max_entity_len", int),
    ("model", "entity_positions"): ("model", "entity_positions", bool),
    ("model", "dropout"): ("model", "dropout", float),
    ("train", "mode"): ("train", "mode", str),
    ("train", "epochs"): ("train", "epochs", int),
    ("train", "lr"): ("train", "lr", float),
    ("train", "batch_size_pages"): ("train", "batch_size_pages", int),
    ("train", "teacher_forcing_rate"): ("train", "teacher_forcing_rate", float),
    ("train", "negative_sample_size"): ("train", "negative_sample_size", int),
    ("train", "seed"): ("train", "seed", int),
    ("train", "eval_every"): ("train", "eval_every", int),
    ("synth", "pages"): ("synth", "pages", int),
    ("synth", "pairs_per_page"): ("synth", "pairs_per_page", int),
    ("synth", "key_vocab"): ("synth", "key_vocab", int),
    ("synth", "value_vocab"): ("synth", "value_vocab", int),
    ("synth", "jitter"): ("synth", "jitter", int),
    ("synth", "width"): ("synth", "width", int),
    ("synth", "height"): ("synth", "height", int),
    ("synth", "test_pages"): ("synth", "test_pages", int),
    ("synth", "seed"): ("run", "synth_seed", int),
    ("output", "dir"): ("run", "output_dir", str),
}

_BOOLS = {"true": True, "yes": True, "1": True, "on": True,
          "false": False, "no": False, "0": False, "off": False}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_root: str | None = None
    train_split: str = "train"
    eval_split: str = "test"
    output_dir: str | None = None
    synth_seed: int = 7


def _convert(raw: str, kind: type):
    if kind is bool:
        try:
            return _BOOLS[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    return kind(raw.strip())


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    """Parse config text into a validated RunConfig, or raise ConfigError listing every problem.

    ``overrides`` maps "section.key" to already-typed values (command-line flags).
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    errors: list[str] = []
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from None

    values: dict[str, dict[str, object]] = {"run": {}, "model": {}, "train": {}, "synth": {}}
    known_sections = {s for s, _ in KEY_TABLE}
    for section in parser.sections():
        if section not in known_sections:
            errors.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            entry = KEY_TABLE.get((section, key))
            if entry is None:
                errors.append(f"unknown key {section}.{key}")
                continue
            target, attr, kind = entry
            try:
                values[target][attr] = _convert(raw, kind)
            except ValueError as exc:
                errors.append(f"{section}.{key}: {exc}")
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        target, attr, _ = KEY_TABLE[(section, key)]
        values[target][attr] = value

    built = {}
    for name, cls in (("model", ModelConfig), ("train", TrainConfig), ("synth", SynthConfig)):
        try:
            built[name] = cls(**values[name])
        except (TypeError, ValueError) as exc:
            errors.append(f"[{name}] {exc}")
    if "model" in built:
        m = built["model"]
        try:
            m.window
        except ValueError as exc:
            errors.append(f"[window] {exc}")
        if m.feature_dim % 2:
            errors.append(f"[text]/[layout] text.dim + layout.dim = {m.feature_dim} must be even")
        if m.feature_dim % m.heads:
            errors.append(f"[model] heads={m.heads} must divide the feature width {m.feature_dim}")
        if m.text_dim % m.text_heads:
            errors.append(f"[text] heads={m.text_heads} must divide text.dim {m.text_dim}")
        if not 0.0 <= m.dropout < 1.0:
            errors.append(f"[model] dropout must lie in [0, 1), got {m.dropout}")
        for f in fields(ModelConfig):
            v = getattr(m, f.name)
            if f.type in ("int", int) and v < 1:
                errors.append(f"[model] {f.name} must be >= 1, got {v}")
    for split_key in ("train_split", "eval_split"):
        if values["run"].get(split_key, "train") not in ("train", "test"):
            errors.append(f"data.{split_key} must be 'train' or 'test'")
    if errors:
        raise ConfigError(errors)
    return RunConfig(model=built["model"], train=built["train"], synth=built["synth"], **values["run"])


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides=overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    return parse_config(text, str(path), overrides)
