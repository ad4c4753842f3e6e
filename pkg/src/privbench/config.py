"""Experiment configuration: INI files with a registry of typed keys.

Every key has a desk-scale default and, where the original full-scale setup
fixes one, the full-scale value (``full_scale`` field). Desk defaults that differ
from the full-scale value are flagged in `describe_keys`.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from privbench.errors import ConfigError


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(x) for x in text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _optional_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "list": _list, "float?": _optional_float}


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: str
    default: Any
    full_scale: Any = None
    help: str = ""

    @property
    def dotted(self) -> str:
        return f"{self.section}.{self.name}"


KEYS: tuple[Key, ...] = (
    Key("experiment", "name", "str", "desk", help="run label"),
    Key("experiment", "seed", "int", 0, help="root seed; every stage derives its own stream"),
    Key("experiment", "out", "str", "runs/desk", help="output directory (not part of the config hash)"),
    Key("experiment", "attacks", "list", ("dea", "mia", "eia"), help="subset of dea, mia, eia"),
    Key("experiment", "models", "list", ("tiny",), help="model presets, each a [model.<name>] section"),
    Key("experiment", "tuning_modes", "list", ("full",), ("full", "prompt", "prefix"), "full, prompt, prefix"),
    Key("experiment", "dp", "list", ("off", "on"), ("off", "on"), "DP settings to run: off, on"),
    Key("experiment", "dtype", "str", "float32"),

    Key("corpus", "source", "str", "synthetic", help="synthetic, tsv or jsonl"),
    Key("corpus", "path", "str", "", help="input file for tsv/jsonl sources"),
    Key("corpus", "eval_path", "str", "", help="held-out evaluation file for tsv/jsonl sources"),
    Key("corpus", "num_samples", "int", 2000, help="synthetic training pool size (before the auxiliary split)"),
    Key("corpus", "eval_samples", "int", 300, help="held-out samples for utility and inversion evaluation"),
    Key("corpus", "num_labels", "int", 3),
    Key("corpus", "tokenizer", "str", "word", help="word or char"),
    Key("corpus", "auxiliary_fraction", "float", 0.4, 0.4),

    Key("pretrain", "enabled", "bool", True, help="pretrain the base model on a public synthetic corpus"),
    Key("pretrain", "num_samples", "int", 2000),
    Key("pretrain", "epochs", "int", 10),
    Key("pretrain", "learning_rate", "float", 3e-3),

    Key("train", "epochs", "int", 5, 5),
    Key("train", "virtual_batch_size", "int", 128, 1024),
    Key("train", "micro_batch_size", "int", 64),
    Key("train", "lr_full", "float", 1e-3, 1e-4),
    Key("train", "lr_prompt_prefix", "float", 1e-2, 1e-2),
    Key("train", "lr_schedule", "str", "linear", "linear"),
    Key("train", "optimizer", "str", "adam", "adam"),
    Key("train", "canary_epochs", "int", 5, 5, help="epochs for the canary-inserted victim"),

    Key("privacy", "epsilon", "float?", 8.0, 8.0, "target epsilon; leave empty to use noise_multiplier"),
    Key("privacy", "delta", "float", 1e-5, 1e-5),
    Key("privacy", "clip_norm", "float", 0.1, 0.1),
    Key("privacy", "noise_multiplier", "float?", None, help="explicit sigma (exclusive with epsilon)"),

    Key("canary", "formats", "list", ("Name", "City", "Email", "Phone", "Letters", "OneWord", "ThreeWords")),
    Key("canary", "fraction", "float", 0.4, 0.4),
    Key("canary", "base_reps", "int", 10, 10),

    Key("mia", "n_shadows", "int", 32, 128),
    Key("mia", "pooled_variance", "bool", False),
    Key("mia", "offline", "bool", True, help="also run the offline variant against the pretrained base"),

    Key("eia", "epochs", "int", 120, help="attacker epochs; not fixed at full scale"),
    Key("eia", "learning_rate", "float", 1e-3),
    Key("eia", "batch_size", "int", 32),
    Key("eia", "max_len", "int", 64),
    Key("eia", "attacker_model", "str", "tiny", help="model preset for the attacker decoder"),
)

MODEL_KEYS: tuple[Key, ...] = (
    Key("model", "embedding_dim", "int", 32),
    Key("model", "num_layers", "int", 1),
    Key("model", "context_length", "int", 64),
    Key("model", "hidden_width", "int", 128),
    Key("model", "num_virtual_tokens", "int", 15, 15),
)

_REGISTRY = {(k.section, k.name): k for k in KEYS}


class ExperimentConfig:
    """Resolved configuration: registry defaults overridden by file and command-line values."""

    def __init__(self, values: dict[tuple[str, str], Any] | None = None,
                 models: dict[str, dict[str, Any]] | None = None):
        self._values = {(k.section, k.name): k.default for k in KEYS}
        self.models: dict[str, dict[str, Any]] = {"tiny": {k.name: k.default for k in MODEL_KEYS}}
        for (section, name), raw in (values or {}).items():
            self.set(section, name, raw)
        for preset, fields in (models or {}).items():
            for name, raw in fields.items():
                self.set_model(preset, name, raw)
        self.validate()

    def get(self, section: str, name: str):
        try:
            return self._values[(section, name)]
        except KeyError:
            raise ConfigError(f"unknown config key {section}.{name}") from None

    def set(self, section: str, name: str, raw) -> None:
        key = _REGISTRY.get((section, name))
        if key is None:
            raise ConfigError(f"unknown config key {section}.{name}")
        if raw is None and key.kind != "float?":
            raise ConfigError(f"{key.dotted} needs a value")
        try:
            self._values[(section, name)] = PARSERS[key.kind](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key.dotted}: {exc}") from None

    def set_model(self, preset: str, name: str, raw) -> None:
        kinds = {k.name: k for k in MODEL_KEYS}
        if name not in kinds:
            raise ConfigError(f"unknown model key {name!r} in preset {preset!r}")
        fields = self.models.setdefault(preset, {k.name: k.default for k in MODEL_KEYS})
        try:
            fields[name] = PARSERS[kinds[name].kind](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.{preset}.{name}: {exc}") from None

    def validate(self) -> None:
        g = self.get
        if g("privacy", "epsilon") is not None and g("privacy", "noise_multiplier") is not None:
            raise ConfigError("privacy.epsilon and privacy.noise_multiplier are mutually exclusive")
        if "on" in g("experiment", "dp") and g("privacy", "epsilon") is None and g("privacy", "noise_multiplier") is None:
            raise ConfigError("DP runs need privacy.epsilon or privacy.noise_multiplier")
        bad = set(g("experiment", "attacks")) - {"dea", "mia", "eia"}
        if bad:
            raise ConfigError(f"unknown attacks {sorted(bad)}")
        bad = set(g("experiment", "tuning_modes")) - {"full", "prompt", "prefix"}
        if bad:
            raise ConfigError(f"unknown tuning modes {sorted(bad)}")
        bad = set(g("experiment", "dp")) - {"on", "off"}
        if bad:
            raise ConfigError(f"experiment.dp entries must be on/off, got {sorted(bad)}")
        for preset in (*g("experiment", "models"), g("eia", "attacker_model")):
            if preset not in self.models:
                raise ConfigError(f"model preset {preset!r} has no [model.{preset}] section")
        if not g("pretrain", "enabled") and set(g("experiment", "tuning_modes")) & {"prompt", "prefix"}:
            raise ConfigError("prompt and prefix tuning need a pretrained base (pretrain.enabled = true)")
        if g("corpus", "tokenizer") not in ("word", "char"):
            raise ConfigError("corpus.tokenizer must be word or char")
        if g("corpus", "source") not in ("synthetic", "tsv", "jsonl"):
            raise ConfigError("corpus.source must be synthetic, tsv or jsonl")
        if g("experiment", "dtype") not in ("float32", "float64"):
            raise ConfigError("experiment.dtype must be float32 or float64")
        if g("train", "virtual_batch_size") % g("train", "micro_batch_size"):
            raise ConfigError("train.virtual_batch_size must be a multiple of train.micro_batch_size")

    # -- canonical forms ------------------------------------------------------------------

    def as_dict(self) -> dict:
        out: dict[str, dict] = {}
        for (section, name), value in self._values.items():
            out.setdefault(section, {})[name] = list(value) if isinstance(value, tuple) else value
        out["models"] = {p: dict(sorted(f.items())) for p, f in sorted(self.models.items())}
        return out

    def hash(self) -> str:
        """sha256 over every resolved value except the output directory."""
        d = self.as_dict()
        d["experiment"] = {k: v for k, v in d["experiment"].items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for section in dict.fromkeys(k.section for k in KEYS):
            lines.append(f"[{section}]")
            for k in KEYS:
                if k.section == section:
                    lines.append(f"{k.name} = {render_value(self.get(section, k.name))}")
            lines.append("")
        for preset, fields in sorted(self.models.items()):
            lines.append(f"[model.{preset}]")
            lines.extend(f"{n} = {render_value(v)}" for n, v in fields.items())
            lines.append("")
        return "\n".join(lines)


def render_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read an INI file, then apply ``{"section.name": value}`` overrides."""
    values: dict[tuple[str, str], Any] = {}
    models: dict[str, dict[str, Any]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            if section.startswith("model."):
                models[section[len("model."):]] = dict(parser[section])
                continue
            for name, raw in parser[section].items():
                values[(section, name)] = raw
    for dotted, raw in (overrides or {}).items():
        parts = dotted.split(".")
        if parts[0] == "model" and len(parts) == 3:
            models.setdefault(parts[1], {})[parts[2]] = raw
        elif len(parts) == 2:
            values[(parts[0], parts[1])] = raw
        else:
            raise ConfigError(f"malformed override key {dotted!r}")
    return ExperimentConfig(values, models)


def describe_keys() -> Iterable[str]:
    """One line per key: name, desk default, full-scale value, and a flag when they differ."""
    for k in KEYS + MODEL_KEYS:
        full = "" if k.full_scale is None else render_value(k.full_scale)
        flag = " [desk]" if k.full_scale is not None and k.full_scale != k.default else ""
        yield f"{k.dotted:34s} desk={render_value(k.default)!s:24s} full={full}{flag}  {k.help}".rstrip()
