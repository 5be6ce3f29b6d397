"""INI-style run configuration: ``[synth]``, ``[model]``, ``[train]``, ``[weights]``."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .networks import ModelConfig
from .synthdata import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "weights": LossWeights}


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip() == key:
            return n
    return None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (missing keys keep defaults), then apply ``overrides``.

    ``overrides`` maps ``"section.key"`` to already-typed values, e.g. from
    command-line flags.
    """
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}:{_line_of(text, section, '') or '?'}: unknown section [{section}]")
            defaults = {f.name: f.default for f in dataclasses.fields(_SECTIONS[section])}
            for key, raw in parser.items(section):
                where = f"{path}:{_line_of(text, section, key) or '?'} [{section}] {key}"
                if key not in defaults or key == "weights":
                    raise ConfigError(f"{where}: unknown key {key!r}")
                default = defaults[key]
                if default is dataclasses.MISSING:
                    default = ""
                values[section][key] = _convert(raw, default, where)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        values[section][key] = value
    try:
        weights = LossWeights(**values["weights"])
        return RunConfig(
            synth=SynthConfig(**values["synth"]),
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"], weights=weights),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<defaults>'}: {exc}") from None


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to INI text; ``load_config`` on the result reproduces ``cfg``."""
    parser = configparser.ConfigParser()
    d = cfg.as_dict()
    d["weights"] = d["train"].pop("weights")
    for section in ("synth", "model", "train", "weights"):
        parser[section] = {
            k: " ".join(repr(x) for x in v) if isinstance(v, (tuple, list)) else repr(v) if isinstance(v, float) else str(v)
            for k, v in d[section].items()
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
