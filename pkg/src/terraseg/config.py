"""Run configuration: ``key = value`` files with ``[section]`` headers.

Resolution order is defaults, then the file, then command-line overrides.
Keys are typed by their defaults; anything unknown is an error that names
the key and the line it came from.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data.augment import AugmentSpec
from .training import TrainConfig

COMMANDS = ("synth", "augment", "train", "eval", "predict", "baseline-grid")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key, self.line = key, line


def _fields_of(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)}


def default_sections() -> dict[str, dict]:
    train = _fields_of(TrainConfig)
    train.pop("seed")
    augment = _fields_of(AugmentSpec)
    augment.pop("seed")
    return {
        "run": {"data": "", "out": "runs", "preset": "tiny", "threshold": 190.0, "seed": 0},
        "train": train,
        "augment": {**augment, "val_fraction": 0.1, "test_fraction": 0.1},
        # n_sites = 0 picks a count proportional to field area.
        "synth": {"n_fields": 4, "height": 572, "width": 572, "n_sites": 0, "target_ratio": 120.0},
        "eval": {"checkpoint": "", "predictions": "", "split": "test"},
        "baseline": {"widths": (16, 32, 64, 128), "batch_size": 32, "checkpoint_every": 500,
                     "input_size": 128, "head_prior": 0.01},
    }


def _parse_value(raw: str, default, key: str, line: int | None):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} as {type(default).__name__}", key, line) from None
    return raw


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _split_key(key: str, section: str, sections: dict, line: int | None) -> tuple[str, str]:
    if "." in key:
        section, key = key.split(".", 1)
    if section not in sections:
        raise ConfigError(f"unknown section [{section}]", key, line)
    if key not in sections[section]:
        # Bare keys in [run] may name any unique key elsewhere.
        owners = [s for s, vals in sections.items() if key in vals] if section == "run" else []
        if len(owners) > 1:
            raise ConfigError(f"ambiguous key; qualify it as one of "
                              f"{', '.join(f'{o}.{key}' for o in owners)}", key, line)
        if not owners:
            raise ConfigError("unknown configuration key", key, line)
        section = owners[0]
    return section, key


@dataclass
class RunConfig:
    command: str = "train"
    sections: dict[str, dict] = field(default_factory=default_sections)

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.sections[section][key]

    def set(self, dotted: str, raw, line: int | None = None) -> None:
        section, key = _split_key(dotted, "run", self.sections, line)
        default = self.sections[section][key]
        self.sections[section][key] = _parse_value(raw, default, key, line) if isinstance(raw, str) else raw

    # typed views -----------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.sections["run"]["seed"])

    @property
    def threshold(self) -> float:
        return float(self.sections["run"]["threshold"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.sections["train"], seed=self.seed)

    def augment_spec(self) -> AugmentSpec:
        keys = {f.name for f in dataclasses.fields(AugmentSpec)}
        vals = {k: v for k, v in self.sections["augment"].items() if k in keys}
        return AugmentSpec(**vals, seed=self.seed)

    def dumps(self) -> str:
        lines = ["# terraseg resolved configuration", f"command = {self.command}", ""]
        for section, vals in self.sections.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in vals.items()]
            lines.append("")
        return "\n".join(lines)

    def freeze(self, directory) -> Path:
        """Write the fully resolved config next to a run's outputs."""
        path = Path(directory) / "config.frozen.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def parse_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    section = "run"
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=n)
            section = line[1:-1].strip()
            if section not in cfg.sections:
                raise ConfigError(f"unknown section [{section}]", line=n)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=n)
        key, value = (s.strip() for s in line.split("=", 1))
        if section == "run" and key == "command":
            cfg.command = value
            continue
        s, k = _split_key(key, section, cfg.sections, n)
        cfg.sections[s][k] = _parse_value(value, cfg.sections[s][k], key, n)
    return cfg


def parse_config(path=None, overrides: dict[str, object] | None = None, command: str | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (dotted or bare keys)."""
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        parse_text(p.read_text(encoding="utf-8"), cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)
    if command is not None:
        cfg.command = command
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}; choose from {', '.join(COMMANDS)}", "command")
    cfg.train_config()  # validate ranges early
    return cfg
