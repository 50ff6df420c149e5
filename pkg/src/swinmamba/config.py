"""Line-oriented ``key = value`` configuration with schema validation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .checkpoint import format_value
from .network import PRESETS, ModelConfig

# key -> default; the default's type is the key's type
SCHEMA: dict[str, object] = {
    "seed": 0,
    "data_dir": "data",
    "out_dir": "runs",
    "stages": 4,
    "base_channels": 16,
    "input_size": 64,
    "L": 9,
    "s": 8,
    "alpha": 2.0,
    "state_dim": 8,
    "expand": 2,
    "conv_width": 4,
    "residual": True,
    "epochs": 50,
    "lr": 1e-4,
    "batch_size": 1,
    "crop": 0,  # 0: train on whole images
    "eval_interval": 5,
    "dtype": "float32",
    "n_train": 200,
    "n_test": 50,
    "flags.use_bam": True,
    "flags.use_swtoken": True,
    "flags.use_freq": True,
    "flags.use_sffu": True,
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_value(key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class CliConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            stages=v["stages"], base_channels=v["base_channels"], L=v["L"], s=v["s"],
            alpha=v["alpha"], state_dim=v["state_dim"], expand=v["expand"],
            conv_width=v["conv_width"], residual=v["residual"], input_size=v["input_size"],
            seed=v["seed"], use_bam=v["flags.use_bam"], use_swtoken=v["flags.use_swtoken"],
            use_freq=v["flags.use_freq"], use_sffu=v["flags.use_sffu"])

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in SCHEMA)

    def echo(self, out_dir=None) -> Path:
        out = Path(out_dir or self.values["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.txt"
        path.write_text(self.dump())
        return path


def resolve(settings: dict[str, str]) -> dict:
    values = dict(SCHEMA)
    for key, text in settings.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, text, SCHEMA[key])
    return values


def parse_config(file=None, overrides=(), preset: str | None = None) -> CliConfig:
    """Defaults < file < preset < ``key=value`` overrides."""
    settings: dict[str, str] = {}
    if file is not None:
        settings.update(parse_lines(Path(file).read_text(), str(file)))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        settings.update({f"flags.{k}": format_value(v) for k, v in PRESETS[preset].items()})
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        settings[key.strip()] = value.strip()
    values = resolve(settings)
    if values["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {values['dtype']!r}")
    cfg = CliConfig(values)
    try:
        cfg.model_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg
