"""Flat `key = value` configuration with defaults, file values, and flag
overrides (flag > file > default). Unknown keys and malformed lines are
rejected; every key records where its value came from."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

# Every configurable key with its default. Types are inferred from the
# defaults; values in files/flags are parsed accordingly.
DEFAULTS: dict[str, object] = {
    # backbone / policy
    "model.latent": 128,
    "model.blocks": 4,
    "model.heads": 8,
    "model.mlp_ratio": 4.0,
    "model.dropout_attn": 0.3,
    "model.dropout_resid": 0.1,
    "model.dropout_mlp": 0.1,
    "model.chunk": 10,
    "model.history": 1,
    "model.action_dim": 4,
    "model.max_tokens": 96,
    "model.modality": "both",  # both | rgb | xyz
    # diffusion
    "diffusion.sigma_min": 0.001,
    "diffusion.sigma_max": 80.0,
    "diffusion.steps": 4,
    "diffusion.sigma_data": 0.5,
    # fusion
    "fusion.mode": "cat",  # early6ch | add | cat | attn
    "fusion.attn_layers": 4,
    "fusion.attn_heads": 4,
    # encoders
    "encoder.family": "film-residual",  # film-residual | depthwise-conv
    "encoder.stages": "16,32,64,128",
    "encoder.tokens": "grid",  # grid | pooled-single
    # training
    "train.lr": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.95,
    "train.weight_decay": 0.05,
    "train.batch": 32,
    "train.steps": 2000,
    "train.ema": 0.999,
    "train.seed": 0,
    # environment / evaluation
    "env.task": "reach-color",
    "env.img": 64,
    "env.views": 2,
    "env.episodes": 200,
    "env.stride": 10,
    "env.eval_episodes": 50,
    "env.depth_noise": 0.0,
}

_CHOICES = {
    "model.modality": ("both", "rgb", "xyz"),
    "fusion.mode": ("early6ch", "add", "cat", "attn"),
    "encoder.family": ("film-residual", "depthwise-conv"),
    "encoder.tokens": ("grid", "pooled-single"),
    "env.task": ("reach-color", "reach-geometry"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            value = raw.lower() == "true"
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"key {key}: {value!r} not in {_CHOICES[key]}")
    return value


@dataclass
class Config:
    """Resolved configuration plus per-key provenance."""

    values: dict[str, object]
    provenance: dict[str, str]

    def __getitem__(self, key: str):
        return self.values[key]

    def stage_widths(self) -> tuple[int, ...]:
        raw = str(self.values["encoder.stages"])
        try:
            widths = tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"encoder.stages: cannot parse {raw!r}") from None
        if not widths or any(w <= 0 for w in widths):
            raise ConfigError(f"encoder.stages: need positive widths, got {raw!r}")
        return widths

    def snapshot(self) -> str:
        """Canonical text form (sorted `key = value` lines)."""
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def with_overrides(self, overrides: dict[str, str]) -> "Config":
        values = dict(self.values)
        prov = dict(self.provenance)
        for key, raw in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _parse_value(key, str(raw))
            prov[key] = "flag"
        return Config(values, prov)


def default_config() -> Config:
    return Config(dict(DEFAULTS), {k: "default" for k in DEFAULTS})


def parse_config(path=None, overrides: dict[str, str] | None = None) -> Config:
    """Resolve a config from an optional file and flag overrides."""
    values = dict(DEFAULTS)
    prov = {k: "default" for k in DEFAULTS}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: malformed line {line!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw)
            prov[key] = "file"
    cfg = Config(values, prov)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
