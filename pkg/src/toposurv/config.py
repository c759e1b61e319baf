"""Run configuration: defaults, file parsing (JSON or key=value lines)
and flag overrides.  Validation happens before any compute."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    extents: tuple[int, int, int] = (16, 16, 16)
    channels: tuple[int, ...] = (8, 16, 32)
    latent_dim: int = 64
    bins: int = 5
    tau: float = 0.1
    beta: float = 0.01
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lr: float = 5e-5
    stage1_lr: float = 1e-3
    weight_decay: float = 5e-2
    epochs: int = 100
    patience: int = 15
    early_stop_tol: float = 1e-4
    batch_size: int = 8
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    occlusion_side: int = 2
    occlusion_stride: int = 0  # 0 picks side // 2 (min 1)
    occlusion_fill: float = 0.0
    top_dims: int = 16
    harmonize_k: int = 3  # 0 disables harmonization
    attention_dim: int = 32
    heads: int = 4
    ln_affine: bool = True
    topo_distance: str = "wasserstein2_sq"
    phantom_count: int = 32
    hollow_fraction: float = 0.5
    phantom_noise: float = 0.02
    radius_min: float = 4.0
    radius_max: float = 6.5
    cavity_fraction: float = 0.45  # cavity radius as a share of the outer radius

    def validate(self) -> "RunConfig":
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.bins >= 2, "bins must be >= 2"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.tau >= 0 and self.beta >= 0, "tau and beta must be >= 0"),
            (all(a >= 0 for a in self.alpha), "alpha weights must be >= 0"),
            (self.lr > 0 and self.stage1_lr > 0, "learning rates must be positive"),
            (abs(sum(self.split) - 1.0) < 1e-9, "split fractions must sum to 1"),
            (all(s >= 0 for s in self.split), "split fractions must be >= 0"),
            (self.occlusion_side >= 1, "occlusion side must be >= 1"),
            (self.harmonize_k >= 0, "harmonize_k must be >= 0"),
            (self.top_dims >= 1, "top_dims must be >= 1"),
            (0.0 <= self.hollow_fraction <= 1.0, "hollow_fraction must be in [0, 1]"),
            (self.phantom_count >= 1, "phantom_count must be >= 1"),
            (0.0 <= self.cavity_fraction < 1.0, "cavity_fraction must be in [0, 1)"),
            (self.radius_min <= self.radius_max, "radius range inverted"),
            (self.topo_distance in ("wasserstein2_sq", "matched_mse"),
             f"unknown topo_distance {self.topo_distance!r}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            from .model import EncoderConfig, HeadConfig
            EncoderConfig(self.extents, self.channels, self.latent_dim)
            HeadConfig(self.latent_dim, 1, self.attention_dim, self.heads,
                       self.bins, ln_affine=self.ln_affine)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _parse_value(field: dataclasses.Field, text):
    if not isinstance(text, str):
        return text
    origin = getattr(field.type, "__origin__", None) if not isinstance(field.type, str) else None
    name = field.type if isinstance(field.type, str) else str(field.type)
    if "tuple" in name:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        caster = float if "float" in name else int
        return tuple(caster(p) for p in parts)
    if "bool" in name:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if "int" in name:
        return int(text)
    if "float" in name:
        return float(text)
    return text


def parse_config_text(text: str) -> dict:
    """JSON object or key=value lines (comments with #)."""
    stripped = text.strip()
    if not stripped:
        return {}
    if stripped.startswith("{"):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict | None = None,
                 overrides: dict | None = None) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _parse_value(fields[key], value)
    try:
        config = RunConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config.validate()


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    file_values = {}
    if path:
        with open(path) as fh:
            file_values = parse_config_text(fh.read())
    return build_config(file_values, overrides)


def config_to_json(config: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n"
