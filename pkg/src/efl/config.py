"""Flat key=value run configuration.

The config file format is deliberately plain: one ``key = value`` per line,
``#`` comments, blank lines ignored. Every key maps onto a `RunConfig` field;
unknown keys are an error so typos fail fast. `--override key=value` on the
CLI patches individual keys after the file is read.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONDITIONING_MODES = (
    "labels_only",
    "descriptions",
    "desc_plus_image",
    "desc_plus_text",
    "desc_plus_joint",
)


@dataclass
class RunConfig:
    """All knobs for one pipeline run. Defaults are desk-scale."""

    seed: int = 0
    workspace: str = "workspace"

    # -- image / token geometry --
    resolution: int = 64
    n_text_tokens: int = 32      # N: fixed text-token rows
    n_image_tokens: int = 16     # M: image-token rows from the visual encoder
    d_cond: int = 64             # D: conditioning channel width fed to the UNet
    d_llm: int = 64              # language-model hidden width

    # -- synthetic corpus --
    n_instances: int = 200
    frame_step: float = 0.25     # seconds between stored frames
    train_fraction: float = 0.8
    ego4d_fraction: float = 0.5  # remaining instances are ek_style

    # -- dataset curation --
    lambda_frac: float = 0.6
    default_delta_in: float = 0.25
    sim_lo: float = 0.81
    sim_hi: float = 0.97
    aesthetic_radius: int = 3

    # -- enrichment --
    enrichment_backend: str = "template"   # template | fixture:<path> | remote:<url>
    enrichment_max_words: int = 128
    enrichment_temperature: float = 0.2
    enrichment_max_tokens: int = 160

    # -- visual instruction tuning --
    vllm_layers: int = 2
    vllm_heads: int = 4
    vllm_epochs: int = 3
    vllm_max_steps: int = 2000
    vllm_lr: float = 1e-3
    vllm_batch: int = 8
    vllm_max_new_tokens: int = 96

    # -- autoencoder --
    latent_channels: int = 4
    downsample_factor: int = 4
    ae_base_width: int = 48
    ae_steps: int = 2500
    ae_lr: float = 2e-3
    ae_batch: int = 16
    finetune_autoencoder: bool = False

    # -- diffusion --
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet_base_width: int = 32
    ldm_steps: int = 2000
    ldm_lr: float = 1e-4
    ldm_batch: int = 8
    flip_prob: float = 0.5
    drop_image_only: float = 0.05
    drop_cond_only: float = 0.05
    drop_both: float = 0.05
    conditioning_mode: str = "desc_plus_joint"

    # -- sampling --
    sample_steps: int = 100
    guidance_image: float = 7.5   # s_x
    guidance_cond: float = 1.5    # s_c
    sampler: str = "ddim"         # ddim | ancestral
    n_generate: int = 12
    probe_frame: str = ""         # path to an input frame for the multi-action probe
    probe_actions: str = ""       # semicolon-separated action labels for the probe

    # -- evaluation --
    extractor_steps: int = 300
    extractor_batch: int = 16
    bins_k: int = 4
    study_export: bool = False
    study_n_raters: int = 5

    def validate(self) -> None:
        if self.n_text_tokens < 1 or self.n_image_tokens < 1 or self.d_cond < 1:
            raise ConfigError("n_text_tokens, n_image_tokens and d_cond must be positive")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(
                f"conditioning_mode must be one of {CONDITIONING_MODES}, got {self.conditioning_mode!r}"
            )
        if not (-1.0 <= self.sim_lo < self.sim_hi <= 1.0):
            raise ConfigError("similarity band requires -1 <= sim_lo < sim_hi <= 1")
        if self.resolution % self.downsample_factor != 0:
            raise ConfigError("resolution must be divisible by downsample_factor")
        if self.sampler not in ("ddim", "ancestral"):
            raise ConfigError("sampler must be 'ddim' or 'ancestral'")
        drop_sum = self.drop_image_only + self.drop_cond_only + self.drop_both
        if min(self.drop_image_only, self.drop_cond_only, self.drop_both) < 0 or drop_sum > 1:
            raise ConfigError("dropout probabilities must be >= 0 and sum to <= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def workspace_path(self) -> Path:
        return Path(self.workspace)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from exc


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` text into a raw string mapping."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def config_from_mapping(values: dict[str, str]) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file, apply ``key=value`` overrides, validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_kv_text(path.read_text(encoding="utf-8"))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    return config_from_mapping(values)


def write_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
