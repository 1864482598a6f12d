"""Flat key=value run configuration: one registry of known keys with typed
defaults, preset expansion, file parsing, and override merging.  Unknown keys
are rejected; the effective config is echoed into every run directory."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import PRESETS, ModelConfig
from .synth import SyntheticConfig
from .tracker import TrackerSettings
from .train import TrainConfig


@dataclass
class RunConfig:
    # model
    preset: str = "gate"
    template_size: int = 32
    search_size: int = 64
    patch: int = 8
    n_blocks: int = 2
    d_model: int = 32
    d_state: int = 8
    n_templates: int = 4
    max_templates: int = 4
    image_channels: int = 3
    conv_kernel: int = 4
    head_width: int = 32
    template_factor: float = 2.0
    search_factor: float = 4.0
    delta_mode: str = "state_channel"
    state_interaction: bool = True
    size_axis_swap: bool = False
    lambda_l1: float = 2.0
    lambda_giou: float = 5.0
    # synthetic world
    image_size: int = 128
    object_min: int = 16
    object_max: int = 28
    velocity: float = 2.0
    jitter: float = 0.2
    n_distractors: int = 3
    distractor_similarity: float = 0.4
    occluder_prob: float = 0.0
    occluder_duration: int = 5
    n_frames: int = 80
    # tracker
    update_interval: int = 20
    memory_cap: int = 50
    n_sample: int = 10
    # training
    steps: int = 1200
    batch_size: int = 16
    base_lr: float = 5e-4
    head_lr: float = 2e-3
    weight_decay: float = 1e-4
    pool_sequences: int = 24
    center_jitter: float = 0.10
    scale_jitter: float = 0.25
    # benchmark
    bench_k_max: int = 8
    bench_repeats: int = 7
    # run
    seed: int = 0
    eval_sequences: int = 20

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            template_size=self.template_size, search_size=self.search_size,
            patch=self.patch, n_blocks=self.n_blocks, d_model=self.d_model,
            d_state=self.d_state, n_templates=self.n_templates,
            max_templates=self.max_templates,
            image_channels=self.image_channels, conv_kernel=self.conv_kernel,
            head_width=self.head_width, template_factor=self.template_factor,
            search_factor=self.search_factor, delta_mode=self.delta_mode,
            state_interaction=self.state_interaction,
            size_axis_swap=self.size_axis_swap, lambda_l1=self.lambda_l1,
            lambda_giou=self.lambda_giou)

    def synth_config(self, seed: int | None = None,
                     n_frames: int | None = None) -> SyntheticConfig:
        return SyntheticConfig(
            image_size=self.image_size,
            object_size=(self.object_min, self.object_max),
            velocity=self.velocity, jitter=self.jitter,
            n_distractors=self.n_distractors,
            distractor_similarity=self.distractor_similarity,
            occluder_prob=self.occluder_prob,
            occluder_duration=self.occluder_duration,
            n_frames=self.n_frames if n_frames is None else n_frames,
            seed=self.seed if seed is None else seed)

    def tracker_settings(self) -> TrackerSettings:
        return TrackerSettings(update_interval=self.update_interval,
                               memory_cap=self.memory_cap,
                               n_sample=self.n_sample)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size,
            base_lr=self.base_lr, head_lr=self.head_lr,
            weight_decay=self.weight_decay,
            pool_sequences=self.pool_sequences,
            center_jitter=self.center_jitter, scale_jitter=self.scale_jitter,
            seed=self.seed)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_MODEL_KEYS = set(PRESETS["gate"]) | {"template_factor", "search_factor"}


def _coerce(key: str, raw: str):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """key = value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_run_config(path: str | None,
                    overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- preset <- config file <- overrides, later wins."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_config_text(p.read_text(), source=str(path)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value

    cfg = RunConfig()
    preset = raw.get("preset", cfg.preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    cfg.preset = preset
    for key, value in PRESETS[preset].items():
        setattr(cfg, key, value)
    for key, value in raw.items():
        if key == "preset":
            continue
        setattr(cfg, key, _coerce(key, value))
    return cfg


def echo_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
