"""Model and training configuration, plus the plain-text key=value format.

The tiny/micro/nano schedules are reconstructions: channel widths double at
each merge and depths were tuned so the trainable-parameter totals land on
the published 40M / 12.3M / 5.2M budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

N_CLASSES_AUDIOSET = 527


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    depth: int
    dim: int


@dataclass
class ModelConfig:
    variant: str = "nano"
    patch_size: int = 4
    dims: tuple = (32, 64, 128, 256)
    depths: tuple = (2, 2, 7, 2)
    state_size: int = 16
    expand_ratio: int = 2
    mlp_ratio: int = 4
    n_classes: int = N_CLASSES_AUDIOSET
    n_windows: int = 4
    input_frames: int = 1024
    n_mels: int = 64
    conv_kernel: int = 3
    with_transformer_interleave: bool = False
    n_heads: int = 4
    drop_path_rate: float = 0.1
    scan_chunk: int = 32

    def __post_init__(self):
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ConfigError("exactly four stages are required")
        for a, b in zip(self.dims, self.dims[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage dims must double at each merge, got {self.dims}")
        if self.with_transformer_interleave:
            for d in self.dims:
                if d % self.n_heads != 0:
                    raise ConfigError(f"dim {d} not divisible by {self.n_heads} heads")

    @property
    def stages(self) -> list[StageConfig]:
        return [StageConfig(depth=d, dim=c) for d, c in zip(self.depths, self.dims)]

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.n_windows * self.n_mels, self.input_frames // self.n_windows)


_PRESETS = {
    "tiny": dict(dims=(96, 192, 384, 768), depths=(2, 2, 7, 2)),    # ~40.9M
    "micro": dict(dims=(48, 96, 192, 384), depths=(2, 2, 9, 2)),    # ~12.2M
    "nano": dict(dims=(32, 64, 128, 256), depths=(2, 2, 7, 2)),     # ~5.1M
}


def model_config(variant: str, **overrides) -> ModelConfig:
    if variant not in _PRESETS:
        raise ConfigError(f"unknown variant '{variant}' (expected one of {sorted(_PRESETS)})")
    return ModelConfig(variant=variant, **{**_PRESETS[variant], **overrides})


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    warmup_steps: int = 20
    total_steps: int = 300
    cutmix_prob: float = 0.5
    cutmix_alpha: float = 1.0
    seed: int = 0
    grad_clip: float = 1.0
    eval_every: int = 100
    checkpoint_every: int = 100

    def __post_init__(self):
        for f in ("batch_size", "learning_rate", "weight_decay", "warmup_steps",
                  "total_steps", "grad_clip"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")
        if not 0.0 <= self.cutmix_prob <= 1.0:
            raise ConfigError("cutmix_prob must lie in [0, 1]")


# ---------------------------------------------------------------------------
# plain-text key=value serialization
# ---------------------------------------------------------------------------

def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got '{raw}'")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(","))
    return raw


def apply_overrides(model_cfg: ModelConfig, train_cfg: TrainConfig,
                    pairs: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Apply 'model.x' / 'train.x' key=value overrides; unknown keys rejected."""
    m_fields = {f.name for f in fields(ModelConfig)}
    t_fields = {f.name for f in fields(TrainConfig)}
    m_over, t_over = {}, {}
    for key, raw in pairs.items():
        scope, _, name = key.partition(".")
        if scope == "model" and name in m_fields:
            m_over[name] = _coerce(raw, getattr(model_cfg, name))
        elif scope == "train" and name in t_fields:
            t_over[name] = _coerce(raw, getattr(train_cfg, name))
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return replace(model_cfg, **m_over), replace(train_cfg, **t_over)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a key=value config file; parse errors carry line numbers."""
    pairs: dict[str, str] = {}
    variant = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{stripped}'")
            key, _, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key == "model.variant":
                variant = value
            else:
                pairs[key] = value
    model_cfg = model_config(variant) if variant else ModelConfig()
    train_cfg = TrainConfig()
    try:
        return apply_overrides(model_cfg, train_cfg, pairs)
    except (ConfigError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    """Render every field as key=value (round-trips through load_config)."""
    lines = []
    for f in fields(ModelConfig):
        v = getattr(model_cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"model.{f.name}={v}")
    for f in fields(TrainConfig):
        lines.append(f"train.{f.name}={getattr(train_cfg, f.name)}")
    return "\n".join(lines) + "\n"
