"""Hyperparameters and tokenization arithmetic.

Every other module reads its sizes from :class:`ModelConfig` and the derived
:class:`Geometry`. Config files are flat ``key = value`` text with ``#``
comments; see README for the key list.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or violated invariants."""


# Keys that determine parameter shapes or tokenization. Only these enter the
# checkpoint fingerprint, so stage-2 knobs (lr, epochs, seed) can differ
# between the stage-1 checkpoint and the run loading it.
ARCH_KEYS = (
    "audio_frames", "mel_bins", "audio_patch",
    "visual_frames", "visual_size", "channels", "visual_patch",
    "num_slices", "encoder_dim", "decoder_dim", "num_heads",
    "encoder_layers", "decoder_layers", "critic_hidden", "head_hidden",
)


@dataclass(frozen=True)
class ModelConfig:
    # media / tokenization
    clip_seconds: float = 3.2
    visual_fps: float = 5.0
    audio_sample_rate: int = 16000
    mel_bins: int = 128
    mel_hop_ms: float = 4.0
    mel_window_ms: float = 16.0
    visual_frames: int = 16
    audio_frames: int = 768
    visual_size: int = 224
    channels: int = 3
    visual_patch: tuple[int, int, int] = (2, 16, 16)
    audio_patch: tuple[int, int] = (16, 16)
    num_slices: int = 8
    mask_ratio: float = 0.5
    # architecture (desk scale)
    encoder_dim: int = 192
    decoder_dim: int = 96
    num_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    critic_hidden: int = 64
    head_hidden: int = 256
    # objectives
    temperature: float = 0.05
    loss_weights: tuple[float, float, float] = (0.01, 1.0, 0.1)
    wgan_clip: float = 0.01
    gradient_penalty: float = 0.0
    n_critic: int = 1
    exclude_same_source_negatives: bool = False
    # optimisation
    batch_size: int = 32
    stage1_epochs: int = 200
    stage2_epochs: int = 50
    stage1_lr: float = 1.5e-4
    stage2_lr: float = 1.0e-4
    critic_lr: float = 5.0e-5
    weight_decay: float = 0.05
    warmup_fraction: float = 0.08
    stage2_restart_epochs: int = 10
    val_fraction: float = 0.1
    val_every: int = 1
    augment_stage1: bool = True
    augment_stage2: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        validate(self)

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def masked_slices(self) -> int:
        return int(round(self.mask_ratio * self.num_slices))

    @property
    def slice_seconds(self) -> float:
        return self.clip_seconds / self.num_slices

    @property
    def hop_samples(self) -> int:
        return int(round(self.mel_hop_ms * self.audio_sample_rate / 1000))

    @property
    def window_samples(self) -> int:
        return int(round(self.mel_window_ms * self.audio_sample_rate / 1000))

    def to_text(self, keys: tuple[str, ...] | None = None) -> str:
        """Canonical ``key = value`` text, keys sorted."""
        values = dataclasses.asdict(self)
        keys = tuple(sorted(keys or values))
        return "".join(f"{k} = {_format(values[k])}\n" for k in keys)

    def fingerprint(self) -> int:
        """64-bit hash of the architecture-relevant config text."""
        digest = hashlib.blake2b(self.to_text(ARCH_KEYS).encode(), digest_size=8)
        return int.from_bytes(digest.digest(), "little")


@dataclass(frozen=True)
class Geometry:
    audio_tokens_total: int
    audio_tokens_per_slice: int
    visual_tokens_total: int
    visual_tokens_per_slice: int
    patch_dim_audio: int
    patch_dim_visual: int
    audio_grid: tuple[int, int] = field(default=(0, 0))
    visual_grid: tuple[int, int, int] = field(default=(0, 0, 0))


def _positive(cfg: ModelConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)!r}")


def validate(cfg: ModelConfig) -> None:
    _positive(
        cfg, "clip_seconds", "visual_fps", "audio_sample_rate", "mel_bins",
        "mel_hop_ms", "mel_window_ms", "visual_frames", "audio_frames",
        "visual_size", "channels", "num_slices", "encoder_dim", "decoder_dim",
        "num_heads", "encoder_layers", "critic_hidden", "head_hidden",
        "temperature", "wgan_clip", "n_critic", "batch_size",
    )
    if cfg.decoder_layers < 0:
        raise ConfigError("decoder_layers must be >= 0")
    if len(cfg.visual_patch) != 3 or min(cfg.visual_patch) <= 0:
        raise ConfigError(f"visual_patch must be 3 positive ints, got {cfg.visual_patch}")
    if len(cfg.audio_patch) != 2 or min(cfg.audio_patch) <= 0:
        raise ConfigError(f"audio_patch must be 2 positive ints, got {cfg.audio_patch}")
    if len(cfg.loss_weights) != 3 or min(cfg.loss_weights) <= 0:
        raise ConfigError(f"loss_weights must be 3 values > 0, got {cfg.loss_weights}")

    pd, ph, pw = cfg.visual_patch
    at, af = cfg.audio_patch
    k = cfg.num_slices
    checks = [
        (cfg.visual_frames % (pd * k) == 0,
         f"visual_frames ({cfg.visual_frames}) divisible by visual_patch depth x num_slices ({pd * k})"),
        (cfg.audio_frames % (at * k) == 0,
         f"audio_frames ({cfg.audio_frames}) divisible by audio_patch time x num_slices ({at * k})"),
        (cfg.visual_size % ph == 0,
         f"visual_size ({cfg.visual_size}) divisible by visual_patch height ({ph})"),
        (cfg.visual_size % pw == 0,
         f"visual_size ({cfg.visual_size}) divisible by visual_patch width ({pw})"),
        (cfg.mel_bins % af == 0,
         f"mel_bins ({cfg.mel_bins}) divisible by audio_patch freq ({af})"),
        (cfg.encoder_dim % cfg.num_heads == 0,
         f"encoder_dim ({cfg.encoder_dim}) divisible by num_heads ({cfg.num_heads})"),
        (cfg.decoder_dim % cfg.num_heads == 0,
         f"decoder_dim ({cfg.decoder_dim}) divisible by num_heads ({cfg.num_heads})"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(f"constraint violated: {message}")

    if not 0 <= cfg.mask_ratio < 1:
        raise ConfigError(f"mask_ratio must lie in [0, 1), got {cfg.mask_ratio}")
    masked = cfg.mask_ratio * k
    if abs(masked - round(masked)) > 1e-9:
        raise ConfigError(
            f"constraint violated: mask_ratio x num_slices = {masked:g} is not an integer")

    # frame counts agree with the clip duration up to frame rounding
    audio_span = cfg.audio_frames * cfg.mel_hop_ms / 1000
    visual_span = cfg.visual_frames / cfg.visual_fps
    for name, span in (("audio_frames x mel_hop", audio_span), ("visual_frames / visual_fps", visual_span)):
        if abs(span - cfg.clip_seconds) > 0.05 * cfg.clip_seconds:
            raise ConfigError(
                f"constraint violated: {name} = {span:.4f}s does not match clip_seconds = {cfg.clip_seconds}s")
    if cfg.mel_window_ms < cfg.mel_hop_ms:
        raise ConfigError("mel_window_ms must be >= mel_hop_ms")
    if not 0 <= cfg.warmup_fraction < 1:
        raise ConfigError("warmup_fraction must lie in [0, 1)")
    if not 0 <= cfg.val_fraction < 1:
        raise ConfigError("val_fraction must lie in [0, 1)")
    if cfg.gradient_penalty < 0:
        raise ConfigError("gradient_penalty must be >= 0")


def derive_geometry(cfg: ModelConfig) -> Geometry:
    validate(cfg)
    pd, ph, pw = cfg.visual_patch
    at, af = cfg.audio_patch
    k = cfg.num_slices
    audio_grid = (cfg.audio_frames // at, cfg.mel_bins // af)
    visual_grid = (cfg.visual_frames // pd, cfg.visual_size // ph, cfg.visual_size // pw)
    n_a = audio_grid[0] * audio_grid[1]
    n_v = visual_grid[0] * visual_grid[1] * visual_grid[2]
    return Geometry(
        audio_tokens_total=n_a,
        audio_tokens_per_slice=n_a // k,
        visual_tokens_total=n_v,
        visual_tokens_per_slice=n_v // k,
        patch_dim_audio=at * af,
        patch_dim_visual=pd * ph * pw * cfg.channels,
        audio_grid=audio_grid,
        visual_grid=visual_grid,
    )


# ---------------------------------------------------------------------------
# text format

_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(kind: type, text: str, key: str) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            as_float = float(text)
            if not as_float.is_integer():
                raise ValueError(text)
            return int(as_float)
        return kind(text)
    except ValueError:
        raise ConfigError(f"type mismatch for {key}: expected {kind.__name__}, got {text!r}") from None


def parse_value(key: str, value: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key: {key!r}")
    default = _FIELDS[key].default
    if isinstance(default, tuple):
        if isinstance(value, str):
            parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        else:
            parts = list(value)
        kind = type(default[0])
        parsed = tuple(_parse_scalar(kind, str(p), key) for p in parts)
        if len(parsed) != len(default):
            raise ConfigError(f"type mismatch for {key}: expected {len(default)} values, got {len(parsed)}")
        return parsed
    kind = type(default)
    if isinstance(value, str):
        return _parse_scalar(kind, value, key)
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"type mismatch for {key}: expected {kind.__name__}, got {value!r}")
    return value


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ModelConfig:
    """Defaults, overlaid by the file at ``path``, then by ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value)
    try:
        return ModelConfig(**values)
    except TypeError as exc:  # pragma: no cover - parse_value already guards keys
        raise ConfigError(str(exc)) from None


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    """``["k=v", ...]`` as passed by ``--set`` on the command line."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# presets

DESK = dict(
    mel_bins=32, mel_hop_ms=25.0, mel_window_ms=50.0, audio_frames=128,
    audio_patch=(8, 8), visual_size=64, visual_patch=(2, 8, 8),
)

# Small enough for the synthetic end-to-end runs on a single CPU core.
TINY = dict(
    audio_sample_rate=2000, mel_bins=16, mel_hop_ms=50.0, mel_window_ms=100.0,
    audio_frames=64, audio_patch=(4, 4), visual_size=16, visual_patch=(2, 4, 4),
    encoder_dim=64, decoder_dim=32, num_heads=4, encoder_layers=2, decoder_layers=1,
    critic_hidden=32, head_hidden=64,
    # short runs: larger steps, and a contrastive weight that is not swamped
    # by the reconstruction term
    stage1_lr=1e-3, stage2_lr=1e-3, loss_weights=(0.1, 1.0, 0.1),
)

PRESETS = {"paper": {}, "desk": DESK, "tiny": TINY}


def preset(name: str, **overrides: Any) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})

