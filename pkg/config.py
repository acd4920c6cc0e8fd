# config.py
"""
Run configuration: a flat `key = value` file, `#` comment lines.

Unknown, duplicate or missing keys and out-of-range values all raise
InvalidScheduleConfig.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from backend import BackendConfig
from editor import EditOptions, GatingPolicy
from errors import InvalidScheduleConfig, IoError
from scheduler import NoiseSchedule, build_schedule
from utils.path_helper import data_path

PathLike = Union[str, Path]


# -------------------------
# Paths & Config
# -------------------------
DEFAULT_CONFIG_PATH = data_path("default.cfg")

REQUIRED_KEYS = (
    "seed", "train_steps", "sample_steps", "beta_min", "beta_max",
    "gate_t_start", "gate_t_end", "gate_l_start", "gate_l_end",
    "mt_threshold", "blend_threshold", "mt_soft", "p2p_inject",
)

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    train_steps: int
    sample_steps: int
    beta_min: float
    beta_max: float
    gate_t_start: int
    gate_t_end: int
    gate_l_start: int
    gate_l_end: int
    mt_threshold: float
    blend_threshold: float
    mt_soft: bool
    p2p_inject: bool
    dump_dir: Optional[str] = None
    blend_mode: str = "union"
    ablation: str = "full"
    guidance_scale: float = 1.0
    backend_channels: int = 4
    backend_latent_size: int = 16
    backend_patch_size: int = 4
    backend_resolutions: Tuple[int, ...] = (16, 8, 8, 16)
    backend_heads: int = 2
    backend_head_dim: int = 8
    backend_text_dim: int = 32
    backend_seq_len: int = 8
    backend_output_gain: float = 1.0

    def __post_init__(self):
        # thresholds, blend_mode and ablation
        self.edit_options()
        for name in ("backend_channels", "backend_latent_size", "backend_patch_size",
                     "backend_heads", "backend_head_dim", "backend_text_dim", "backend_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidScheduleConfig(f"{name} must be positive")
        if not self.backend_resolutions or min(self.backend_resolutions) < 1:
            raise InvalidScheduleConfig("backend_resolutions needs at least one positive size")
        self.gating().validate(self.sample_steps, self.layer_count)

    @property
    def layer_count(self) -> int:
        return len(self.backend_resolutions)

    # -------------------------
    # derived objects
    # -------------------------
    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.train_steps, self.sample_steps, (self.beta_min, self.beta_max))

    def backend_config(self) -> BackendConfig:
        return BackendConfig(
            seed=self.seed,
            channels=self.backend_channels,
            latent_size=(self.backend_latent_size, self.backend_latent_size),
            patch_size=self.backend_patch_size,
            block_resolutions=tuple((r, r) for r in self.backend_resolutions),
            heads=self.backend_heads,
            head_dim=self.backend_head_dim,
            text_dim=self.backend_text_dim,
            seq_len=self.backend_seq_len,
            output_gain=self.backend_output_gain,
        )

    def gating(self) -> GatingPolicy:
        return GatingPolicy((self.gate_t_start, self.gate_t_end), (self.gate_l_start, self.gate_l_end))

    def edit_options(self) -> EditOptions:
        return EditOptions(
            mt_threshold=self.mt_threshold,
            blend_threshold=self.blend_threshold,
            mt_soft=self.mt_soft,
            p2p_inject=self.p2p_inject,
            blend_mode=self.blend_mode,
            ablation=self.ablation,
            guidance_scale=self.guidance_scale,
        )


# -------------------------
# value parsing
# -------------------------
def _parse_bool(key: str, text: str) -> bool:
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise InvalidScheduleConfig(f"{key}: expected a boolean, got {text!r}")


def _parse_value(key: str, kind, text: str):
    try:
        if kind is bool:
            return _parse_bool(key, text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(part) for part in text.split(","))
        return text
    except ValueError:
        raise InvalidScheduleConfig(f"{key}: cannot parse {text!r}") from None


_FIELD_TYPES = {
    "seed": int, "train_steps": int, "sample_steps": int,
    "beta_min": float, "beta_max": float,
    "gate_t_start": int, "gate_t_end": int, "gate_l_start": int, "gate_l_end": int,
    "mt_threshold": float, "blend_threshold": float, "mt_soft": bool, "p2p_inject": bool,
    "dump_dir": str, "blend_mode": str, "ablation": str, "guidance_scale": float,
    "backend_channels": int, "backend_latent_size": int, "backend_patch_size": int,
    "backend_resolutions": Tuple[int, ...], "backend_heads": int, "backend_head_dim": int,
    "backend_text_dim": int, "backend_seq_len": int, "backend_output_gain": float,
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: Dict[str, object] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidScheduleConfig(f"{source}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise InvalidScheduleConfig(f"{source}:{number}: unknown key {key!r}")
        if key in values:
            raise InvalidScheduleConfig(f"{source}:{number}: duplicate key {key!r}")
        values[key] = _parse_value(key, _FIELD_TYPES[key], value)

    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise InvalidScheduleConfig(f"{source}: missing keys {', '.join(missing)}")

    config = RunConfig(**values)
    # schedule ranges are checked here so a bad file fails before any work starts
    config.schedule()
    return config


def load_config(path: Optional[PathLike] = None) -> RunConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        logging.exception("Failed to read config %s", path)
        raise IoError(f"cannot read config {path}: {exc}") from exc
    config = parse_config(text, str(path))
    logging.info("Loaded config %s (T=%d, seed=%d)", path, config.sample_steps, config.seed)
    return config


def format_config(config: RunConfig) -> str:
    lines = []
    for name in sorted(_FIELD_TYPES):
        value = getattr(config, name)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path: PathLike):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(format_config(config), encoding="utf-8")
    except OSError as exc:
        logging.exception("Failed to save config %s", path)
        raise IoError(f"cannot write config {path}: {exc}") from exc
