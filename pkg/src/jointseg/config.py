"""Run configuration: defaults, flat key-value config files, and digests."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .backbone import LayerSpec
from .inference import MeanShiftConfig
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0

    # data: either a directory of scene files or inline synthetic generation
    data_dir: str = ""
    num_scenes: int = 8
    room_extent: tuple[float, float, float] = (1.0, 1.0, 0.8)
    num_classes: int = 4
    min_instances: int = 2
    max_instances: int = 6
    min_points_per_instance: int = 50
    max_points_per_instance: int = 90
    noise_std: float = 0.005

    # block splitting
    block_size: float = 1.0
    stride: float = 0.5
    points_per_block: int = 512
    min_block_points: int = 64
    center_xy: bool = True

    # backbone geometry
    npoints: tuple[int, int, int] = (128, 32, 8)
    widths: tuple[int, int, int] = (64, 128, 256)
    radii: tuple[float, float, float] = (0.2, 0.4, 0.8)
    nsamples: tuple[int, int, int] = (16, 16, 16)
    density_reweight: bool = False

    # heads and loss
    embedding_dim: int = 5
    delta_v: float = 0.5
    delta_d: float = 1.5

    # clustering
    bandwidth: float = 0.6
    ms_max_iter: int = 300
    ms_tol: float = 1e-4

    # block merging
    voxel_divisions: int = 400
    overlap_threshold: float = 0.3

    # optimizer / training
    learning_rate: float = 0.001
    momentum: float = 0.9
    beta2: float = 0.999
    lr_decay: float = 0.5
    decay_every: int = 500
    batch_size: int = 4
    iterations: int = 2000
    dtype: str = "float32"

    # ablations and strategies
    feature_fusion: bool = True
    instance_fusion: bool = True
    semantic_fusion: bool = True
    early_stopping: bool = False
    patience: int = 10
    val_fraction: float = 0.1
    random_sample: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.delta_d > self.delta_v > 0:
            raise ConfigError(f"need delta_d > delta_v > 0, got {self.delta_v}, {self.delta_d}")

    def layer_spec(self) -> LayerSpec:
        return LayerSpec(npoints=self.npoints, widths=self.widths, radii=self.radii,
                         nsamples=self.nsamples, density_reweight=self.density_reweight)

    def loss_config(self) -> LossConfig:
        return LossConfig(delta_v=self.delta_v, delta_d=self.delta_d)

    def mean_shift_config(self) -> MeanShiftConfig:
        return MeanShiftConfig(bandwidth=self.bandwidth, max_iter=self.ms_max_iter,
                               tol=self.ms_tol)

    def to_kv_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return lines

    def digest(self) -> str:
        payload = "\n".join(sorted(self.to_kv_lines())).encode()
        return hashlib.sha256(payload).hexdigest()

    def model_digest(self) -> str:
        """Digest over the fields that determine the parameter set, so a
        checkpoint can detect architectural drift without pinning every
        inference knob."""
        arch = ("npoints", "widths", "radii", "nsamples", "density_reweight",
                "num_classes", "embedding_dim", "feature_fusion", "instance_fusion",
                "semantic_fusion", "dtype")
        lines = sorted(l for l in self.to_kv_lines() if l.split(" = ")[0] in arch)
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELD_TYPES[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.split(",") if p.strip()]
            kind = type(default[0])
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} ({e})") from e


def parse_config_text(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read())
