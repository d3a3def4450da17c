"""Flat ``key = value`` run configuration shared by every CLI command.

One setting per line, ``#`` starts a comment, blank lines are skipped.
Unknown keys are rejected by name.  ``none`` means "unset" for optional
values; booleans are ``true``/``false``; lists are comma-separated.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .evalkit import PavpuConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # data generation
    data_seed: int = 0
    n_labeled: int = 32
    n_unlabeled: int = 256
    n_val: int = 64
    height: int = 32
    width: int = 32
    n_foreground: int = 3
    n_scene_types: int = 2
    color_jitter: float = 0.55
    # training (see TrainConfig)
    seed: int = 0
    epochs: int = 40
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    kl_weight: float = 0.005
    n_samples: int = 5
    bank_capacity: int = 2560
    latent_dim: int = 8
    context_dim: int = 8
    reduced_dim: int = 8
    feature_channels: int = 32
    encoder_depth: int = 3
    decoder_hidden: int = 64
    latent_hidden: int = 32
    pseudo_label_threshold: float | None = None
    aggregator: str = "attention"
    head: str = "np"
    dropout: float = 0.5
    unlabeled_view: str = "strong"
    use_unlabeled: bool = True
    eval_every: int = 5
    # evaluation
    eval_mode: str = "crop"
    crop: int | None = None
    stride: int | None = None
    pavpu_window: int = 4
    pavpu_threshold: float = 0.4
    pavpu_accuracy: float = 0.5
    # benchmark
    bench_T: tuple[int, ...] = (1, 2, 5, 10)
    bench_repeats: int = 3
    bench_images: int = 4

    def __post_init__(self):
        if self.eval_mode not in ("crop", "slide"):
            raise ConfigError(f"eval_mode must be 'crop' or 'slide', got {self.eval_mode!r}")
        if not self.bench_T or min(self.bench_T) < 1 or self.bench_repeats < 1 or self.bench_images < 1:
            raise ConfigError("bench_T entries, bench_repeats and bench_images must be >= 1")
        self.train_config()
        self.pavpu_config()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: getattr(self, k) for k in names if k != "n_class"}
        return TrainConfig(n_class=self.n_foreground + 1, **kwargs)

    def pavpu_config(self) -> PavpuConfig:
        try:
            return PavpuConfig(self.pavpu_window, self.pavpu_threshold, self.pavpu_accuracy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def generate_kwargs(self) -> dict:
        return dict(seed=self.data_seed, n_labeled=self.n_labeled, n_unlabeled=self.n_unlabeled,
                    n_val=self.n_val, height=self.height, width=self.width,
                    n_foreground=self.n_foreground, n_scene_types=self.n_scene_types,
                    color_jitter=self.color_jitter)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    optional = "None" in kind
    if optional and text.lower() == "none":
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("tuple"):
            return tuple(int(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind})") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value)
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
