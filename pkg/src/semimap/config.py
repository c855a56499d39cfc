"""Flat ``key = value`` run configuration.

Every tunable of generation, architecture, losses, optimisation and the
training schedule lives in :class:`RunConfig`.  Text files hold one
``key = value`` per line; ``#`` starts a comment.  Environment variables
``SEMIMAP_<KEY>`` (upper case) override file values, and explicit
overrides (command-line flags) override both.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .nets import ArchConfig
from .objectives import LossWeights
from .optim import OptimConfig
from .toyhand import CorruptionParams, GenConfig, SamplerConfig

ENV_PREFIX = "SEMIMAP_"
VARIANTS = ("baseline", "view-pred", "distr-match", "full", "real-only", "synth-only")
ABLATION_VARIANTS = ("baseline", "view-pred", "distr-match", "full")


class ConfigError(ValueError):
    pass


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_n_labeled(s) -> int:
    if isinstance(s, int):
        return s
    s = str(s).strip().lower()
    return -1 if s == "all" else int(s)


@dataclass
class RunConfig:
    # data
    data: str = "data.mrds"
    gen_count: int = 2000
    gen_train_fraction: float = 0.8
    gen_resolution: int = 32
    gen_views: int = 2
    gen_separation_deg: float = 60.0
    gen_footprint_mm: float = 64.0
    gen_cube_mm: float = 32.0
    gen_noise_mm: float = 3.0
    gen_quant_mm: float = 4.0
    gen_dropout: float = 0.15
    gen_erosion: int = 0
    gen_fingers: int = 3
    gen_segments: int = 2
    # run
    variant: str = "full"
    n_labeled: int = -1
    seed: int = 0
    precision: int = 32
    pretrain_iters: int = 4000
    joint_iters: int = 4000
    checkpoint_every: int = 0
    log_every: int = 1
    # architecture (resolution comes from the dataset)
    arch_latent: int = 64
    arch_stem: int = 32
    arch_stages: tuple = (16, 32, 64, 64)
    arch_blocks: int = 1
    arch_decoder: tuple = (64, 32, 16)
    # losses
    lambda_c: float = 0.2
    lambda_g: float = 1e-4
    lambda_m: float = 1e-5
    detach_correspondence: bool = True
    adversarial_mapper_only: bool = False
    freeze_pose: bool = False
    # optimiser
    lr: float = 3.3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.04
    batch: int = 64
    # augmentation
    augment: bool = True
    aug_max_angle: float = 60.0
    aug_offset_mm: float = 5.0
    aug_noise_mm: float = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.n_labeled < -1:
            raise ConfigError(f"n_labeled must be >= 0 or 'all', got {self.n_labeled}")
        for k in ("pretrain_iters", "joint_iters", "checkpoint_every"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        try:
            self.weights()
            self.optim()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- typed views ------------------------------------------------------
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_g, self.lambda_m)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.decay, self.batch)

    def arch(self, resolution: int, joints: int) -> ArchConfig:
        return ArchConfig(
            resolution=resolution,
            latent=self.arch_latent,
            joints=joints,
            stem=self.arch_stem,
            stages=tuple(self.arch_stages),
            blocks_per_stage=self.arch_blocks,
            decoder=tuple(self.arch_decoder),
        )

    def gen(self) -> GenConfig:
        return GenConfig(
            count=self.gen_count,
            train_fraction=self.gen_train_fraction,
            resolution=self.gen_resolution,
            views=self.gen_views,
            separation_deg=self.gen_separation_deg,
            footprint_mm=self.gen_footprint_mm,
            cube_mm=self.gen_cube_mm,
            seed=self.seed,
            sampler=SamplerConfig(fingers=self.gen_fingers, segments=self.gen_segments),
            corruption=CorruptionParams(noise_mm=self.gen_noise_mm, quant_mm=self.gen_quant_mm, dropout=self.gen_dropout, erosion=self.gen_erosion),
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- text form --------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str):
    typ = FIELD_TYPES.get(key)
    if typ is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if typ is bool:
            return _bool(raw)
        if typ is int:
            return parse_n_labeled(raw) if key == "n_labeled" else int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return _ints(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key in FIELD_TYPES:
            out[key] = parse_value(key, raw)
    return out


def resolve(path=None, overrides: dict | None = None, environ=None, base: RunConfig | None = None) -> RunConfig:
    """Defaults < config file < environment < explicit overrides."""
    values = dict((base or RunConfig()).items())
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_text(fh.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    values.update(env_overrides(environ))
    for k, v in (overrides or {}).items():
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def from_text(text: str) -> RunConfig:
    return RunConfig(**parse_text(text))


def describe_keys() -> str:
    return "\n".join(f"  {k} = {format_value(v)}" for k, v in RunConfig().items())
