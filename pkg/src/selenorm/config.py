"""Pipeline configuration: named profiles, JSON files and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .baselines import ToneBalanceConfig
from .cgan import DiscriminatorConfig, GeneratorConfig
from .errors import ConfigurationError
from .inference import InferenceConfig
from .preprocess import ClaheConfig
from .synth import DegradationSpec, SceneSpec
from .training import TrainConfig

CONFIG_SCHEMA = "selenorm.config/1"
OUT_ENV = "SELENORM_OUT"
PROFILES = ("desk", "paper")

# section name -> dataclass
SECTIONS = {
    "scene_spec": SceneSpec,
    "degradation_spec": DegradationSpec,
    "clahe_config": ClaheConfig,
    "train_config": TrainConfig,
    "generator_config": GeneratorConfig,
    "discriminator_config": DiscriminatorConfig,
    "inference_config": InferenceConfig,
    "tone_balance_config": ToneBalanceConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    n_scenes: int = 20
    split_fractions: tuple[float, float, float] = (0.5, 0.1, 0.4)
    apply_clahe: bool = True
    histogram_bins: int = 256
    output_dir: str = "runs"
    scene_spec: SceneSpec = field(default_factory=SceneSpec)
    degradation_spec: DegradationSpec = field(default_factory=DegradationSpec)
    clahe_config: ClaheConfig = field(default_factory=ClaheConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    generator_config: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator_config: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    inference_config: InferenceConfig = field(default_factory=InferenceConfig)
    tone_balance_config: ToneBalanceConfig = field(default_factory=ToneBalanceConfig)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.n_scenes < 3:
            raise ConfigurationError("n_scenes must be >= 3 (train, val and test each need a scene)")
        if self.train_config.patch_size % self.generator_config.multiple:
            raise ConfigurationError(
                f"train patch_size {self.train_config.patch_size} not divisible by "
                f"2^depth = {self.generator_config.multiple}"
            )
        if self.inference_config.patch_size % self.generator_config.multiple:
            raise ConfigurationError("inference patch_size not divisible by 2^depth")
        if min(self.scene_spec.size) < self.train_config.patch_size:
            raise ConfigurationError("scene size smaller than the training patch")

    def to_dict(self) -> dict:
        d = {"schema": CONFIG_SCHEMA}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = asdict(v) if f.name in SECTIONS else v
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def desk_profile() -> PipelineConfig:
    """Small defaults that train end to end on one CPU core in well under an hour."""
    return PipelineConfig(
        profile="desk",
        n_scenes=20,
        split_fractions=(0.5, 0.1, 0.4),
        train_config=TrainConfig(patch_size=128, epochs=20, checkpoint_every=5, early_stop_patience=10),
        generator_config=GeneratorConfig(depth=4, base_channels=32),
        discriminator_config=DiscriminatorConfig(base_channels=32),
        inference_config=InferenceConfig(patch_size=128),
    )


def paper_profile() -> PipelineConfig:
    """Full-scale settings: 512 px patches, depth-7 U-Net, 150 epochs."""
    return PipelineConfig(
        profile="paper",
        n_scenes=100,
        split_fractions=(0.8, 0.1, 0.1),
        scene_spec=SceneSpec(size=(2048, 2048)),
        train_config=TrainConfig(
            learning_rate=2e-4, batch_size=8, epochs=150, lambda_l1=100.0, patch_size=512
        ),
        generator_config=GeneratorConfig(depth=7, base_channels=64),
        discriminator_config=DiscriminatorConfig(base_channels=64),
        inference_config=InferenceConfig(patch_size=512),
    )


def profile_config(name: str) -> PipelineConfig:
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ConfigurationError(f"unknown profile {name!r}; choose from {PROFILES}")


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(d: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``d`` on ``base`` (or on the profile named in ``d``, default desk)."""
    d = dict(d)
    # run directories embed how they were invoked; that block is not configuration
    d.pop("invocation", None)
    schema = d.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigurationError(f"unsupported config schema {schema!r}; expected {CONFIG_SCHEMA!r}")
    if base is None:
        base = profile_config(d.get("profile", "desk"))
    merged = _merge(base.to_dict(), d)
    merged.pop("schema", None)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    try:
        for name, value in merged.items():
            if name in SECTIONS:
                cls = SECTIONS[name]
                allowed = {f.name for f in fields(cls)}
                extra = set(value) - allowed
                if extra:
                    raise ConfigurationError(f"unknown keys in {name}: {sorted(extra)}")
                kwargs[name] = cls(**value)
            else:
                kwargs[name] = value
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def resolve_config(path=None, profile: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Profile defaults, then the config file, then flag overrides (flags win).

    ``overrides`` maps ``"section.key"`` (or a top-level key) to a value.
    """
    file_dict = load_config(path) if path else {}
    name = profile or file_dict.get("profile", "desk")
    cfg = from_dict({**file_dict, "profile": name}, base=profile_config(name))
    if overrides:
        nested: dict = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                section, sub = key.split(".", 1)
                nested.setdefault(section, {})[sub] = value
            else:
                nested[key] = value
        cfg = from_dict(nested, base=cfg)
    return cfg


def apply_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """One root seed for scenes, degradations and training."""
    return replace(
        cfg,
        seed=seed,
        scene_spec=replace(cfg.scene_spec, seed=seed),
        degradation_spec=replace(cfg.degradation_spec, seed=seed),
        train_config=replace(cfg.train_config, seed=seed),
    )


def output_root(cli_out=None, cfg: PipelineConfig | None = None) -> Path:
    """``--out`` beats ``$SELENORM_OUT`` beats the config's ``output_dir``."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir if cfg else "runs")
