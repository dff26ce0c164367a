"""Run configuration: one YAML file drives every pipeline stage.

Parsing is strict (unknown keys are errors, no silent typos) and
round-trips exactly. Environment variables override single fields with
the documented prefix, e.g. D3D_DISTILL__LR_NERF=2e-3 sets
config.distill.lr_nerf; nesting uses a double underscore.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field as dc_field, fields, is_dataclass
from pathlib import Path

import yaml

ENV_PREFIX = "D3D_"


class ConfigError(Exception):
    pass


@dataclass
class FieldSection:
    depth: int = 8
    width: int = 64
    latent_dim: int = 16
    pos_levels: int = 12
    dir_levels: int = 4
    color_width: int = 32
    scene_radius: float = 1.0
    n_subjects: int = 16


@dataclass
class SamplingSection:
    n_samples: int = 96
    near: float = 0.9
    far: float = 3.1
    stratified: bool = True
    background_color: tuple = (1.0, 1.0, 1.0)


@dataclass
class OrbitSection:
    n_orbits: int = 12
    samples_per_orbit: int = 30
    radius_min: float = 1.6
    radius_max: float = 2.4
    elevation_min: float = -0.35
    elevation_max: float = 0.7
    vertical_fov: float = 0.6
    width: int = 64
    height: int = 64


@dataclass
class DatasetSection:
    n_subjects: int = 16
    n_cameras: int = 13
    resolution: int = 64
    seed: int = 0
    with_normals: bool = False
    path: str = "dataset"


@dataclass
class PretrainSection:
    epochs: int = 4
    batches_per_epoch: int = 125
    lr: float = 5e-3
    lr_final: float = 1e-3
    batch_rays: int = 768
    n_samples: int = 40


@dataclass
class PriorSpec:
    kind: str = "analytic"          # analytic | toy | remote
    mean: float = 0.5               # analytic: constant mean image value
    mean_image: str | None = None   # analytic: optional .npy mean image
    var: float = 0.04
    label: int = 1
    checkpoint: str | None = None   # toy: trained denoiser container
    url: str | None = None          # remote: server base URL
    model_id: str = "default"


@dataclass
class PriorsSection:
    color: PriorSpec = dc_field(default_factory=PriorSpec)
    normal: PriorSpec | None = None


@dataclass
class ToyTrainSection:
    hidden: tuple = (96, 96)
    emb_dim: int = 8
    t_levels: int = 4
    n_labels: int = 8
    reserved_tokens: tuple = (6, 7)
    steps: int = 600
    lr: float = 2e-3
    p_uncond: float = 0.1
    batch_size: int = 16
    image_resolution: int = 16
    class_labels: tuple = (1, 2)    # subject i -> label class_labels[i % len]
    finetune_subject: int = 0
    finetune_views: int = 60
    finetune_steps: int = 800
    finetune_lr: float = 2e-3
    finetune_token: int = 6


@dataclass
class ConceptSection:
    label: int = 1
    extra_tokens: tuple = ()
    weight: float = 1.0
    polarity: str = "positive"


@dataclass
class DistillSection:
    lr_nerf: float = 1e-4
    lr_lora: float | None = None
    cfg_main: float = 3.0
    cfg_proxy: float = 1.0
    lambda_normal: float = 0.5
    lambda_acc: float = 0.01
    t_min: float = 0.02
    t_max: float = 0.8
    omega: str = "one"
    iterations: int = 400
    mode: str = "vsd"
    optimizer: str = "sgd"
    lora_rank: int = 4
    grad_clip: float | None = None
    update_ceiling: float = 1.0
    latent_only: bool = False
    normal_epsilon: float | None = None
    field_checkpoint: str = "field.d3df"
    init_latent: int | str = 0      # table index or "random"
    checkpoint_every: int = 100
    preview_every: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    precision: str = "float32"
    field: FieldSection = dc_field(default_factory=FieldSection)
    sampling: SamplingSection = dc_field(default_factory=SamplingSection)
    orbits: OrbitSection = dc_field(default_factory=OrbitSection)
    dataset: DatasetSection = dc_field(default_factory=DatasetSection)
    pretrain: PretrainSection = dc_field(default_factory=PretrainSection)
    priors: PriorsSection = dc_field(default_factory=PriorsSection)
    toy_train: ToyTrainSection = dc_field(default_factory=ToyTrainSection)
    concepts: tuple = (ConceptSection(),)
    distill: DistillSection = dc_field(default_factory=DistillSection)


_OPTIONAL_DATACLASS = {"normal": PriorSpec}  # fields that may be null


def _from_dict(cls, data, path=""):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got "
                          f"{type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        val = data[name]
        sub = _field_dataclass(f)
        if sub is not None:
            kwargs[name] = _from_dict(sub, val, f"{path}{name}.")
        elif name == "concepts":
            kwargs[name] = tuple(_from_dict(ConceptSection, c, f"{path}concepts.")
                                 for c in val)
        elif isinstance(val, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def _field_dataclass(f):
    if is_dataclass(f.type) and isinstance(f.type, type):
        return f.type
    t = str(f.type)
    for cls in (FieldSection, SamplingSection, OrbitSection, DatasetSection,
                PretrainSection, PriorsSection, PriorSpec, ToyTrainSection,
                DistillSection):
        if cls.__name__ in t and "tuple" not in t:
            return cls
    return None


def _to_dict(obj):
    if is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_dict(v) for v in obj]
    return obj


def load_config(path=None, text=None, env=None) -> RunConfig:
    """Parse YAML (file path or literal text) and apply environment
    overrides. Missing file -> error; unknown keys -> error."""
    if text is None:
        if path is None:
            data = {}
        else:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            data = yaml.safe_load(p.read_text()) or {}
    else:
        data = yaml.safe_load(text) or {}
    cfg = _from_dict(RunConfig, data)
    return apply_env_overrides(cfg, env if env is not None else os.environ)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(_to_dict(cfg), sort_keys=False)


def apply_env_overrides(cfg: RunConfig, env) -> RunConfig:
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        target = cfg
        for part in path[:-1]:
            if not hasattr(target, part):
                raise ConfigError(f"env override {key}: no section {part!r}")
            target = getattr(target, part)
            if target is None:
                raise ConfigError(f"env override {key}: section is null")
        leaf = path[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"env override {key}: no field {leaf!r}")
        current = getattr(target, leaf)
        setattr(target, leaf, _parse_env_value(raw, current))
    return cfg


def _parse_env_value(raw: str, current):
    parsed = yaml.safe_load(raw)
    if isinstance(current, tuple) and isinstance(parsed, list):
        return tuple(parsed)
    return parsed


def validate_paths(cfg: RunConfig, need_dataset=False, need_field=False,
                   base: Path | None = None) -> None:
    """Check referenced files before any work starts."""
    base = Path(base) if base else Path(".")
    if need_dataset and not (base / cfg.dataset.path / "dataset.json").exists():
        raise ConfigError(f"dataset not found at {base / cfg.dataset.path}")
    if need_field and not (base / cfg.distill.field_checkpoint).exists():
        raise ConfigError(f"field checkpoint not found: "
                          f"{base / cfg.distill.field_checkpoint}")
    for name in ("color", "normal"):
        spec = getattr(cfg.priors, name)
        if spec is None:
            continue
        if spec.kind == "toy" and spec.checkpoint and \
                not (base / spec.checkpoint).exists():
            raise ConfigError(f"{name} prior checkpoint missing: {spec.checkpoint}")
        if spec.kind == "remote" and not spec.url:
            raise ConfigError(f"{name} prior is remote but has no url")
        if spec.kind not in ("analytic", "toy", "remote"):
            raise ConfigError(f"unknown prior kind {spec.kind!r}")
