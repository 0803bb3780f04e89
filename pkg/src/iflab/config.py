"""Run configuration: one YAML file describing every stage of a run.

Nested sections mirror the library modules. Parsing is strict: unknown
keys are rejected with their dotted path so a typo cannot silently fall
back to a default. Lists become tuples so configs hash and compare by
value; parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import BadConfig


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"          # blobs | xor | moons
    n: int = 600
    d: int = 2
    k: int = 2
    label_noise: float = 0.0
    split_fracs: tuple = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"       # logistic | mlp (quadratic is library-only)
    hidden: int = 8              # mlp hidden width; ignored for logistic
    activation: str = "tanh"
    l2_reg: float = 1e-4


@dataclass(frozen=True)
class ScheduleConfig:
    batch_size: int = 8
    t_max: int = 1000            # schedule length; must cover training plus any fine-tuning
    lr_kind: str = "constant"    # constant | cosine
    lr: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    record_every: int = 1
    checkpoint_at: tuple = ()    # extra recorded steps to save as checkpoint_step{t}.bin


@dataclass(frozen=True)
class InfluenceConfig:
    method: str = "hif"          # hif | abif | tracin | exact
    damping: float = 1e-4
    tol: float = 1e-8
    abif_k: int = 32             # subspace size
    abif_num_iters: int = 64
    probes: int = 32             # train points scored (0 = all)
    test_points: int = 16        # test points scored (0 = all)


@dataclass(frozen=True)
class DivergenceConfig:
    T: int = 400
    eps_grid: tuple = (1e-3, 1e-2, 1e-1)
    upsample_set_size: int = 16
    record_every: int = 1
    tail_frac: float = 0.6


@dataclass(frozen=True)
class GronwallConfig:
    T: int = 400
    eps_grid: tuple = (1e-3, 1e-2, 1e-1)
    upsample_set_size: int = 16
    record_every: int = 1
    rel_tol: float = 1e-9


@dataclass(frozen=True)
class FirstOrderConfig:
    eps_grid: tuple = (1e-3, 3e-3, 1e-2, 3e-2)
    t_grid: tuple = (10, 50)
    upsample_set_size: int = 16


@dataclass(frozen=True)
class FadingConfig:
    methods: tuple = ("hif", "abif", "tracin")
    n_train_probes: int = 32     # probe counts and eps from the measurement protocol
    n_test_probes: int = 16
    eps: float = -0.01
    repeats: int = 9
    horizon: int = 200
    record_every: int = 1
    hif_damping: float = 1e-4
    abif_k: int = 32
    abif_num_iters: int = 64


@dataclass(frozen=True)
class CorrectionConfig:
    methods: tuple = ("proponents", "opponents", "random-baseline")
    eps_grid: tuple = (0.0, 0.25, 0.5)
    k: int = 50                  # correction set size
    max_steps: int = 50          # fine-tuning budget
    lr: float = 1e-3             # fine-tuning rate
    n_retention_probes: int = 50
    max_jobs: int | None = None
    damping: float = 1e-4        # for the default score computation


@dataclass(frozen=True)
class RunConfig:
    run_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    gronwall: GronwallConfig = field(default_factory=GronwallConfig)
    first_order: FirstOrderConfig = field(default_factory=FirstOrderConfig)
    fading: FadingConfig = field(default_factory=FadingConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise BadConfig(f"config section '{path or 'top level'}' must be a mapping")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in allowed:
            raise BadConfig(f"unknown config key '{dotted}'")
        fld = allowed[key]
        default = (
            fld.default_factory()
            if fld.default_factory is not dataclasses.MISSING
            else fld.default
        )
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, dotted)
        else:
            kwargs[key] = _freeze(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise BadConfig(f"bad config section '{path or 'top level'}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    def thaw(value):
        if dataclasses.is_dataclass(value):
            return {f.name: thaw(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [thaw(v) for v in value]
        return value

    return thaw(cfg)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise BadConfig(f"config is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise BadConfig("config must be a mapping at the top level")
    return config_from_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
