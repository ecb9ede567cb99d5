"""Run configuration: one validated record holding every hyperparameter.

JSON files map 1:1 onto the dataclasses below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, replace

from .detnet import DEFAULT_CONFIGS, PLACEMENTS, TEACHER_ROLES, ConfigError, NetConfig, validate_family
from .losses import LossWeights
from .nmode import SolverSpec
from .numcore import ContractError
from .synthdata import NoiseSpec, SceneSpec

# design-decision deviations recorded in every run's metadata
DEVIATION_FLAGS = {
    "alpha_sigmoid": "LWFF channel weights are squashed by a sigmoid",
    "generator_loss_nonsaturating": "generator uses -log D(G(S)) instead of log(1 - D(G(S)))",
}


def _default_teachers() -> dict:
    return {r: DEFAULT_CONFIGS[r] for r in TEACHER_ROLES}


@dataclass(frozen=True)
class DistillConfig:
    teachers: dict = field(default_factory=_default_teachers)
    student: NetConfig = DEFAULT_CONFIGS["student"]
    loss: LossWeights = field(default_factory=LossWeights)
    solver: SolverSpec = field(default_factory=SolverSpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 800
    n_val: int = 100
    n_test: int = 100
    optimizer: str = "adam"
    lr_student: float = 2e-3
    lr_generator: float = 2e-3
    lr_discriminator: float = 5e-4
    batch_size: int = 8
    teacher_epochs: int = 20
    distill_epochs: int = 20
    seed: int = 0
    distillation: bool = True
    use_nmode2: bool = True
    fusion: str = "lwff"
    use_aatm: bool = True
    nmode2_placement: tuple = ("head",)
    train_fusion: bool = True
    d_steps: int = 1
    generator_loss: str = "nonsaturating"
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    precision: int = 32
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nmode2_placement", tuple(sorted(set(self.nmode2_placement))))
        teachers = {r: replace(c, solver=self.solver) for r, c in self.teachers.items()}
        object.__setattr__(self, "teachers", teachers)
        object.__setattr__(self, "student", replace(self.student, solver=self.solver))
        self.validate()

    def validate(self) -> None:
        problems = []
        if set(self.teachers) != set(TEACHER_ROLES):
            problems.append(f"teachers must be exactly {TEACHER_ROLES}")
        try:
            validate_family({**self.teachers, "student": self.student})
        except ConfigError as e:
            problems.append(str(e))
        widths = {c.pyramid_levels for c in [*self.teachers.values(), self.student]}
        if len(widths) != 1:
            problems.append("all networks must share pyramid_levels")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.fusion not in ("lwff", "sum", "concat"):
            problems.append(f"fusion must be lwff, sum or concat, got {self.fusion!r}")
        if self.generator_loss not in ("nonsaturating", "literal"):
            problems.append(f"generator_loss must be nonsaturating or literal, got {self.generator_loss!r}")
        if set(self.nmode2_placement) - set(PLACEMENTS):
            problems.append(f"nmode2_placement must be a subset of {PLACEMENTS}")
        for name in ("lr_student", "lr_generator", "lr_discriminator"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("n_train", "n_val", "n_test", "batch_size", "d_steps", "threads"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("teacher_epochs", "distill_epochs", "seed"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.precision not in (32, 64):
            problems.append("precision must be 32 or 64")
        if not 0 <= self.score_thresh <= 1 or not 0 < self.nms_iou <= 1:
            problems.append("score_thresh in [0, 1] and nms_iou in (0, 1] required")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def student_net(self) -> NetConfig:
        placement = self.nmode2_placement if self.use_nmode2 else ()
        return replace(self.student, nmode2_placement=placement)

    @property
    def fusion_channels(self) -> int:
        return self.teachers["teacher_small"].pyramid_channels

    def deviation_flags(self) -> dict:
        return {
            "alpha_sigmoid": self.fusion == "lwff",
            "generator_loss_nonsaturating": self.use_aatm and self.generator_loss == "nonsaturating",
        }


# --- (de)serialisation --------------------------------------------------------------

def to_dict(obj) -> typing.Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key, cls, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, ContractError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def _coerce(hint, value, path: str, owner, key):
    if owner is DistillConfig and key == "teachers":
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object of teacher configs")
        return {r: _build(NetConfig, v, f"{path}.{r}") for r, v in value.items()}
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(data: dict) -> DistillConfig:
    return _build(DistillConfig, data, "")


def load_config(path) -> DistillConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(data)


def dump_config(cfg: DistillConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def with_overrides(cfg: DistillConfig, overrides: dict) -> DistillConfig:
    """Apply top-level scalar overrides (e.g. from CLI flags)."""
    names = {f.name: f for f in dataclasses.fields(DistillConfig)}
    data = to_dict(cfg)
    for k, v in overrides.items():
        if k not in names:
            raise ConfigError(f"unknown override {k!r}")
        if isinstance(data[k], dict):
            raise ConfigError(f"override {k!r} is a nested section, not a scalar field")
        data[k] = v
    return from_dict(data)


def desk_config(**overrides) -> DistillConfig:
    return replace(DistillConfig(), **overrides) if overrides else DistillConfig()


__all__ = [
    "DistillConfig", "NoiseSpec", "SceneSpec", "LossWeights", "SolverSpec", "NetConfig",
    "from_dict", "load_config", "dump_config", "config_hash", "with_overrides", "to_dict",
]
