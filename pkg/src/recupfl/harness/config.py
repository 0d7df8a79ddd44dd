"""Experiment configuration read from TOML files.

Sections mirror the library's configuration objects::

    [experiment]   name, seeds, out
    [dataset]      synthetic layout (or a CSV path plus column schema)
    [model]        hidden widths and activation of the federated model
    [fl]           clients, rounds, learning rate, participation
    [zoo]          defender zoo size and member family
    [[defense]]    one table per compared defense: kind and its parameter values
    [attack]       adversary kinds, attacked attributes, evaluation rounds
    [recup]        P, Q, protected attributes and weights
    [convergence], [ablation], [zoo_study], [reconstruction]

Unknown keys are rejected so that typos surface as configuration errors.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from recupfl.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

DEFENSE_KINDS = (
    "none",
    "clip",
    "dp-gaussian",
    "dp-laplace",
    "sparsify",
    "soteria",
    "recup",
    "fgsm-one-step",
    "fgsm-average",
    "fgsm-iterative",
    "fgsm-momentum",
)

# Admissible parameter ranges per defense kind (inclusive).
PARAM_BOUNDS = {
    "none": (0.0, 0.0),
    "clip": (1e-12, math.inf),
    "dp-gaussian": (1e-12, math.inf),
    "dp-laplace": (1e-12, math.inf),
    "sparsify": (0.0, 1.0 - 1e-12),
    "soteria": (0.0, 1.0 - 1e-12),
    "recup": (0.0, 10.0),
    "fgsm-one-step": (0.0, 10.0),
    "fgsm-average": (0.0, 10.0),
    "fgsm-iterative": (0.0, 10.0),
    "fgsm-momentum": (0.0, 10.0),
}


def _take(section: dict, cls, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synthetic"
    n_features: int = 16
    task_classes: int = 2
    attributes: tuple = (("a0", 2),)
    attribute_block: int = 3
    correlation: float = 0.0
    image_shape: tuple | None = None
    n_aux: int = 400  # defender/adversary training records
    n_clients: int = 100  # records held by federated clients
    n_test: int = 400
    path: str = ""
    schema: dict = field(default_factory=dict)

    def __post_init__(self):
        attrs = tuple((str(a[0]), int(a[1])) if not isinstance(a, dict) else (str(a["id"]), int(a["classes"])) for a in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"[dataset] kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and (not self.path or not self.schema):
            raise ConfigError("[dataset] csv datasets need 'path' and 'schema'")
        if min(self.n_aux, self.n_clients, self.n_test) < 1:
            raise ConfigError("[dataset] record counts must be positive")


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple = (32,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class FlSection:
    num_clients: int = 100
    rounds: int = 10
    lr: float = 0.5
    participation_ratio: float = 1.0
    local_epochs: int = 1
    batch_size: int = 0
    partition: str = "iid"


@dataclass(frozen=True)
class ZooSection:
    size: int = 20
    widths: tuple = (16, 32, 64)
    depth: int = 3
    epochs: int = 80
    lr: float = 0.01
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.size < 1 or self.depth < 0 or not self.widths or min(self.widths) < 1:
            raise ConfigError("[zoo] size and widths must be positive and depth non-negative (0 = linear members)")


@dataclass(frozen=True)
class DefenseSection:
    kind: str
    values: tuple = ()
    range: tuple = ()
    steps: int = 0
    scale: str = "log"
    clip_bound: float = 1.0
    defend_layer: int | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"[defense] unknown kind {self.kind!r}; choose from {DEFENSE_KINDS}")
        vals = tuple(float(v) for v in self.values)
        if self.range:
            if vals:
                raise ConfigError(f"[defense {self.kind}] give either 'values' or 'range', not both")
            if len(self.range) != 2 or self.steps < 1:
                raise ConfigError(f"[defense {self.kind}] 'range' needs two endpoints and steps >= 1")
            lo, hi = (float(r) for r in self.range)
            if self.scale == "log":
                if lo <= 0 or hi <= 0:
                    raise ConfigError(f"[defense {self.kind}] log-scale range must be positive")
                vals = tuple(float(v) for v in np.geomspace(lo, hi, self.steps))
            elif self.scale == "linear":
                vals = tuple(float(v) for v in np.linspace(lo, hi, self.steps))
            else:
                raise ConfigError(f"[defense {self.kind}] scale must be 'log' or 'linear'")
        if not vals:
            vals = (0.0,)
        lo, hi = PARAM_BOUNDS[self.kind]
        for v in vals:
            if not lo <= v <= hi:
                raise ConfigError(f"[defense {self.kind}] parameter {v} outside [{lo}, {hi}]")
        object.__setattr__(self, "values", vals)
        if not self.clip_bound > 0:
            raise ConfigError(f"[defense {self.kind}] clip_bound must be positive")

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass(frozen=True)
class AttackSection:
    adversaries: tuple = ("stru-nn", "unkwn-nn", "svm-rbf", "random-forest")
    attributes: tuple = ()  # attacked attributes; empty = the protected ones
    rounds: tuple = ()  # empty = {1, T/2, T}
    pool_window: int = 0  # 0 = automatic
    unknown_widths: tuple = (1024, 1024, 512, 128)
    epochs: int = 80
    lr: float = 0.01
    batch_size: int = 32
    forest_trees: int = 120
    svm_c: float = 1.0

    def __post_init__(self):
        from recupfl.attacks import ADVERSARY_KINDS

        for k in self.adversaries:
            if k not in ADVERSARY_KINDS:
                raise ConfigError(f"[attack] unknown adversary {k!r}")
        object.__setattr__(self, "adversaries", tuple(self.adversaries))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "rounds", tuple(int(r) for r in self.rounds))
        object.__setattr__(self, "unknown_widths", tuple(int(w) for w in self.unknown_widths))


@dataclass(frozen=True)
class RecupSection:
    iterations: int = 10
    sampled: int = 5
    attributes: tuple = ()  # ({id, gamma}, ...); empty = every dataset attribute, equal weight

    def __post_init__(self):
        attrs = []
        for a in self.attributes:
            if isinstance(a, dict):
                attrs.append((str(a["id"]), float(a.get("gamma", 1.0))))
            elif isinstance(a, str):
                attrs.append((a, 1.0))
            else:
                attrs.append((str(a[0]), float(a[1])))
        object.__setattr__(self, "attributes", tuple(attrs))
        if self.iterations < 1 or self.sampled < 2:
            raise ConfigError("[recup] needs iterations >= 1 and sampled >= 2")


@dataclass(frozen=True)
class ConvergenceSection:
    participation: tuple = (1.0,)
    epsilon: float = 0.01
    rounds: int = 0  # 0 = fl.rounds

    def __post_init__(self):
        object.__setattr__(self, "participation", tuple(float(p) for p in self.participation))


@dataclass(frozen=True)
class AblationSection:
    variants: tuple = ("one-step", "average", "iterative", "momentum")
    values: tuple = ()

    def __post_init__(self):
        from recupfl.defenses import VARIANTS

        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"[ablation] unknown variant {v!r}")
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class ZooStudySection:
    sizes: tuple = (5, 10, 15, 20)
    values: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class ReconstructionSection:
    input_dim: int = 16
    hidden: tuple = (16,)
    activation: str = "sigmoid"
    iterations: int = 2000
    lr: float = 0.1
    tv_weight: float = 1e-2
    epsilon: float = 0.01
    image_shape: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seeds: tuple = (0,)
    out: str = "out"
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    fl: FlSection = FlSection()
    zoo: ZooSection = ZooSection()
    defenses: tuple = ()
    attack: AttackSection = AttackSection()
    recup: RecupSection = RecupSection()
    convergence: ConvergenceSection = ConvergenceSection()
    ablation: AblationSection = AblationSection()
    zoo_study: ZooStudySection = ZooStudySection()
    reconstruction: ReconstructionSection = ReconstructionSection()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("[experiment] at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for r in self.attack.rounds:
            if not 1 <= r <= self.fl.rounds:
                raise ConfigError(f"[attack] evaluation round {r} outside 1..{self.fl.rounds}")
        if self.fl.num_clients > self.dataset.n_clients:
            raise ConfigError("[fl] more clients than client records")
        known = {a for a, _ in self.dataset.attributes} if self.dataset.kind == "synthetic" else None
        if known is not None:
            for a, _ in self.recup.attributes:
                if a not in known:
                    raise ConfigError(f"[recup] unknown attribute {a!r}")
            for a in self.attack.attributes:
                if a not in known:
                    raise ConfigError(f"[attack] unknown attribute {a!r}")

    @property
    def eval_rounds(self) -> tuple[int, ...]:
        if self.attack.rounds:
            return tuple(sorted(set(self.attack.rounds)))
        t = self.fl.rounds
        return tuple(sorted({1, max(1, t // 2), t}))

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "fl": FlSection,
    "zoo": ZooSection,
    "attack": AttackSection,
    "recup": RecupSection,
    "convergence": ConvergenceSection,
    "ablation": AblationSection,
    "zoo_study": ZooStudySection,
    "reconstruction": ReconstructionSection,
}


def config_from_dict(d: dict[str, Any]) -> ExperimentConfig:
    d = dict(d)
    exp = d.pop("experiment", {})
    unknown = set(exp) - {"name", "seeds", "out"}
    if unknown:
        raise ConfigError(f"[experiment] unknown keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = dict(exp)
    raw_def = d.pop("defense", [])
    if isinstance(raw_def, dict):
        raw_def = [raw_def]
    kwargs["defenses"] = tuple(_take(x, DefenseSection, "defense") for x in raw_def)
    for key, cls in SECTIONS.items():
        if key in d:
            kwargs[key] = _take(d.pop(key), cls, key)
    if d:
        raise ConfigError(f"unknown sections: {sorted(d)}")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(d)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``minimal.toml``)."""
    return Path(__file__).with_name("configs") / name
