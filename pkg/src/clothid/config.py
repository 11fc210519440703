"""Pipeline configuration from a TOML document.

Grammar: a TOML file with the optional top-level key ``seed`` (master seed
for every random draw, default 0) and the optional sections below.  Keys
inside a section are the fields of the dataclass named next to it; any
other key is an error.

``[source]``
    :class:`clothid.datagen.SourceSpec` (``kind``, ``rows``, ``cols``,
    ``width``, ``height``, ``rho``, ``layout``, ``stiffness``, ``damping``,
    ``bending``, ``orientation``, ``gravity``, ``rayleigh_b``,
    ``mass_proportional_damping``, ``dt``, ``duration``, ``substeps``) with a
    ``[source.topology]`` subsection of lattice flags.
``[rollouts]``
    :class:`clothid.datagen.RolloutSpec` except ``seed``.
``[surrogate]``
    :class:`SurrogateConfig`; ``width``/``height`` default to the source's.
``[clipset]``
    :class:`ClipConfig`.
``[train]``
    :class:`clothid.train.TrainConfig` except ``seed``, with optional
    ``[train.stiffness_weights]`` and ``[train.damping_weights]`` holding
    :class:`clothid.losses.LossWeights` fields.
``[[colliders]]``
    Array of tables, each ``{type = "sphere", center = [..], radius = r}``
    or ``{type = "plane", point = [..], normal = [..]}``.
``[output]``
    :class:`OutputConfig`.

Omitted keys take the dataclass defaults.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

from .datagen import RolloutSpec, SourceSpec
from .lattice import GridSpec, TopologyFlags
from .losses import LossWeights
from .simcore import ColliderSet, Plane, Sphere
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class SurrogateConfig:
    rows: int = 12
    cols: int = 12
    width: float | None = None
    height: float | None = None
    topology: dict = field(default_factory=dict)

    def grid(self, source: SourceSpec) -> GridSpec:
        return GridSpec(self.rows, self.cols, self.width or source.width, self.height or source.height)

    @property
    def flags(self) -> TopologyFlags:
        return TopologyFlags(**self.topology)


@dataclass
class ClipConfig:
    T: int = 500
    keep_fraction: float = 0.06
    low_velocity_seconds: float = 1.0
    low_velocity_keep: float = 0.5


@dataclass
class OutputConfig:
    dir: str = "runs"
    log_level: str = "INFO"


@dataclass
class PipelineConfig:
    seed: int = 0
    source: SourceSpec = field(default_factory=SourceSpec)
    rollouts: RolloutSpec = field(default_factory=RolloutSpec)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    clipset: ClipConfig = field(default_factory=ClipConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    colliders: ColliderSet = field(default_factory=ColliderSet)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.rollouts.seed = self.seed
        self.train.seed = self.seed

    @property
    def grid(self) -> GridSpec:
        return self.surrogate.grid(self.source)

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in ("source", "rollouts", "surrogate", "clipset", "train", "output"):
            d[name] = asdict(getattr(self, name))
        d["colliders"] = colliders_to_list(self.colliders)
        return d


def _check_keys(section: str, data: dict, cls, exclude=()):
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _build(section: str, data, cls, exclude=()):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    _check_keys(section, data, cls, exclude)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def parse_colliders(items) -> ColliderSet:
    planes, spheres = [], []
    for i, item in enumerate(items):
        item = dict(item)
        kind = item.pop("type", None)
        try:
            if kind == "sphere":
                _check_keys(f"colliders.{i}", item, Sphere)
                spheres.append(Sphere(tuple(item["center"]), float(item["radius"])))
            elif kind == "plane":
                _check_keys(f"colliders.{i}", item, Plane)
                planes.append(Plane(tuple(item["point"]), tuple(item["normal"])))
            else:
                raise ConfigError(f"collider {i}: type must be 'sphere' or 'plane'")
        except KeyError as e:
            raise ConfigError(f"collider {i}: missing key {e}") from None
        except ValueError as e:
            raise ConfigError(f"collider {i}: {e}") from None
    return ColliderSet(tuple(planes), tuple(spheres))


def colliders_to_list(colliders: ColliderSet) -> list:
    out = [{"type": "plane", "point": list(p.point), "normal": list(p.normal)} for p in colliders.planes]
    out += [{"type": "sphere", "center": list(s.center), "radius": s.radius} for s in colliders.spheres]
    return out


def config_from_dict(d: dict) -> PipelineConfig:
    top = {"seed", "source", "rollouts", "surrogate", "clipset", "train", "colliders", "output"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    train = dict(d.get("train", {}))
    for key in ("stiffness_weights", "damping_weights"):
        if key in train:
            train[key] = _build(f"train.{key}", train[key], LossWeights)
    if "topology" in d.get("source", {}):
        _build("source.topology", d["source"]["topology"], TopologyFlags)
    if "topology" in d.get("surrogate", {}):
        _build("surrogate.topology", d["surrogate"]["topology"], TopologyFlags)
    return PipelineConfig(
        seed=seed,
        source=_build("source", d.get("source", {}), SourceSpec),
        rollouts=_build("rollouts", d.get("rollouts", {}), RolloutSpec, exclude=("seed",)),
        surrogate=_build("surrogate", d.get("surrogate", {}), SurrogateConfig),
        clipset=_build("clipset", d.get("clipset", {}), ClipConfig),
        train=_build("train", train, TrainConfig, exclude=("seed",)),
        colliders=parse_colliders(d.get("colliders", [])),
        output=_build("output", d.get("output", {}), OutputConfig))


def loads(text: str) -> PipelineConfig:
    try:
        return config_from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from None


def load(path) -> PipelineConfig:
    with open(path, "rb") as fh:
        try:
            return config_from_dict(tomllib.load(fh))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: not valid TOML: {e}") from None
