"""Run configuration: every threshold of the mapping pipeline, loaded from TOML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import toml

from .association import AssociationConfig
from .change_state import LikelihoodConfig
from .geometry import ClassTable, DEFAULT_CLASSES, GeometryConfig, IcpConfig, SemanticClass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TsdfConfig:
    voxel_size: float = 0.05
    truncation: float = 0.2
    lambda_diff: float | None = None  # None -> 1 / voxel_size
    export_band: float = 0.05
    export_weight: float = 0.0
    # map samples deeper than this behind the surface are dropped; keeping it past the
    # export band stops noise-tail samples alone from exporting interior voxels
    behind_cutoff: float = 0.075

    def __post_init__(self):
        if self.voxel_size <= 0 or self.truncation < self.voxel_size:
            raise ConfigError("need voxel_size > 0 and truncation >= voxel_size")
        if self.export_band <= 0:
            raise ConfigError("export_band must be positive")
        if self.behind_cutoff <= 0:
            raise ConfigError("behind_cutoff must be positive")

    @property
    def change_scale(self) -> float:
        return 1.0 / self.voxel_size if self.lambda_diff is None else self.lambda_diff


@dataclass(frozen=True)
class ObjectConfig:
    visibility_cell: int = 4  # pixel block used for the object z-buffer
    visibility_margin: float = 0.1
    min_local_points: int = 10
    min_spawn_points: int = 300  # smaller unmatched clusters are slivers at the image border


@dataclass(frozen=True)
class PipelineConfig:
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    objects: ObjectConfig = field(default_factory=ObjectConfig)
    classes: tuple = DEFAULT_CLASSES

    @property
    def class_table(self) -> ClassTable:
        return ClassTable(self.classes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "classes":
                out["classes"] = [dataclasses.asdict(c) for c in value]
            else:
                out[f.name] = {k: v for k, v in dataclasses.asdict(value).items() if v is not None}
        return out


_SECTIONS = {
    "tsdf": TsdfConfig,
    "geometry": GeometryConfig,
    "icp": IcpConfig,
    "association": AssociationConfig,
    "likelihood": LikelihoodConfig,
    "objects": ObjectConfig,
}


def config_from_dict(data: dict, source: str = "<dict>") -> PipelineConfig:
    kwargs = {}
    for key, value in data.items():
        if key == "classes":
            try:
                kwargs["classes"] = tuple(SemanticClass(int(c["id"]), str(c["name"]), int(c["stationary"]),
                                                        float(c["v_class"])) for c in value)
                ClassTable(kwargs["classes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad [[classes]] entry: {exc}") from None
            continue
        cls = _SECTIONS.get(key)
        if cls is None:
            raise ConfigError(f"{source}: unknown section [{key}]")
        if not isinstance(value, dict):
            raise ConfigError(f"{source}: [{key}] must be a table")
        names = {f.name for f in dataclasses.fields(cls)}
        for k in value:
            if k not in names:
                raise ConfigError(f"{source}: unknown key {key}.{k}")
        try:
            kwargs[key] = cls(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid [{key}]: {exc}") from None
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    try:
        data = toml.load(str(path))
    except (OSError, toml.TomlDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, str(path))


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        toml.dump(cfg.to_dict(), fh)
