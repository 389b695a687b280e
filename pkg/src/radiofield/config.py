"""Run configuration: one flat, dotted-key mapping covering data, sampler, encoding, network and trainer.

A config file (YAML or JSON) may use flat keys (``trainer.lr: 0.001``) or
nested mappings; both are flattened before validation.  Keys absent from
the file are taken from the selected preset, and unknown keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import GenerationConfig, Room
from .physics import ITU_MATERIALS, itu_material
from .sampling import DEFAULT_CONE_RATIO, SamplerConfig
from .trainer import AblationFlags, TrainerConfig


@dataclass(frozen=True)
class DataConfig:
    room: tuple[float, float, float] = (8.0, 5.0, 3.0)
    tx: tuple[float, float, float] = (2.0, 1.5, 1.8)
    material: str = "gypsum"
    fc: float = 2.4e9
    n: int = 3000
    seed: int = 0
    max_order: int = 3
    negatives: int = 10
    doa_noise_deg: float = 0.1
    negative_margin_deg: float = 1.0
    receiver_margin: float = 0.1
    min_relative_power_db: float | None = None

    def room_model(self) -> Room:
        if self.material not in ITU_MATERIALS:
            raise ValueError(f"unknown material {self.material!r}; known: {sorted(ITU_MATERIALS)}")
        return Room.uniform(self.room, itu_material(self.material, self.fc), self.fc)

    def generation(self) -> GenerationConfig:
        return GenerationConfig(max_order=self.max_order, n_negatives=self.negatives,
                                doa_noise_deg=self.doa_noise_deg, negative_margin_deg=self.negative_margin_deg,
                                receiver_margin=self.receiver_margin,
                                min_relative_power_db=self.min_relative_power_db)


@dataclass(frozen=True)
class EncodingSettings:
    d_min: float = 0.02
    levels: tuple[int, int, int] | None = None
    dir_levels: int = 5


@dataclass(frozen=True)
class NetworkSettings:
    trunk_layers: int = 8
    trunk_width: int = 128
    feature_width: int = 64
    head_layers: int = 2
    head_width: int = 128
    skip_at: int = 4

    def overrides(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    encoding: EncodingSettings = field(default_factory=EncodingSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    SECTIONS = ("data", "sampler", "encoding", "network", "trainer", "ablation")

    def to_flat(self) -> dict:
        flat = {}
        for section in self.SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                flat[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        return flat

    def with_updates(self, updates: dict) -> "RunConfig":
        """Apply flat dotted-key updates; unknown keys raise ``KeyError``."""
        grouped: dict[str, dict] = {}
        known = self.to_flat()
        for key, value in updates.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            section, name = key.split(".", 1)
            grouped.setdefault(section, {})[name] = _coerce(getattr(self, section), name, value)
        new = {s: replace(getattr(self, s), **kw) for s, kw in grouped.items()}
        return replace(self, **new)


def _coerce(obj, name, value):
    """Convert YAML scalars to the declared field type (``"float | None"`` etc.)."""
    kind = next(f.type for f in fields(obj) if f.name == name)
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if value is None:
        if "None" not in kind:
            raise TypeError(f"{name} may not be null")
        return None
    if kind.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"{name} expects a list, got {value!r}")
        return tuple(value)
    if kind.startswith("bool"):
        if not isinstance(value, bool):
            raise TypeError(f"{name} expects a boolean, got {value!r}")
        return value
    if isinstance(value, bool):
        raise TypeError(f"{name} does not accept a boolean")
    if isinstance(value, str) and kind.startswith(("int", "float")):
        # YAML 1.1 reads exponents without a sign ("2.4e9") as strings
        try:
            value = float(value)
        except ValueError:
            raise TypeError(f"{name} expects a number, got {value!r}") from None
    if kind.startswith("int"):
        if not isinstance(value, (int, float)) or float(value) != int(value):
            raise TypeError(f"{name} expects an integer, got {value!r}")
        return int(value)
    if kind.startswith("float"):
        if not isinstance(value, (int, float)):
            raise TypeError(f"{name} expects a number, got {value!r}")
        return float(value)
    return value


def flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


SCENE_A = RunConfig(
    data=DataConfig(room=(8.0, 5.0, 3.0), tx=(2.0, 1.5, 1.8), material="gypsum", fc=2.4e9, n=3000, negatives=10),
    sampler=SamplerConfig(m=128, t_near=1e-3, t_far=15.0, epsilon=0.01, cone_ratio=DEFAULT_CONE_RATIO),
    encoding=EncodingSettings(d_min=0.02, levels=(10, 10, 9)),
    trainer=TrainerConfig(lr=1e-3, clip=5e-3, block_size=3000),
)

SCENE_B = RunConfig(
    data=DataConfig(room=(25.0, 25.0, 5.0), tx=(6.0, 8.0, 2.5), material="gypsum", fc=5.8e9, n=6000, negatives=5),
    sampler=SamplerConfig(m=256, t_near=1e-3, t_far=30.0, epsilon=0.01, cone_ratio=DEFAULT_CONE_RATIO),
    encoding=EncodingSettings(d_min=0.02, levels=(12, 12, 10)),
    trainer=TrainerConfig(lr=7.5e-4, clip=5e-4, block_size=2000),
)

# Scene A shrunk to what a single CPU trains in minutes (see README).
DESK = SCENE_A.with_updates({
    "data.n": 500,
    "data.seed": 7,
    "data.min_relative_power_db": 25.0,
    "sampler.m": 64,
    "trainer.receivers_per_iter": 8,
    "trainer.block_size": 400,
    "trainer.warmup_iters": 200,
    "trainer.max_iters": 10000,
    "trainer.val_receivers": 50,
    "trainer.sigma_bias_init": -3.0,
})

PRESETS = {"scene-a": SCENE_A, "scene-b": SCENE_B, "desk": DESK}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(path=None, preset_name: str = "scene-a", overrides: dict | None = None) -> RunConfig:
    """Preset, then file contents, then explicit overrides (all flat dotted keys)."""
    cfg = preset(preset_name)
    if path is not None:
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            import yaml

            raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
        raw = flatten(raw)
        name = raw.pop("preset", None)
        if name is not None:
            cfg = preset(name)
        cfg = cfg.with_updates(raw)
    if overrides:
        cfg = cfg.with_updates(overrides)
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))


def config_keys() -> list[str]:
    return sorted(RunConfig().to_flat())


__all__ = ["DataConfig", "EncodingSettings", "NetworkSettings", "RunConfig", "PRESETS", "preset", "load_config",
           "dump_config", "config_keys", "flatten"]
