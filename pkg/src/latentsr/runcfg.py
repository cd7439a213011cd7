"""Strict JSON run configuration.

One file covers model, degradation, training, schedule, and tiling knobs
plus the root seed and paths. Unknown keys are rejected at every level so
sweep typos fail loudly, and every run directory stores the resolved
snapshot it actually used.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .degradation import DegradationParams
from .errors import ConfigError
from .models import PRESETS, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class TilingParams:
    patch: int = 128
    overlap_fraction: float = 0.25


@dataclass(frozen=True)
class DataParams:
    count: int = 512
    val_count: int = 64
    size: tuple = (128, 128)
    image_format: str = "png"


def _build_strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    coerced = dict(d)
    for f in fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    preset: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    degradation: DegradationParams = field(default_factory=DegradationParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingParams = field(default_factory=TilingParams)
    data: DataParams = field(default_factory=DataParams)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        preset = d.get("preset")
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r} "
                              f"(have {sorted(PRESETS)})")
        if preset is not None and "model" in d:
            raise ConfigError("give either 'preset' or 'model', not both")
        model = PRESETS[preset] if preset is not None \
            else _build_strict(ModelConfig, d.get("model", {}), "model")
        return cls(
            seed=int(d.get("seed", 0)),
            preset=preset,
            model=model,
            degradation=_build_strict(DegradationParams,
                                      d.get("degradation", {}), "degradation"),
            train=_build_strict(TrainConfig, d.get("train", {}), "train"),
            tiling=_build_strict(TilingParams, d.get("tiling", {}), "tiling"),
            data=_build_strict(DataParams, d.get("data", {}), "data"),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "degradation": asdict(self.degradation),
            "train": asdict(self.train),
            "tiling": asdict(self.tiling),
            "data": asdict(self.data),
        }
        if self.preset is not None:
            d["preset"] = self.preset
        return d

    def snapshot(self, run_dir) -> Path:
        """Write the resolved config into the run directory."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        out = run_dir / "config_snapshot.json"
        out.write_text(json.dumps(self.to_dict(), indent=1, default=list))
        return out
