import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from loguru import logger

from src.errors import ConfigError
from src.ladder import DEFAULT_LADDER, validate_ladder

SYSTEM_KINDS = {"model", "loop", "threebody", "kepler"}
COMMANDS = ("model_bvp", "threebody", "shadow")

DEFAULTS = {
    "tolerances": {"integrator": 1e-12, "bvp": 1e-10, "newton": 1e-8},
    "cone": {"nu": 0.3, "kappa": 0.3},
    "chart": {"radius": 0.1, "order": 3, "half_width": 0.5},
    "tail_cut": 12.0,
    "shear": {"retries": 8, "scale": 0.1},
    "mu_ladder": list(DEFAULT_LADDER),
    "workers": 1,
    "seed": 0,
    "output_dir": "results",
    "model_bvp": {
        "system": {"kind": "model", "dims": {"m": 1, "k": 1}, "lambda": 1.0, "cubic": []},
        "z0": [0.0, 0.0], "q_plus": [0.1], "p_minus": [-0.1],
        "T_values": [5.0, 7.0, 9.0, 11.0],
    },
    "threebody": {
        "system": {"kind": "threebody", "params": {"alpha1": 0.5, "alpha2": 0.5, "mu_mass": 0.0, "energy": 0.0}},
        "points": [{"x": [1.0, 0.0], "y": [0.0, 0.0]}],
        "random_points": 20,
        "pullback_samples": 20,
    },
    "shadow": {
        "system": {"kind": "loop", "dims": {"m": 1, "k": 1}, "lambda0": 1.0, "twist": 1.0, "amplitude": 1.0,
                   "skew": 0.0},
        "chain_file": None,
        "discrete": False,
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ExperimentConfig:
    """Validated run configuration; ``raw`` keeps the merged mapping for hashing and per-command blocks."""

    raw: dict
    source: str | None = None
    overrides: dict = field(default_factory=dict)

    @property
    def tolerances(self) -> dict:
        return self.raw["tolerances"]

    @property
    def cone(self) -> dict:
        return self.raw["cone"]

    @property
    def chart(self) -> dict:
        return self.raw["chart"]

    @property
    def mu_ladder(self) -> list[float]:
        return [float(mu) for mu in self.raw["mu_ladder"]]

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def command(self, name: str) -> dict:
        return self.raw[name]

    def validate(self) -> "ExperimentConfig":
        validate_ladder(self.raw["mu_ladder"])
        if self.workers < 0:
            raise ConfigError(f"workers must be non-negative, got {self.workers}")
        for name, value in self.tolerances.items():
            if not 1e-14 <= float(value) <= 1e-6:
                raise ConfigError(f"Tolerance {name}={value} outside [1e-14, 1e-6]")
        if float(self.chart["radius"]) <= 0:
            raise ConfigError("Chart radius must be positive")
        for name in COMMANDS:
            kind = self.raw[name]["system"].get("kind")
            if kind not in SYSTEM_KINDS:
                raise ConfigError(f"Unknown system kind {kind!r} in section {name}")
        chain_file = self.raw["shadow"].get("chain_file")
        if chain_file and not Path(chain_file).exists():
            raise ConfigError(f"Chain file {chain_file} does not exist")
        return self


class ConfigLoader:
    def __init__(self):
        self.supported_formats = {".yaml", ".yml"}

    def validate_file(self, file_path: str) -> bool:
        """Validate that the config file exists and is YAML."""
        file = Path(file_path)
        if not file.exists():
            raise FileNotFoundError(f"File {file_path} does not exist.")
        if file.suffix not in self.supported_formats:
            raise ConfigError(f"Unsupported config format. Supported: {sorted(self.supported_formats)}")
        return True

    def load(self, file_path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
        """Read YAML, merge over the defaults, apply command-line overrides and validate."""
        data = {}
        if file_path is not None:
            self.validate_file(file_path)
            logger.info(f"Loading config: {file_path}")
            try:
                data = yaml.safe_load(Path(file_path).read_text()) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Config {file_path} is not valid YAML: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError(f"Config {file_path} must hold a mapping at the top level")
        merged = deep_merge(DEFAULTS, data)
        clean = {key: value for key, value in (overrides or {}).items() if value is not None}
        merged = deep_merge(merged, clean)
        return ExperimentConfig(merged, None if file_path is None else str(file_path), clean).validate()
