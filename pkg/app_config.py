"""
App Configuration and Initialization
Handles environment defaults, experiment configuration files and logging setup.
"""

import os
import logging
from dataclasses import dataclass, field, fields, asdict, replace
from typing import List, Dict, Optional, Any

from dotenv import load_dotenv, dotenv_values

from modules.errors import ConfigError

# Load environment variables
load_dotenv()

DEFAULT_SEED = int(os.getenv("LOCPOL_SEED", "20240617"))
DEFAULT_OUT_DIR = os.getenv("LOCPOL_OUT_DIR", "results")
DEFAULT_WORKERS = int(os.getenv("LOCPOL_WORKERS", "1"))
DEFAULT_LOG_LEVEL = os.getenv("LOCPOL_LOG_LEVEL", "INFO")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
EXPERIMENT_KINDS = ("simulate", "construct", "compare", "train", "rates", "covering-bound")
LIST_FIELDS = ("n_grid", "gamma_grid")


# Configure root logging once
def configure_logging(level: Optional[str] = None):
    """Configure root logging with the lab's format."""
    logging.basicConfig(level=getattr(logging, (level or DEFAULT_LOG_LEVEL).upper(), logging.INFO),
                        format=LOG_FORMAT)


## Settings of one experiment run
@dataclass
class ExperimentConfig:
    """
    Every knob a CLI subcommand reads; precedence is flag > file > environment > default.
    """
    kind: str = "rates"
    n_grid: List[int] = field(default_factory=lambda: [128, 256, 512, 1024, 2048, 4096])
    d: int = 1
    alpha: float = 2.0
    M: float = 1.0
    noise_half_width: float = 0.5
    density_kind: str = "uniform"
    task_family: str = "fourier"
    fourier_budget: int = 8
    tasks: int = 200
    n_prompts: int = 200
    seed: int = DEFAULT_SEED
    out_dir: str = DEFAULT_OUT_DIR
    output_format: str = "csv"
    workers: int = DEFAULT_WORKERS
    T: Optional[int] = None
    T_cap: int = 5000
    L0: Optional[float] = None
    eta: Optional[float] = None
    calibration_prompts: int = 50
    nondegenerate_lambda: float = 1e-3
    gram_threshold: float = 0.01
    gamma: int = 2000
    gamma_grid: List[int] = field(default_factory=lambda: [100, 1000, 10000, 100000])
    block_constant: float = 2.0
    epochs: int = 50
    batch_size: int = 32
    step_size: float = 1e-3
    optimizer: str = "adam"
    warm_start: bool = True
    overwrite: bool = False

    def __post_init__(self):
        self.validate()

    # Check value ranges and the n grid
    def validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"Unsupported experiment kind: {self.kind}")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError(f"n_grid must be strictly increasing, got {self.n_grid}")
        if not self.n_grid or min(self.n_grid) < 1:
            raise ConfigError(f"n_grid must hold positive sizes, got {self.n_grid}")
        if self.d < 1 or self.alpha <= 0 or self.M <= 0:
            raise ConfigError(f"Need d >= 1, alpha > 0, M > 0, got d={self.d}, alpha={self.alpha}, M={self.M}")
        if self.output_format not in ("csv", "json"):
            raise ConfigError(f"Unsupported format: {self.output_format}")
        if self.density_kind not in ("uniform", "tilted") or self.task_family not in ("fourier", "constant", "polynomial"):
            raise ConfigError(f"Unsupported density {self.density_kind!r} or task family {self.task_family!r}")
        if self.optimizer not in ("adam", "gradient"):
            raise ConfigError(f"Unsupported optimizer: {self.optimizer}")
        if self.tasks < 2 or self.n_prompts < 1 or self.workers < 1:
            raise ConfigError(f"Need tasks >= 2, n_prompts >= 1, workers >= 1, got {self.tasks}, {self.n_prompts}, {self.workers}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _parse_value(name: str, raw: str, current: Any) -> Any:
    text = raw.strip()
    try:
        if name in LIST_FIELDS:
            return [int(part) for part in text.split(",") if part.strip()]
        if name in ("T", "L0", "eta") and text.lower() in ("", "none", "auto"):
            return None
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if name == "T":
            return int(text)
        if name in ("L0", "eta"):
            return float(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"Cannot parse {name} = {raw!r}: {e}") from e


# Load a key-value config file and apply overrides
def load_experiment_config(path: Optional[str] = None,
                           overrides: Optional[Dict[str, Any]] = None,
                           kind: Optional[str] = None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a `key = value` file plus CLI overrides.

    Args:
        path (str): Optional config file
        overrides (Dict[str, Any]): Already-typed values from CLI flags; None entries are ignored
        kind (str): Experiment kind forced by the subcommand

    Returns:
        ExperimentConfig: Validated configuration

    Raises:
        ConfigError: On a missing file, unknown key or unparsable value
    """
    config = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            name = key.strip().lower().replace("-", "_")
            if name not in known:
                raise ConfigError(f"Unknown config key: {key}")
            values[name] = _parse_value(name, raw or "", getattr(config, name))
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in known:
            raise ConfigError(f"Unknown config key: {name}")
        values[name] = value
    if kind is not None:
        values["kind"] = kind
    try:
        return replace(config, **values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
