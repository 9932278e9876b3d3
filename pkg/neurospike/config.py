from enum import Enum
from pathlib import Path
from typing import Optional, Type, TypeVar

import toml
from pydantic import BaseModel, Field

from neurospike.utils import find_file_same_dir, info

SWEEP_THRESHOLDS = (0.05, 0.25, 0.375, 0.5, 0.625, 0.75, 1.0)
SEED_ENVVAR = "NEUROSPIKE_SEED"


class ModelName(str, Enum):
    csnn = "csnn"
    cnn = "cnn"
    gcn = "gcn"
    gcs = "gcs"
    gin = "gin"


class Subcommand(str, Enum):
    synth = "synth"
    preprocess = "preprocess"
    encode = "encode"
    train = "train"
    compare = "compare"
    sweep = "sweep"
    inspect = "inspect"


class TrainConfig(BaseModel):
    max_epochs: int = Field(1000, gt=0)
    patience: int = Field(50, gt=0)
    batch_size: int = Field(8, gt=0)
    lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    folds: int = Field(10, ge=2)
    seed: int = Field(0, ge=0)
    min_delta: float = Field(1e-6, ge=0)
    # CSNN constants
    steps: int = Field(25, gt=0)
    beta: float = Field(0.5, gt=0, le=1)
    threshold: float = Field(0.5, gt=0)
    slope: float = Field(0.25, gt=0)
    filters: tuple[int, int] = (12, 64)
    paired: bool = False
    jobs: int = Field(1, gt=0)


class PipelineConfig(BaseModel):
    low_hz: float = Field(0.1, gt=0)
    high_hz: float = Field(1.0, gt=0)
    transition_hz: float = Field(0.1, gt=0)
    amplitude_limit_uv: float = Field(100.0, gt=0)
    bad_fraction: float = Field(0.1, gt=0, le=1)
    max_bad_channels: int = Field(10, ge=0)
    flat_seconds: float = Field(5.0, gt=0)
    flat_tolerance_uv: float = Field(1e-6, gt=0)
    target_length: int = Field(1848, gt=0)


class QualityConfig(BaseModel):
    line_noise_weight_uv: float = Field(100.0, gt=0)
    main_noise_weight_uv: float = Field(250.0, gt=0)
    # 280 mV
    offset_weight_uv: float = Field(280_000.0, gt=0)
    window_seconds: float = Field(2.0, gt=0)
    line_band_hz: tuple[float, float] = (55.0, 65.0)
    main_band_hz: tuple[float, float] = (1.0, 40.0)


class SynthConfig(BaseModel):
    n_trials: int = Field(240, gt=0)
    noise_std: float = Field(10.0, gt=0)
    ramp_amplitude: float = Field(30.0, ge=0)
    fs: float = Field(500.0, gt=0)
    lead_in_seconds: float = Field(40.0, gt=0)
    spacing_seconds: float = Field(1.0, gt=0)
    reaction_seconds: float = Field(0.25, ge=0)
    participants: int = Field(1, gt=0)
    seed: int = Field(0, ge=0)


class CliConfig(BaseModel):
    subcommand: Subcommand
    input: Optional[Path] = None
    output: Optional[Path] = None
    models: list[ModelName] = []
    thresholds: list[float] = []
    threshold: Optional[float] = None
    train: Optional[TrainConfig] = None
    pipeline: Optional[PipelineConfig] = None
    quality: Optional[QualityConfig] = None
    synth: Optional[SynthConfig] = None


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def load_config(path: Optional[Path] = None, start_path: Path = Path(".")):
    """
    Load the neurospike configuration table from a TOML file.

    :param path: An explicit TOML file. Without it, a 'pyproject.toml'
        in ``start_path`` is used if there is one.
    :param start_path: Directory searched when no path is given.
    :return: The configuration mapping (empty when nothing was found).
    """
    if path is None:
        path = find_file_same_dir("pyproject.toml", start_path)
        if path is None:
            return {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as file:
        config_data = toml.load(file)
    if "tool" in config_data:
        config_data = config_data["tool"].get("neurospike", {})
    if config_data:
        info(f"Using the configuration from '{path}'")
    return config_data


def resolve_config(
    model: Type[ConfigT], file_config: dict, section: str, **flags
) -> ConfigT:
    """
    Build a config model with precedence flags > config file > defaults.

    :param model: The pydantic model to build.
    :param file_config: The table returned by :func:`load_config`.
    :param section: Sub-table of the file holding this model's keys.
    :param flags: Command-line values; ``None`` means "not given".
    """
    values = {
        key: value
        for key, value in file_config.items()
        if key in model.model_fields and not isinstance(value, dict)
    }
    values.update({
        key: value
        for key, value in file_config.get(section, {}).items()
        if key in model.model_fields
    })
    values.update({
        key: value for key, value in flags.items() if value is not None
    })
    return model(**values)
