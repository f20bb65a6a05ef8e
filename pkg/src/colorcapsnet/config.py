# config.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

import json
import logging
import os
from typing import Any, Literal, Mapping

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from colorcapsnet.capsnet import ColorCapsNetConfig
from colorcapsnet.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Load values from .env file so COLORCAPS_* variables are visible below
load_dotenv()

ENV_PREFIX = "COLORCAPS_"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def set_logging_level(level: str) -> None:
    """Sets the logging level for the root logger.
    Args:
        level (str): The desired logging level (e.g., 'DEBUG', 'INFO', 'WARNING', 'ERROR').
    """
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {level}')
    logging.getLogger().setLevel(numeric_level)
    logger.info(f"Root logging level set to {level.upper()}")


class RunConfig(BaseModel):
    """Everything a command needs: network topology plus the training run.

    Defaults are the published settings (n=9, r=1, C=6, Adam 0.001/0.9/0.999,
    MSE loss, 50 epochs).
    """
    model_config = ConfigDict(extra="forbid")

    # network
    patch_size: int = 9
    routing_iterations: int = 1
    num_output_capsules: int = 6
    output_capsule_dim: int = 16
    primary_capsule_count: int = 32
    primary_capsule_dim: int = 8
    decoder_hidden: tuple[int, ...] = (512, 1024)
    loss: Literal["mse", "margin"] = "mse"
    margin_lambda: float = 0.5
    reconstruction_weight: float = 0.0005
    feature_detector: Literal["vgg", "capsnet"] = "vgg"
    feature_channels: int | None = None
    batchnorm: bool = True

    # run
    epochs: int = 50
    batch_size: int = 64
    seed: int = 42
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    manifest: str | None = None
    out_dir: str = "checkpoints"
    resume: str | None = None
    vgg_weights: str | None = None
    timing: bool = False
    log_level: str = "WARNING"

    @field_validator("epochs", "seed")
    @classmethod
    def _non_negative_int(cls, value: int) -> int:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @field_validator("batch_size")
    @classmethod
    def _positive_batch(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"batch_size must be >= 1, got {value}")
        return value

    @field_validator("lr", "adam_eps")
    @classmethod
    def _non_negative_float(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @field_validator("beta1", "beta2")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError(f"must lie in (0, 1), got {value}")
        return value

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        if not isinstance(getattr(logging, value.upper(), None), int):
            raise ValueError(f"unknown log level '{value}'")
        return value.upper()

    def network(self) -> ColorCapsNetConfig:
        """The ColorCapsNetConfig slice of this run."""
        try:
            return ColorCapsNetConfig(**self.model_dump(include=set(ColorCapsNetConfig.model_fields)))
        except ValidationError as e:
            raise ConfigurationError(f"invalid network configuration: {e}")


def _env_value(raw: str) -> Any:
    # JSON first so lists, numbers and booleans arrive typed
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    overrides = {}
    for field in RunConfig.model_fields:
        raw = environ.get(ENV_PREFIX + field.upper())
        if raw is not None:
            overrides[field] = _env_value(raw)
    return overrides


def load_config_file(path: str) -> dict[str, Any]:
    try:
        with open(path, 'r') as f:
            values = json.load(f)
        logger.info(f"Loaded run configuration from {path}")
    except FileNotFoundError:
        logger.error(f"Config file not found at: {path}")
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        logger.error(f"Error decoding JSON from {path}: {e}")
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(values, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return values


def resolve_run_config(flags: Mapping[str, Any] | None = None, config_file: str | None = None,
                       environ: Mapping[str, str] | None = None) -> RunConfig:
    """Layers defaults < COLORCAPS_* environment < JSON config file < explicit flags."""
    values: dict[str, Any] = {}
    values.update(env_overrides(environ))
    if config_file:
        values.update(load_config_file(config_file))
    values.update({key: value for key, value in (flags or {}).items() if value is not None})
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        logger.error(f"Invalid run configuration: {e}")
        raise ConfigurationError(f"invalid run configuration: {e}")
    config.network()
    return config
