"""
Experiment configuration: dataclasses with validated defaults, a flat
``key = value`` file format, and the mode rules that turn a requested
configuration into the one that actually runs.
"""

import dataclasses
import enum
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class Strategy(str, enum.Enum):
    AUTO = "auto"
    NONE = "none"
    AVERAGE = "average"
    NN = "nn"


class Mode(str, enum.Enum):
    DISTRANS = "distrans"
    FEDAVG = "fedavg"
    SINGLE_CHANNEL = "single_channel"


class SweepAxis(str, enum.Enum):
    ALPHA = "alpha"
    EPOCHS = "epochs"
    STRATEGY = "strategy"
    CHANNELS = "channels"
    CLASSES_PER_CLIENT = "classes_per_client"
    CLIENTS = "clients"


@dataclass(frozen=True)
class SgdConfig:
    """
    Step sizes for the model (eta) and offset (eta_t) updates, plus the
    minibatch size. A zero learning rate freezes the corresponding quantity.
    """

    learning_rate_model: float = 5e-3
    learning_rate_offset: float = 1e-3
    batch_size: int = 8

    def __post_init__(self):
        if self.learning_rate_model < 0 or self.learning_rate_offset < 0:
            raise ConfigurationError("learning rates must not be negative")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic dataset
    num_classes: int = 8
    per_class: int = 100
    dim: int = 128
    spread: float = 0.001
    train_fraction: float = 0.5
    partition_path: Optional[str] = None
    # protocol
    num_clients: int = 8
    classes_per_client: int = 1
    rounds: int = 50
    epochs: int = 1
    batch_size: int = 8
    alpha: float = 0.3
    lr_model: float = 5e-3
    lr_offset: float = 1e-3
    strategy: Strategy = Strategy.AUTO
    mode: Mode = Mode.DISTRANS
    dh_threshold: float = 0.5
    seed: int = 1
    # model shapes
    hidden: Tuple[int, ...] = (128,)
    dense_width: int = 128
    # offset aggregator
    aggregator_hidden: int = 64
    aggregator_lr: float = 1e-2
    aggregator_steps: int = 200
    aggregator_warm_start: bool = True
    # evaluation and output
    negative_eval: bool = False
    workers: int = 1
    step_log: bool = False
    debug: bool = False
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.num_clients < 1:
            raise ConfigurationError(
                f"num_clients must be >= 1, got {self.num_clients}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(
                f"num_classes must be >= 2, got {self.num_classes}"
            )
        if not 1 <= self.classes_per_client <= self.num_classes:
            raise ConfigurationError(
                f"classes_per_client must lie in [1, {self.num_classes}], "
                f"got {self.classes_per_client}"
            )
        covered = self.num_clients * self.classes_per_client
        if self.partition_path is None and covered < self.num_classes:
            raise ConfigurationError(
                f"{self.num_clients} clients x {self.classes_per_client} classes "
                f"cannot cover {self.num_classes} classes"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dh_threshold <= 1.0:
            raise ConfigurationError(
                f"dh_threshold must lie in [0, 1], got {self.dh_threshold}"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        if self.per_class < 2:
            raise ConfigurationError(
                "per_class must be >= 2 so every class can be split"
            )
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.aggregator_steps < 1:
            raise ConfigurationError("aggregator_steps must be >= 1")
        if not self.hidden or any(width < 1 for width in self.hidden):
            raise ConfigurationError(
                f"hidden widths must be positive, got {self.hidden}"
            )
        SgdConfig(self.lr_model, self.lr_offset, self.batch_size)

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr_model, self.lr_offset, self.batch_size)

    @property
    def channels(self) -> int:
        return 1 if self.mode == Mode.SINGLE_CHANNEL else 2

    @property
    def metrics_path(self) -> Optional[str]:
        return self._output_file("metrics.csv")

    @property
    def server_log_path(self) -> Optional[str]:
        return self._output_file("server.csv")

    @property
    def steps_path(self) -> Optional[str]:
        return self._output_file("steps.csv")

    @property
    def partition_export_path(self) -> Optional[str]:
        return self._output_file("partition.json")

    @property
    def checkpoint_dir(self) -> Optional[str]:
        return self._output_file("checkpoint")

    @property
    def debug_dir(self) -> Optional[str]:
        return self._output_file("debug")

    def _output_file(self, name):
        if self.output_dir is None:
            return None
        return os.path.join(os.path.expanduser(self.output_dir), name)

    def resolved(self) -> "ExperimentConfig":
        """
        Apply the mode rules: FedAvg runs the double-channel net with alpha=0,
        zero offsets and no offset aggregation.
        """
        if self.mode != Mode.FEDAVG:
            return self
        if self.alpha != 0.0:
            logger.warning(f"mode fedavg forces alpha=0 (was {self.alpha})")
        if self.strategy != Strategy.NONE:
            logger.warning(
                f"mode fedavg forces strategy none (was {self.strategy.value})"
            )
        return dataclasses.replace(self, alpha=0.0, strategy=Strategy.NONE)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        """
        Build a config from string (or already typed) values keyed by field name.
        """
        parsers = _field_parsers()
        kwargs = {}
        for key, value in values.items():
            name = key.strip().replace("-", "_")
            if name not in parsers:
                raise ConfigurationError(f"unknown configuration key '{key}'")
            try:
                kwargs[name] = parsers[name](value)
            except (TypeError, ValueError) as ex:
                raise ConfigurationError(
                    f"bad value for '{key}': {value!r} ({ex})"
                ) from None
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, str]:
        mapping = {}
        for f in dataclasses.fields(self):
            mapping[f.name] = _format_value(getattr(self, f.name))
        return mapping


def load_config_file(path: str) -> Dict[str, str]:
    """
    Read a flat ``key = value`` file. ``#`` starts a comment; blank lines are
    skipped. Values stay strings; ``ExperimentConfig.from_mapping`` types them.
    """
    path = os.path.expanduser(path)
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file {path} not found")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigurationError(f"{path}:{number}: missing key")
            values[key] = value
    return values


def write_config_file(path: str, config: ExperimentConfig):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in config.to_mapping().items():
            f.write(f"{key} = {value}\n")


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "yes", "1", "on"):
        return True
    if text in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_int_tuple(value) -> Tuple[int, ...]:
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    return tuple(int(part) for part in str(value).split(",") if part.strip())


def _optional_str(value) -> Optional[str]:
    if value is None:
        return None
    text = str(value).strip()
    return text or None


def _field_parsers() -> Dict[str, Callable[[Any], Any]]:
    parsers = {}
    for f in dataclasses.fields(ExperimentConfig):
        default = f.default
        if isinstance(default, bool):
            parsers[f.name] = parse_bool
        elif isinstance(default, enum.Enum):
            parsers[f.name] = type(default)
        elif isinstance(default, tuple):
            parsers[f.name] = parse_int_tuple
        elif isinstance(default, int):
            parsers[f.name] = int
        elif isinstance(default, float):
            parsers[f.name] = float
        else:
            parsers[f.name] = _optional_str
    return parsers


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)
