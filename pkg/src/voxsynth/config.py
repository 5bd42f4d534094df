"""Run configuration: one JSON document that pins every choice a run makes.

Defaults follow the full-scale recipe (large region patches, long epoch
budgets); desk-scale runs override downward through the same schema. A
config always serializes with its schema version so stale documents are
rejected instead of silently reinterpreted.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .network import NetworkSpec
from .training import TrainConfig

SCHEMA_VERSION = 1

TASK_NAMES = {1: "mr2ct", 2: "cbct2ct"}
REGIONS = ("HN", "AB", "TH")
ARCHS = ("unet", "resunet")
UPSAMPLES = {"tconv": "transposed_conv", "trilinear": "conv_trilinear"}
LOSSES = ("l1", "l1afp")

PATCH_PRESETS = {
    ("HN", 1): (56, 192, 192),
    ("HN", 2): (56, 192, 192),
    ("AB", 1): (48, 192, 224),
    ("TH", 1): (48, 192, 224),
    ("AB", 2): (40, 224, 224),
    ("TH", 2): (40, 224, 224),
}


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending key path."""


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    task: int = 1
    region: str = "HN"
    arch: str = "resunet"
    upsample: str = "tconv"
    loss: str = "l1"
    patch_dims: tuple = None
    levels: int = 3
    base_channels: int = 8
    channel_cap: int = 64
    lambda_l1: float = 5.0
    tap_indices: tuple = None
    step_fraction: float = 0.3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}"
            )
        if self.task not in TASK_NAMES:
            raise ConfigError(f"task: must be 1 or 2, got {self.task!r}")
        if self.region not in REGIONS:
            raise ConfigError(f"region: must be one of {REGIONS}, got {self.region!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: must be one of {ARCHS}, got {self.arch!r}")
        if self.upsample not in UPSAMPLES:
            raise ConfigError(
                f"upsample: must be one of {tuple(UPSAMPLES)}, got {self.upsample!r}"
            )
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: must be one of {LOSSES}, got {self.loss!r}")
        if self.patch_dims is not None:
            self.patch_dims = tuple(int(d) for d in self.patch_dims)
            if len(self.patch_dims) != 3 or min(self.patch_dims) < 1:
                raise ConfigError(f"patch_dims: need 3 positive ints, got {self.patch_dims}")
        if self.tap_indices is not None:
            self.tap_indices = tuple(int(i) for i in self.tap_indices)
        if not 0.0 < self.step_fraction <= 1.0:
            raise ConfigError(f"step_fraction: must be in (0, 1], got {self.step_fraction}")

    @property
    def task_name(self):
        return TASK_NAMES[self.task]

    def resolved_patch(self):
        if self.patch_dims is not None:
            return self.patch_dims
        return PATCH_PRESETS[(self.region, self.task)]

    def network_spec(self, head="regression_1ch"):
        return NetworkSpec(
            levels=self.levels,
            base_channels=self.base_channels,
            channel_cap=self.channel_cap,
            block="residual" if self.arch == "resunet" else "plain",
            upsample=UPSAMPLES[self.upsample],
            head=head,
        )

    def to_dict(self):
        d = asdict(self)
        d["patch_dims"] = list(self.patch_dims) if self.patch_dims else None
        d["tap_indices"] = list(self.tap_indices) if self.tap_indices else None
        return d


def _check_keys(doc, allowed, prefix=""):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}: unknown key")


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    run_fields = {f.name for f in fields(RunConfig)}
    _check_keys(doc, run_fields)
    kwargs = dict(doc)
    train_doc = kwargs.pop("train", {})
    if not isinstance(train_doc, dict):
        raise ConfigError("train: must be an object")
    train_fields = {f.name for f in fields(TrainConfig)}
    _check_keys(train_doc, train_fields, prefix="train.")
    try:
        train = TrainConfig(**train_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e
    try:
        return RunConfig(train=train, **kwargs)
    except TypeError as e:
        raise ConfigError(f"config: {e}") from e


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {path} is not valid JSON ({e})") from e
    return from_dict(doc)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
