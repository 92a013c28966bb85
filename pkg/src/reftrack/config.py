"""Run configuration file handling.

The config file is JSON with three sections:

  "train":     every TrainConfig key (all required; flags may override)
  "augment":   drop_prob, noise_sigma, swap_prob (optional, defaults apply)
  "objective": lambda, delta, alpha_sharp, gamma_focal, alpha_focal
               (optional, defaults apply)

Validation is exhaustive: every schema violation is reported in one error.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

from .losses import ObjectiveConfig
from .sampling import AugmentConfig
from .training import TrainConfig

# objective keys use the loss formula's own names in the file
_OBJECTIVE_KEYS = {
    "lambda": "barrier_weight",
    "delta": "safe_margin",
    "alpha_sharp": "sharpness",
    "gamma_focal": "gamma_focal",
    "alpha_focal": "alpha_focal",
}
_AUGMENT_KEYS = ("drop_prob", "noise_sigma", "swap_prob")


class ConfigError(ValueError):
    """All schema violations of a config file, joined into one message."""


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    augment: AugmentConfig
    objective: ObjectiveConfig


def default_run_config() -> RunConfig:
    return RunConfig(train=TrainConfig(), augment=AugmentConfig(), objective=ObjectiveConfig())


def _train_field_names() -> List[str]:
    return [f.name for f in dataclasses.fields(TrainConfig)]


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    problems: List[str] = []
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")

    train_raw = data.get("train")
    if train_raw is None:
        problems.append("missing section 'train'")
        train_raw = {}
    known = set(_train_field_names())
    for key in known:
        if key not in train_raw:
            problems.append(f"train: missing key '{key}'")
    for key in train_raw:
        if key not in known:
            problems.append(f"train: unknown key '{key}'")

    augment_raw = data.get("augment", {})
    for key in augment_raw:
        if key not in _AUGMENT_KEYS:
            problems.append(f"augment: unknown key '{key}'")

    objective_raw = data.get("objective", {})
    for key in objective_raw:
        if key not in _OBJECTIVE_KEYS:
            problems.append(f"objective: unknown key '{key}'")

    for key in data:
        if key not in ("train", "augment", "objective"):
            problems.append(f"unknown section '{key}'")
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(sorted(problems)))

    train_kwargs = dict(train_raw)
    if "image_size" in train_kwargs:
        train_kwargs["image_size"] = tuple(train_kwargs["image_size"])
    train = TrainConfig(**train_kwargs)
    augment = AugmentConfig(**{k: augment_raw[k] for k in augment_raw})
    objective = ObjectiveConfig(
        **{_OBJECTIVE_KEYS[k]: v for k, v in objective_raw.items()}
    )
    return RunConfig(train=train, augment=augment, objective=objective)


def save_run_config(path, cfg: RunConfig) -> None:
    data = {
        "train": dataclasses.asdict(cfg.train),
        "augment": {k: getattr(cfg.augment, k) for k in _AUGMENT_KEYS},
        "objective": {k: getattr(cfg.objective, attr) for k, attr in _OBJECTIVE_KEYS.items()},
    }
    Path(path).write_text(json.dumps(data, indent=1))
