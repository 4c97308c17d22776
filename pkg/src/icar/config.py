"""Run configuration: TOML file + flag overrides over package defaults.

Precedence is flag > file > default. Every key is declared below; anything
else in a config file is rejected by name so typos cannot silently fall
back to defaults. One root seed feeds the whole pipeline — subcomponents
get streams derived from it by stable labels.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys

from icar.complexity.train import ComplexityTrainConfig
from icar.costmodel import CostParams, ProjectionParams
from icar.encoders.text import TextEncoderConfig
from icar.encoders.vit import VisionEncoderConfig
from icar.errors import ConfigError
from icar.training.loss import DualPathConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on older interpreters
    import tomli as tomllib

#: every legal key with its default; data.seed of None means "derive from
#: the root seed"
DEFAULTS = {
    "seed": 0,
    "data": {
        "seed": None,
        "size": 3000,
        "image_size": 32,
        "max_objects": 6,
    },
    "complexity": {
        "head": "binary",
        "threshold": 0.5,
        "epochs": 12,
        "batch_size": 32,
        "lr": 3e-3,
        "weight_decay": 0.01,
    },
    "model": {
        "image_size": 32,
        "patch_size": 4,
        "depth": 12,
        "width": 64,
        "heads": 4,
        "embed_dim": 32,
        "exit_layers": [4, 6, 8, 10, 12],
        "text_depth": 4,
        "text_width": 64,
        "text_heads": 4,
        "text_max_len": 32,
    },
    "training": {
        "alpha": 0.5,
        "temperature": 0.07,
        "batch_size": 32,
        "epochs": 10,
        "lr_backbone": 1e-4,
        "lr_heads": 1e-3,
        "weight_decay": 0.01,
        "exit_rule": "routed",
        "exit_layer": 4,
        "threshold": 0.5,
    },
    "eval": {
        "recall_ks": [1, 5, 10],
        "map_ks": [5, 10, 25],
    },
    "cost": {
        "vision_total_gflops": 162.03,
        "vision_layers": 24,
        "text_gflops": 13.3,
        "routing_gflops": 2.45,
        "p_simple": 0.495,
        "p_complex": 0.505,
        "daily_images": 6e9,
        "throughput_img_per_s": 500.0,
        "gpu_power_kw": 0.5,
        "pue": 1.10,
        "days_per_year": 365.0,
        "grid_intensity_kg_per_kwh": 0.124,
        "savings_fraction": 0.20,
    },
}


def derive_seed(root: int, label: str) -> int:
    """Stable per-component stream seed from the root seed."""
    digest = hashlib.sha256(f"{label}:{root}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _check_value(section: str, key: str, value, default):
    name = f"{section}.{key}" if section else key
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"config key {name} does not take a boolean")
    if isinstance(default, int) and default is not None:
        if not isinstance(value, int):
            raise ConfigError(f"config key {name} must be an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {name} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {name} must be a list")
        return [int(v) for v in value]
    # the only None default is data.seed, which takes an integer
    if not isinstance(value, int):
        raise ConfigError(f"config key {name} must be an integer")
    return value


def _merge(resolved: dict, incoming: dict, origin: str) -> None:
    for section, content in incoming.items():
        if section not in resolved:
            raise ConfigError(f"unknown config section {section!r} ({origin})")
        if not isinstance(resolved[section], dict):
            resolved[section] = _check_value("", section, content,
                                             DEFAULTS[section])
            continue
        if not isinstance(content, dict):
            raise ConfigError(
                f"config section {section!r} must be a table ({origin})"
            )
        for key, value in content.items():
            if key not in resolved[section]:
                raise ConfigError(
                    f"unknown config key {section}.{key} ({origin})"
                )
            resolved[section][key] = _check_value(
                section, key, value, DEFAULTS[section][key])


class RunConfig:
    """Fully-resolved configuration for one command invocation."""

    def __init__(self, resolved: dict):
        self._raw = resolved
        if self._raw["data"]["seed"] is None:
            self._raw["data"]["seed"] = derive_seed(self.seed, "data")
        # materialize every owned config now so cross-field constraint
        # violations surface before any work starts
        self.vision_config()
        self.text_config()
        self.training_config()
        self.complexity_train_config()
        self.cost_params()
        self.projection_params()

    def __getitem__(self, section: str):
        return self._raw[section]

    @property
    def seed(self) -> int:
        return self._raw["seed"]

    def as_dict(self) -> dict:
        return copy.deepcopy(self._raw)

    def config_hash(self) -> str:
        payload = json.dumps(self._raw, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]

    def vision_config(self) -> VisionEncoderConfig:
        m = self._raw["model"]
        return VisionEncoderConfig(
            image_size=m["image_size"], patch_size=m["patch_size"],
            depth=m["depth"], width=m["width"], heads=m["heads"],
            embed_dim=m["embed_dim"], exit_layers=tuple(m["exit_layers"]))

    def text_config(self) -> TextEncoderConfig:
        m = self._raw["model"]
        return TextEncoderConfig(
            max_len=m["text_max_len"], depth=m["text_depth"],
            width=m["text_width"], heads=m["text_heads"],
            embed_dim=m["embed_dim"])

    def training_config(self) -> DualPathConfig:
        t = self._raw["training"]
        return DualPathConfig(
            alpha=t["alpha"], temperature=t["temperature"],
            batch_size=t["batch_size"], epochs=t["epochs"],
            lr_backbone=t["lr_backbone"], lr_heads=t["lr_heads"],
            weight_decay=t["weight_decay"], seed=derive_seed(self.seed,
                                                             "training"),
            exit_rule=t["exit_rule"], exit_layer=t["exit_layer"],
            threshold=t["threshold"])

    def complexity_train_config(self) -> ComplexityTrainConfig:
        c = self._raw["complexity"]
        return ComplexityTrainConfig(
            epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
            weight_decay=c["weight_decay"],
            seed=derive_seed(self.seed, "complexity"))

    def cost_params(self) -> CostParams:
        c = self._raw["cost"]
        return CostParams(
            vision_total_gflops=c["vision_total_gflops"],
            vision_layers=c["vision_layers"], text_gflops=c["text_gflops"],
            routing_gflops=c["routing_gflops"], p_simple=c["p_simple"],
            p_complex=c["p_complex"])

    def projection_params(self) -> ProjectionParams:
        c = self._raw["cost"]
        return ProjectionParams(
            daily_images=c["daily_images"],
            throughput_img_per_s=c["throughput_img_per_s"],
            gpu_power_kw=c["gpu_power_kw"], pue=c["pue"],
            days_per_year=c["days_per_year"],
            grid_intensity_kg_per_kwh=c["grid_intensity_kg_per_kwh"],
            savings_fraction=c["savings_fraction"])


def load_run_config(path=None, overrides: dict = None) -> RunConfig:
    """Resolve defaults, optional TOML file, and dotted flag overrides.

    ``overrides`` maps dotted keys ("training.alpha") or "seed" to values;
    entries with value None are treated as not provided.
    """
    resolved = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                parsed = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}")
        _merge(resolved, parsed, origin=str(path))
    nested = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            nested.setdefault(section, {})[key] = value
        else:
            nested[dotted] = value
    _merge(resolved, nested, origin="command line")
    return RunConfig(resolved)
