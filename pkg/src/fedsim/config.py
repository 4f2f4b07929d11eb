"""INI-style experiment configs.

Sections and keys (anything else is rejected)::

    [data]         source, num_nodes, iid_fraction, heterogeneity, labels_per_node,
                   samples_per_node, feature_dim, num_classes, seed,
                   train_images, train_labels, test_images, test_labels
    [model]        kind, hidden_dim, init_scale, init_seed, zero_init
    [train]        epochs, batch_size, learning_rate, decay
    [policy]       name, alpha, beta, fraction, macro_size, probability_floor
    [aggregation]  mode, min_retained_fraction, eval_batch_size
    [experiment]   rounds, seed, divergence, grad_norms

Missing keys take the defaults of the dataclasses they feed. When
``aggregation.mode`` is omitted it follows the policy: ``optimal`` for
``fedpns``, ``fedavg`` otherwise.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .models import ModelSpec, TrainConfig
from .orchestrator import AggregationConfig, AggregationMode, DataConfig, ExperimentConfig
from .selection import Policy, SelectionPolicyConfig


class ConfigError(ValueError):
    """Malformed config file or invalid value."""


# preset name -> (selection policy, aggregation mode)
PRESETS = {
    "fedavg": (Policy.RANDOM, AggregationMode.FEDAVG),
    "optagg": (Policy.RANDOM, AggregationMode.OPTIMAL),
    "fedpns": (Policy.FEDPNS, AggregationMode.OPTIMAL),
    "bn2": (Policy.BN2, AggregationMode.FEDAVG),
}

# section -> {key: (target, field name)}
_DATA_KEYS = [f.name for f in dataclasses.fields(DataConfig)]
_SCHEMA = {
    "data": {k: ("data", k) for k in _DATA_KEYS},
    "model": {k: ("model", k) for k in ("kind", "hidden_dim", "init_scale", "init_seed", "zero_init")},
    "train": {
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "learning_rate": ("train", "learning_rate"),
        "decay": ("top", "decay"),
    },
    "policy": {
        "name": ("selection", "policy"),
        "alpha": ("selection", "alpha"),
        "beta": ("selection", "beta"),
        "fraction": ("selection", "fraction"),
        "macro_size": ("selection", "macro_size"),
        "probability_floor": ("selection", "probability_floor"),
    },
    "aggregation": {k: ("aggregation", k) for k in ("mode", "min_retained_fraction", "eval_batch_size")},
    "experiment": {
        "rounds": ("top", "rounds"),
        "seed": ("top", "seed"),
        "divergence": ("top", "divergence"),
        "grad_norms": ("top", "track_grad_norms"),
    },
}

_TYPES = {
    **{f.name: f.type for f in dataclasses.fields(DataConfig)},
    **{f.name: f.type for f in dataclasses.fields(ModelSpec)},
    **{f.name: f.type for f in dataclasses.fields(TrainConfig)},
    **{f.name: f.type for f in dataclasses.fields(SelectionPolicyConfig)},
    **{f.name: f.type for f in dataclasses.fields(AggregationConfig)},
    **{f.name: f.type for f in dataclasses.fields(ExperimentConfig)},
}


def _convert(section: str, key: str, field_name: str, raw: str):
    kind = _TYPES[field_name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        if getattr(exc, "errors", None):
            line, text = exc.errors[0][0], exc.errors[0][1].strip()
            raise ConfigError(f"{source}: parse error at line {line}: {text}") from None
        line = getattr(exc, "lineno", None)
        where = f" at line {line}" if line else ""
        raise ConfigError(f"{source}: parse error{where}: {exc.message.splitlines()[0]}") from None

    values: dict[str, dict] = {t: {} for t in ("data", "model", "train", "selection", "aggregation", "top")}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            target, name = _SCHEMA[section][key]
            values[target][name] = _convert(section, key, name, raw)

    try:
        data = DataConfig(**values["data"])
        model = ModelSpec(
            input_dim=data.feature_dim, num_classes=data.num_classes, **values["model"]
        )
        selection = SelectionPolicyConfig(**values["selection"])
        if "mode" not in values["aggregation"]:
            values["aggregation"]["mode"] = (
                AggregationMode.OPTIMAL if selection.policy is Policy.FEDPNS else AggregationMode.FEDAVG
            )
        return ExperimentConfig(
            data=data,
            model=model,
            train=TrainConfig(**values["train"]),
            selection=selection,
            aggregation=AggregationConfig(**values["aggregation"]),
            **values["top"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: invalid value: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def _fmt(v) -> str:
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as config text that parses back to an equal config."""
    objects = {
        "data": cfg.data,
        "model": cfg.model,
        "train": cfg.train,
        "selection": cfg.selection,
        "aggregation": cfg.aggregation,
        "top": cfg,
    }
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (target, name) in keys.items():
            out.write(f"{key} = {_fmt(getattr(objects[target], name))}\n")
        out.write("\n")
    return out.getvalue()


def with_preset(cfg: ExperimentConfig, preset: str) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown policy '{preset}' (choose from {', '.join(PRESETS)})")
    policy, mode = PRESETS[preset]
    return dataclasses.replace(
        cfg,
        selection=dataclasses.replace(cfg.selection, policy=policy),
        aggregation=dataclasses.replace(cfg.aggregation, mode=mode),
    )


def preset_name(cfg: ExperimentConfig) -> str:
    for name, (policy, mode) in PRESETS.items():
        if cfg.selection.policy is policy and cfg.aggregation.mode is mode:
            return name
    return f"{cfg.selection.policy.value}+{cfg.aggregation.mode.value}"
