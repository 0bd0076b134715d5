"""Experiment configuration: defaults, validation, canonical hashing.

Configs are JSON objects validated against the default schema below. Unknown
keys are rejected (typos in sweeps fail loudly) and every violation is
reported at once. The canonical hash covers the fully resolved config so any
behavioral knob changes the provenance header of the outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from fogsim.aggregation import AggregationSettings, CompressionConfig
from fogsim.errors import ConfigError
from fogsim.netmodel import (
    KIND_D2D,
    KIND_DOWNLINK,
    KIND_UPLINK,
    LinkModel,
)
from fogsim.topology import D2D_MODELS, LayerSpec

DEFAULTS: dict = {
    "seed": 0,
    "layers": [
        {"nodes": 8, "cluster_size": 4, "d2d": "complete", "d2d_p": 0.5, "d2d_enabled": False},
        {"nodes": 2, "cluster_size": 0, "d2d": "none", "d2d_p": 0.5, "d2d_enabled": False},
        {"nodes": 1, "cluster_size": 0, "d2d": "none", "d2d_p": 0.5, "d2d_enabled": False},
    ],
    "data": {
        "feature_dim": 10,
        "classes": 3,
        "samples_per_device": 100,
        "dirichlet_alpha": 1.0,
        "test_samples": 1000,
        "class_separation": 2.0,
    },
    "training": {"global_rounds": 10, "local_steps": 1, "lr": 0.05},
    "consensus": {"rounds": 10, "noise_sigma": 0.0, "vertical_noise": False},
    "compression": {"topk": None, "quantize_bits": None},
    "sampling_fraction": 1.0,
    "blocks": {"vertical_period": 1, "periods": None, "intra_rounds": 1, "intra_aggregate": True},
    "mobility": {"rate": 0.0, "migrate_prob": 0.8, "handover_prob": 0.7},
    "offload": {"enabled": False},
    "caching": {"fraction": 0.0},
    "deadline_s": None,
    "costs": {
        "uplink": {"rate": 1000.0, "energy_per_param": 0.01},
        "downlink": {"rate": 1000.0, "energy_per_param": 0.005},
        "d2d": {"rate": 5000.0, "energy_per_param": 0.001},
    },
    "compute": {
        "samples_per_second": 1000.0,
        "energy_per_sample_step": 1e-4,
        "slow_fraction": 0.0,
        "slow_factor": 5.0,
    },
    "trust_density": 1.0,
    "idle_clusters_train": True,
}

_LAYER_DEFAULTS = DEFAULTS["layers"][0]


def _merge(defaults, given, path, violations):
    """Deep-merge given onto defaults, flagging unknown keys."""
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            violations.append(f"unknown key '{here}'")
            continue
        if isinstance(defaults[key], dict) and not isinstance(value, dict):
            violations.append(f"'{here}' must be an object")
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, here, violations)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_number(raw, path, violations, *, minimum=None, exclusive_min=None,
                  maximum=None, integer=False, optional=False):
    value = raw
    for part in path.split("."):
        value = value[part]
    if value is None:
        if not optional:
            violations.append(f"'{path}' must not be null")
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        violations.append(f"'{path}' must be a number")
        return
    if integer and int(value) != value:
        violations.append(f"'{path}' must be an integer")
        return
    if minimum is not None and value < minimum:
        violations.append(f"'{path}' must be >= {minimum}")
    if exclusive_min is not None and value <= exclusive_min:
        violations.append(f"'{path}' must be > {exclusive_min}")
    if maximum is not None and value > maximum:
        violations.append(f"'{path}' must be <= {maximum}")


def _validate(raw: dict) -> list[str]:
    v: list[str] = []
    layers = raw["layers"]
    if not isinstance(layers, list) or len(layers) < 2:
        v.append("'layers' must list at least two layers (devices and root)")
    else:
        for i, layer in enumerate(layers):
            if not isinstance(layer, dict):
                v.append(f"'layers[{i}]' must be an object")
                continue
            merged = _merge(_LAYER_DEFAULTS, layer, f"layers[{i}]", v)
            layers[i] = merged
            if merged["d2d"] not in D2D_MODELS:
                v.append(f"'layers[{i}].d2d' must be one of {list(D2D_MODELS)}")
            if not isinstance(merged["nodes"], int) or merged["nodes"] < 1:
                v.append(f"'layers[{i}].nodes' must be a positive integer")
            if merged["d2d_enabled"] and merged["d2d"] == "none" and merged["nodes"] > 1:
                if merged["cluster_size"] != 1:
                    v.append(f"'layers[{i}]' enables d2d consensus without a d2d graph")
        if isinstance(layers[-1], dict) and layers[-1].get("nodes") != 1:
            v.append("the top layer must have exactly one node (the root)")

    _check_number(raw, "seed", v, minimum=0, integer=True)
    _check_number(raw, "data.feature_dim", v, minimum=1, integer=True)
    _check_number(raw, "data.classes", v, minimum=2, integer=True)
    _check_number(raw, "data.samples_per_device", v, minimum=1, integer=True)
    _check_number(raw, "data.dirichlet_alpha", v, exclusive_min=0)
    _check_number(raw, "data.test_samples", v, minimum=1, integer=True)
    _check_number(raw, "data.class_separation", v, minimum=0)
    _check_number(raw, "training.global_rounds", v, minimum=0, integer=True)
    _check_number(raw, "training.local_steps", v, minimum=0, integer=True)
    _check_number(raw, "training.lr", v, exclusive_min=0)
    _check_number(raw, "consensus.rounds", v, minimum=1, integer=True)
    _check_number(raw, "consensus.noise_sigma", v, minimum=0)
    _check_number(raw, "sampling_fraction", v, exclusive_min=0, maximum=1.0)
    _check_number(raw, "blocks.vertical_period", v, minimum=1, integer=True)
    _check_number(raw, "blocks.intra_rounds", v, minimum=1, integer=True)
    _check_number(raw, "mobility.rate", v, minimum=0)
    _check_number(raw, "mobility.migrate_prob", v, minimum=0, maximum=1)
    _check_number(raw, "mobility.handover_prob", v, minimum=0, maximum=1)
    _check_number(raw, "caching.fraction", v, minimum=0, maximum=1)
    _check_number(raw, "deadline_s", v, exclusive_min=0, optional=True)
    _check_number(raw, "compression.topk", v, minimum=1, integer=True, optional=True)
    _check_number(raw, "compression.quantize_bits", v, minimum=1, integer=True, optional=True)
    for kind in ("uplink", "downlink", "d2d"):
        _check_number(raw, f"costs.{kind}.rate", v, exclusive_min=0)
        _check_number(raw, f"costs.{kind}.energy_per_param", v, minimum=0)
    _check_number(raw, "compute.samples_per_second", v, exclusive_min=0)
    _check_number(raw, "compute.energy_per_sample_step", v, minimum=0)
    _check_number(raw, "compute.slow_fraction", v, minimum=0, maximum=1)
    _check_number(raw, "compute.slow_factor", v, minimum=1)
    _check_number(raw, "trust_density", v, minimum=0, maximum=1)

    periods = raw["blocks"]["periods"]
    if periods is not None:
        if not isinstance(periods, list) or not periods or any(
            not isinstance(p, int) or isinstance(p, bool) or p < 1 for p in periods
        ):
            v.append("'blocks.periods' must be a nonempty list of integers >= 1")

    if raw["offload"].get("enabled") and raw["deadline_s"] is None:
        v.append("'offload.enabled' requires 'deadline_s'")
    return v


@dataclass(frozen=True)
class SimulationConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        violations: list[str] = []
        merged = _merge(DEFAULTS, data, "", violations)
        violations.extend(_validate(merged))
        if violations:
            raise ConfigError(violations)
        return cls(raw=merged)

    @classmethod
    def from_file(cls, path) -> "SimulationConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_override(self, dotted_key: str, value) -> "SimulationConfig":
        """New config with one dotted-path key replaced; unknown paths fail."""
        parts = dotted_key.split(".")
        node = self.raw
        probe = DEFAULTS
        for part in parts[:-1]:
            if not isinstance(probe, dict) or part not in probe:
                raise ConfigError(f"unknown config key '{dotted_key}'")
            probe = probe[part]
            node = node[part]
        if not isinstance(probe, dict) or parts[-1] not in probe:
            raise ConfigError(f"unknown config key '{dotted_key}'")
        updated = copy.deepcopy(self.raw)
        target = updated
        for part in parts[:-1]:
            target = target[part]
        target[parts[-1]] = value
        return SimulationConfig.from_dict(updated)

    def with_seed(self, seed: int) -> "SimulationConfig":
        return self.with_override("seed", int(seed))

    # Convenience accessors

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def device_count(self) -> int:
        return self.raw["layers"][0]["nodes"]

    @property
    def global_rounds(self) -> int:
        return self.raw["training"]["global_rounds"]

    @property
    def local_steps(self) -> int:
        return self.raw["training"]["local_steps"]

    @property
    def lr(self) -> float:
        return self.raw["training"]["lr"]

    @property
    def class_count(self) -> int:
        return self.raw["data"]["classes"]

    def layer_specs(self) -> list[LayerSpec]:
        return [
            LayerSpec(
                node_count=layer["nodes"],
                cluster_size=layer["cluster_size"],
                d2d_model=layer["d2d"],
                d2d_p=layer["d2d_p"],
                d2d_enabled=layer["d2d_enabled"],
            )
            for layer in self.raw["layers"]
        ]

    def links(self) -> dict[str, LinkModel]:
        costs = self.raw["costs"]
        return {
            KIND_UPLINK: LinkModel(kind=KIND_UPLINK, **costs["uplink"]),
            KIND_DOWNLINK: LinkModel(kind=KIND_DOWNLINK, **costs["downlink"]),
            KIND_D2D: LinkModel(kind=KIND_D2D, **costs["d2d"]),
        }

    def compression(self) -> CompressionConfig | None:
        c = self.raw["compression"]
        if c["topk"] is None and c["quantize_bits"] is None:
            return None
        return CompressionConfig(topk=c["topk"], quantize_bits=c["quantize_bits"])

    def aggregation_settings(self) -> AggregationSettings:
        return AggregationSettings(
            consensus_rounds=self.raw["consensus"]["rounds"],
            noise_sigma=self.raw["consensus"]["noise_sigma"],
            vertical_noise=self.raw["consensus"]["vertical_noise"],
            compression=self.compression(),
        )

    def star_variant(self) -> "SimulationConfig":
        """Flat single-cluster topology with the same data, training, and costs."""
        raw = copy.deepcopy(self.raw)
        raw["layers"] = [
            {"nodes": self.device_count, "cluster_size": 0, "d2d": "none",
             "d2d_p": 0.5, "d2d_enabled": False},
            {"nodes": 1, "cluster_size": 0, "d2d": "none", "d2d_p": 0.5,
             "d2d_enabled": False},
        ]
        raw["sampling_fraction"] = 1.0
        raw["blocks"] = copy.deepcopy(DEFAULTS["blocks"])
        raw["mobility"] = copy.deepcopy(DEFAULTS["mobility"])
        raw["offload"] = {"enabled": False}
        raw["caching"] = {"fraction": 0.0}
        raw["compression"] = {"topk": None, "quantize_bits": None}
        raw["consensus"] = copy.deepcopy(DEFAULTS["consensus"])
        return SimulationConfig.from_dict(raw)
