"""Flat key = value run configuration with strict schema validation.

Sections: [model], [simulation], [backend], [paths]. Unknown sections or
keys are rejected so a typo cannot silently fall back to a default; every
path is validated before a run starts. No include mechanism, configs stay
diffable.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .flash import DEFAULT_SEGMENT_SPLIT, DEFAULT_TILE_EDGES, PipelineMode
from .md import SimConfig
from .model import ModelConfig


class RunConfigError(ValueError):
    pass


def _onoff(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise RunConfigError(f"expected on/off, got {raw!r}")


_SCHEMA = {
    "model": {
        "hidden_dim": int, "rbf_dim": int, "num_blocks": int, "cutoff": float,
        "num_atom_types": int, "filter_hidden_dim": int, "readout_hidden_dim": int,
    },
    "simulation": {
        "dt_fs": float, "temperature": float, "friction": float, "n_steps": int,
        "n_replicas": int, "seed": int, "neighbor_stride": int, "output_stride": int,
    },
    "backend": {
        "mode": str, "fused": _onoff, "segred": _onoff, "quant": _onoff,
        "workers": int, "tile_edges": int, "segment_split": int,
    },
    "paths": {"system": str, "params": str, "out": str},
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def pipeline_mode(self) -> PipelineMode:
        return PipelineMode(
            fused=self.backend.get("fused", True),
            segred=self.backend.get("segred", True),
            quant=self.backend.get("quant", False),
            tile_edges=self.backend.get("tile_edges", DEFAULT_TILE_EDGES),
            segment_split=self.backend.get("segment_split", DEFAULT_SEGMENT_SPLIT),
        )

    def sim_config(self, **overrides) -> SimConfig:
        kw = dict(self.simulation)
        kw.update(overrides)
        return SimConfig(mode=self.backend.get("mode", "32bit"),
                         backend=self.pipeline_mode(),
                         workers=self.backend.get("workers", 1), **kw)

    def path(self, key: str, must_exist: bool = False) -> Path:
        if key not in self.paths:
            raise RunConfigError(f"config is missing paths.{key}")
        p = Path(self.paths[key])
        if must_exist and not p.exists():
            raise RunConfigError(f"paths.{key} does not exist: {p}")
        return p


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise RunConfigError(f"cannot read config file {path}")
    rc = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise RunConfigError(f"{path}: unknown section [{section}]")
        schema = _SCHEMA[section]
        bucket = getattr(rc, section)
        for key, raw in parser.items(section):
            if key not in schema:
                raise RunConfigError(f"{path}: unknown key {section}.{key}")
            try:
                bucket[key] = schema[key](raw)
            except (ValueError, RunConfigError) as exc:
                raise RunConfigError(f"{path}: bad value for {section}.{key}: {exc}")
    if "mode" in rc.backend and rc.backend["mode"] not in ("32bit", "64bit"):
        raise RunConfigError(f"{path}: backend.mode must be 32bit or 64bit")
    return rc


def write_config(rc: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section in _SCHEMA:
        values = getattr(rc, section)
        if values:
            parser[section] = {
                k: ("on" if v is True else "off" if v is False else str(v))
                for k, v in values.items()}
    with open(path, "w") as f:
        parser.write(f)


def apply_cli_overrides(rc: RunConfig, args) -> RunConfig:
    """Fold global CLI flags into the parsed config (CLI wins)."""
    if getattr(args, "seed", None) is not None:
        rc.simulation["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        rc.backend["workers"] = args.workers
    if getattr(args, "mode", None) is not None:
        rc.backend["mode"] = args.mode
    for flag in ("fused", "segred", "quant"):
        val = getattr(args, flag, None)
        if val is not None:
            rc.backend[flag] = val == "on"
    if getattr(args, "out", None) is not None:
        rc.paths["out"] = args.out
    return rc
