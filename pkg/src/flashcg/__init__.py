"""Coarse-grained MD with two bit-comparable neural force backends."""

from .flash import (
    PipelineMode,
    flash_energy_forces,
    io_model_base,
    io_model_flash,
    segment_reduce,
)
from .model import ModelConfig, ModelParams, RbfSpec, init_params
from .neighbors import (
    NeighborList,
    build_neighbors_bruteforce,
    build_neighbors_cells,
    group_by_destination,
    group_by_source,
)
from .params_io import load_params, save_params
from .reference import (
    EnergyForces,
    cfconv_forward,
    compute_edge_geometry,
    reference_energy,
    reference_energy_forces,
    reference_forces,
)

__all__ = [
    "EnergyForces",
    "ModelConfig",
    "ModelParams",
    "NeighborList",
    "PipelineMode",
    "RbfSpec",
    "build_neighbors_bruteforce",
    "build_neighbors_cells",
    "cfconv_forward",
    "compute_edge_geometry",
    "flash_energy_forces",
    "group_by_destination",
    "group_by_source",
    "init_params",
    "io_model_base",
    "io_model_flash",
    "load_params",
    "reference_energy",
    "reference_energy_forces",
    "reference_forces",
    "save_params",
    "segment_reduce",
]

__version__ = "0.1.0"
