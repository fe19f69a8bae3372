"""Hierarchical SPMD sharding: annotations, deduction, communication planning and a virtual cluster."""

from .annotation import (
    DUPLICATE,
    PARTIAL,
    DeviceGroup,
    HetAnnotation,
    ShardSpec,
    SliceRegion,
    annotations_equal,
    convert_hsize,
    placement,
    placement_map,
    validate,
)
from .errors import ShardingError
from .graph import CompGraph

__version__ = "0.1.0"

__all__ = [
    "DUPLICATE",
    "PARTIAL",
    "CompGraph",
    "DeviceGroup",
    "HetAnnotation",
    "ShardSpec",
    "ShardingError",
    "SliceRegion",
    "annotations_equal",
    "convert_hsize",
    "placement",
    "placement_map",
    "validate",
]
