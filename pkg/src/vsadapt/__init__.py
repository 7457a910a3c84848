"""Deterministic stages of a weakly supervised ceT1 -> hrT2 segmentation workflow."""
from .volume import LabelVolume, ProbabilityMap, Volume, read_nifti, read_probability_map, write_nifti, write_probability_map

__version__ = "0.1.0"

__all__ = [
    "LabelVolume",
    "ProbabilityMap",
    "Volume",
    "read_nifti",
    "read_probability_map",
    "write_nifti",
    "write_probability_map",
]
