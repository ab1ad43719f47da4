"""Flexibility regions of active distribution networks and their use in
voltage stability margin optimisation."""

from .netmodel import CaseError, InfeasibleCaseError, NetworkCase, load_case, save_case, validate_case
from .polygon import FlexPolygon, half_plane_coeffs, polygon_contains

__version__ = "0.1.0"

__all__ = [
    "CaseError",
    "FlexPolygon",
    "InfeasibleCaseError",
    "NetworkCase",
    "half_plane_coeffs",
    "load_case",
    "polygon_contains",
    "save_case",
    "validate_case",
]
