"""Mixed-precision quantization policies for microcontroller memory budgets."""

from ._mpq import (
    Error,
    Graph,
    InfeasibleError,
    ParseError,
    Policy,
    PolicyError,
    QuantError,
    ValidationError,
    action_center,
    bits_from_action,
    enforce_ram,
    enforce_rom,
    footprint,
    pack,
    unpack,
)

__all__ = [
    "Error",
    "Graph",
    "InfeasibleError",
    "ParseError",
    "Policy",
    "PolicyError",
    "QuantError",
    "ValidationError",
    "action_center",
    "bits_from_action",
    "enforce_ram",
    "enforce_rom",
    "footprint",
    "pack",
    "unpack",
]
