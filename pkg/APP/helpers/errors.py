"""
Exception types shared across the HyperInvert package.

The CLI maps them to process exit codes; library code only raises.
"""


class HyperInvertError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HyperInvertError, ValueError):
    """Missing or invalid configuration sections or values."""

    exit_code = 2


class SpecMismatchError(HyperInvertError, ValueError):
    """Tensor shapes, layer tables or refined-layer sets that do not line up."""

    exit_code = 3
