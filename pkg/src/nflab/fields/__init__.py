"""Radiance field networks over ray samples.

Three trunk variants share one interface: a plain per-sample MLP, a trunk
whose middle layers run strided convolutions along the ray and recover
full resolution through depth-aware interpolation, and a trunk that drops
odd-indexed samples instead of convolving. Density comes from a head that
never sees the view direction; color gets the encoded direction late.
"""

from .config import INTERP_MODES, VARIANTS, NetworkConfig
from .network import (
    ActivationReport,
    RadianceOutput,
    activation_accounting,
    count_parameters,
    forward,
    init_params,
    params_sub_from_conv,
    receptive_field,
    validate_sample_count,
)

__all__ = [
    "INTERP_MODES",
    "VARIANTS",
    "NetworkConfig",
    "ActivationReport",
    "RadianceOutput",
    "activation_accounting",
    "count_parameters",
    "forward",
    "init_params",
    "params_sub_from_conv",
    "receptive_field",
    "validate_sample_count",
]
