"""Network configuration."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ContractError

VARIANTS = ("nerf", "unerf-conv", "unerf-sub")
INTERP_MODES = ("position-aware", "nearest", "average")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs shared by all trunk variants.

    The trunk always has 2 + 2*down_levels layers; for the U-shaped
    variants the middle 2*down_levels of them run at progressively halved
    and then restored sample resolution. kernel is the tap count of the
    strided convolutions and only matters for unerf-conv. skip_injection
    re-concatenates the encoded position at the first layer past the
    bottleneck (the classic mid-trunk skip), off by default so variants
    stay parameter-comparable. interpolation picks how the up path carries
    coarse features to finer depths.
    """

    variant: str = "nerf"
    width: int = 256
    kernel: int = 3
    pos_freqs: int = 10
    dir_freqs: int = 4
    skip_injection: bool = False
    interpolation: str = "position-aware"
    down_levels: int = 3
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.interpolation not in INTERP_MODES:
            raise ContractError(
                f"interpolation must be one of {INTERP_MODES}, "
                f"got {self.interpolation!r}")
        if self.width < 8 or self.width % 2:
            raise ContractError(
                f"width must be an even integer >= 8, got {self.width}")
        if self.kernel < 1:
            raise ContractError(f"kernel must be >= 1, got {self.kernel}")
        if self.pos_freqs < 0 or self.dir_freqs < 0:
            raise ContractError("frequency counts must be nonnegative")
        if self.down_levels < 1:
            raise ContractError(
                f"down_levels must be >= 1, got {self.down_levels}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(
                f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def pos_dim(self) -> int:
        return 3 * (1 + 2 * self.pos_freqs)

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.dir_freqs)

    @property
    def trunk_layers(self) -> int:
        return 2 + 2 * self.down_levels
