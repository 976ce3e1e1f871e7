"""Network configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

MATCHING_MODES = ("learned_offsets", "local_window")
MODES = ("raw", "awgn")


class ConfigError(ValueError):
    pass


def window_shape(k: int) -> tuple[int, int]:
    """Most square (rows, cols) rectangle with rows * cols == k and rows <= cols."""
    rows = max(d for d in range(1, int(k ** 0.5) + 1) if k % d == 0)
    return rows, k // rows


@dataclass(frozen=True)
class NLFeMFConfig:
    channels: int
    neighbors: int
    search_radius: float = 9.0
    offset_hidden: Optional[int] = None
    matching: str = "learned_offsets"

    def __post_init__(self):
        if self.channels < 1 or self.neighbors < 1:
            raise ConfigError(f"channels and neighbors must be >= 1, got C={self.channels}, K={self.neighbors}")
        if self.search_radius <= 0 or (self.matching == "learned_offsets" and self.search_radius < 1):
            raise ConfigError(f"search radius must be >= 1, got {self.search_radius}")
        if self.matching not in MATCHING_MODES:
            raise ConfigError(f"unknown matching strategy {self.matching!r}")
        if self.offset_hidden is not None and self.offset_hidden < 1:
            raise ConfigError("offset_hidden must be >= 1")

    @property
    def hidden(self) -> int:
        return self.offset_hidden or self.channels

    @property
    def window(self) -> tuple[int, int]:
        return window_shape(self.neighbors)


@dataclass(frozen=True)
class NetworkConfig:
    scales: int = 3
    k_per_scale: tuple = (15, 9, 7)
    c_per_scale: tuple = (48, 96, 192)
    search_radius: float = 9.0
    matching: str = "learned_offsets"
    mode: str = "raw"
    in_channels: int = 8
    out_channels: int = 4
    offset_hidden: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "k_per_scale", tuple(int(k) for k in self.k_per_scale))
        object.__setattr__(self, "c_per_scale", tuple(int(c) for c in self.c_per_scale))
        if self.scales < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")
        if len(self.k_per_scale) != self.scales or len(self.c_per_scale) != self.scales:
            raise ConfigError(
                f"k_per_scale ({len(self.k_per_scale)}) and c_per_scale ({len(self.c_per_scale)}) "
                f"must both have {self.scales} entries")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "raw" and self.in_channels != 2 * self.out_channels:
            raise ConfigError("raw mode needs in_channels == 2 * out_channels")
        for s in range(self.scales):
            self.block(s)  # validates per-scale values

    def block(self, s: int) -> NLFeMFConfig:
        return NLFeMFConfig(self.c_per_scale[s], self.k_per_scale[s], self.search_radius,
                            self.offset_hidden, self.matching)

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** (self.scales - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_per_scale"] = list(self.k_per_scale)
        d["c_per_scale"] = list(self.c_per_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        mode = d.get("mode", "raw")
        if mode == "awgn":
            d.setdefault("in_channels", 4)
            d.setdefault("out_channels", 3)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "scales" not in d and "k_per_scale" in d:
            d["scales"] = len(d["k_per_scale"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_awgn_variant(cfg: NetworkConfig) -> NetworkConfig:
    """Same core for RGB Gaussian denoising: input RGB plus one sigma/255 map channel, output RGB."""
    return replace(cfg, mode="awgn", in_channels=4, out_channels=3)
