"""Bayer mosaics: packing to four half-resolution planes, level normalization, D8 transforms, file I/O.

Packed planes are always ordered R, Gr, B, Gb whatever the sensor's CFA phase. Gr is the
green sharing a row with red.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import ntf

CHANNELS = ("R", "Gr", "B", "Gb")

# (row, col) of each canonical channel inside the 2x2 tile
CFA_SITES = {
    "RGGB": {"R": (0, 0), "Gr": (0, 1), "Gb": (1, 0), "B": (1, 1)},
    "BGGR": {"B": (0, 0), "Gb": (0, 1), "Gr": (1, 0), "R": (1, 1)},
    "GRBG": {"Gr": (0, 0), "R": (0, 1), "B": (1, 0), "Gb": (1, 1)},
    "GBRG": {"Gb": (0, 0), "B": (0, 1), "R": (1, 0), "Gr": (1, 1)},
}


class RawFormatError(ValueError):
    pass


BlackLevel = Union[float, tuple]


@dataclass(frozen=True)
class RawMeta:
    cfa: str
    black_level: BlackLevel
    saturation: float
    iso: Optional[float] = None
    sensor_id: Optional[str] = None

    def __post_init__(self):
        if self.cfa not in CFA_SITES:
            raise RawFormatError(f"unknown CFA pattern {self.cfa!r}, expected one of {sorted(CFA_SITES)}")
        bl = self.black_level
        if isinstance(bl, (list, tuple, np.ndarray)):
            bl = tuple(float(v) for v in bl)
            if len(bl) != 4:
                raise RawFormatError(f"per-channel black level needs 4 values (R, Gr, B, Gb), got {len(bl)}")
            object.__setattr__(self, "black_level", bl)
        else:
            object.__setattr__(self, "black_level", float(bl))
        if np.max(self.black_levels()) >= self.saturation:
            raise RawFormatError(f"black level {self.black_level} must be below saturation {self.saturation}")

    def black_levels(self) -> np.ndarray:
        """Black level per canonical channel, shape (4,)."""
        return np.broadcast_to(np.asarray(self.black_level, dtype=np.float64), (4,)).copy()

    def to_dict(self) -> dict:
        bl = list(self.black_level) if isinstance(self.black_level, tuple) else self.black_level
        return {"cfa": self.cfa, "black_level": bl, "saturation": self.saturation,
                "iso": self.iso, "sensor_id": self.sensor_id}

    @classmethod
    def from_dict(cls, d: dict) -> "RawMeta":
        try:
            return cls(d["cfa"], d["black_level"], float(d["saturation"]), d.get("iso"), d.get("sensor_id"))
        except KeyError as e:
            raise RawFormatError(f"sidecar missing field {e}") from e


@dataclass
class RawImage:
    mosaic: np.ndarray  # H x W
    meta: RawMeta

    def __post_init__(self):
        m = np.asarray(self.mosaic)
        if m.ndim == 4 and m.shape[:2] == (1, 1):
            m = m[0, 0]
        if m.ndim != 2:
            raise RawFormatError(f"mosaic must be HxW or 1x1xHxW, got shape {np.shape(self.mosaic)}")
        if m.shape[0] % 2 or m.shape[1] % 2:
            raise RawFormatError(f"mosaic dimensions must be even, got {m.shape}")
        self.mosaic = m


@dataclass
class PackedRaw:
    data: np.ndarray  # 1 x 4 x H/2 x W/2, channels R, Gr, B, Gb
    meta: RawMeta


def pack(raw: RawImage) -> PackedRaw:
    sites = CFA_SITES[raw.meta.cfa]
    planes = [raw.mosaic[r::2, c::2] for r, c in (sites[ch] for ch in CHANNELS)]
    return PackedRaw(np.stack(planes)[None], raw.meta)


def unpack(packed: PackedRaw) -> RawImage:
    data = np.asarray(packed.data)
    if data.ndim != 4 or data.shape[:2] != (1, 4):
        raise RawFormatError(f"packed data must be 1x4xhxw, got {data.shape}")
    _, _, h, w = data.shape
    mosaic = np.empty((2 * h, 2 * w), dtype=data.dtype)
    sites = CFA_SITES[packed.meta.cfa]
    for i, ch in enumerate(CHANNELS):
        r, c = sites[ch]
        mosaic[r::2, c::2] = data[0, i]
    return RawImage(mosaic, packed.meta)


def _levels(meta: RawMeta):
    # channels sit on axis -3
    black = meta.black_levels().reshape(4, 1, 1)
    return black, meta.saturation - black


def _out_dtype(x: np.ndarray):
    return np.float32 if x.dtype == np.float32 else np.float64


def normalize(packed: PackedRaw) -> np.ndarray:
    """(x - black) / (saturation - black) per channel; not clamped, may dip below 0."""
    x = np.asarray(packed.data)
    black, span = _levels(packed.meta)
    return ((x.astype(np.float64) - black) / span).astype(_out_dtype(x))


def denormalize(y: np.ndarray, meta: RawMeta) -> np.ndarray:
    """Inverse of :func:`normalize`, back to sensor units."""
    y = np.asarray(y)
    black, span = _levels(meta)
    return (y.astype(np.float64) * span + black).astype(_out_dtype(y))


# --- dihedral group -----------------------------------------------------------------

DIHEDRAL_NAMES = ("id", "rot90", "rot180", "rot270", "flip", "flip.rot90", "flip.rot180", "flip.rot270")


def dihedral_transform(x: np.ndarray, g: int) -> np.ndarray:
    """Element ``g`` of D8 on the last two axes: rot90^g for g < 4, else a horizontal
    flip applied after rot90^(g-4). Rotations are counter-clockwise; all channels move
    together and are never permuted."""
    if not (isinstance(g, (int, np.integer)) and 0 <= g < 8):
        raise ValueError(f"dihedral element must be an integer in 0..7, got {g!r}")
    y = np.rot90(x, int(g) % 4, axes=(-2, -1))
    if g >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


# --- files --------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_raw(path, raw: RawImage) -> None:
    """Write the mosaic as ``<path>`` (NTF) and metadata as the ``.json`` sidecar next to it."""
    path = Path(path)
    ntf.save(path, raw.mosaic)
    sidecar_path(path).write_text(json.dumps(raw.meta.to_dict(), indent=2))


def load_raw(path) -> RawImage:
    path = Path(path)
    side = sidecar_path(path)
    try:
        mosaic = ntf.load(path)
        meta = json.loads(side.read_text())
    except FileNotFoundError as e:
        raise FileNotFoundError(f"{e.filename}: no such file (RAW input needs both .ntf and .json)") from e
    except (ntf.NTFError, json.JSONDecodeError) as e:
        raise RawFormatError(f"{path}: {e}") from e
    return RawImage(mosaic, RawMeta.from_dict(meta))


def list_raw_dir(directory) -> list[Path]:
    """NTF files in ``directory`` that have a JSON sidecar, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    return sorted(p for p in d.glob("*.ntf") if sidecar_path(p).exists())


def with_iso(meta: RawMeta, iso: Optional[float]) -> RawMeta:
    return replace(meta, iso=iso)
