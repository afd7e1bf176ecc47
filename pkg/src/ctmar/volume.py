"""CT volume container, HU normalization, and the H3DV binary volume format.

Volumes are rank-4 float32 arrays laid out (C, D, H, W). Values are either
raw Hounsfield units or normalized intensities in [-1, 1]; the ``normalized``
flag tracks which. The HU window attached to a volume defines the linear map
between the two representations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError


class Modality(Enum):
    KVCT = 0
    MVCT = 1


# Normalization windows in HU. Chosen to span the artifact thresholds with
# headroom; kVCT uses the classic 12-bit range.
DEFAULT_HU_WINDOWS: dict[Modality, tuple[float, float]] = {
    Modality.KVCT: (-1024.0, 3071.0),
    Modality.MVCT: (-1024.0, 2000.0),
}

# Slices containing any voxel above these HU values count as artifact slices.
ARTIFACT_THRESHOLD_HU: dict[Modality, float] = {
    Modality.KVCT: 2000.0,
    Modality.MVCT: 1000.0,
}

H3DV_MAGIC = b"H3DV"
H3DV_VERSION = 1
_HEADER = struct.Struct("<4sHB4I2d")  # magic, version, modality, dims, window


@dataclass
class Volume:
    """A single CT volume plus its HU calibration metadata.

    data is (C, D, H, W) float32. H and W must be even; model entry points
    additionally require them to be >= 16 and divisible by 4 or 8.
    """

    data: np.ndarray
    modality: Modality
    hu_window: tuple[float, float] | None = None
    voxel_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ConfigError(f"volume must be rank-4 (C,D,H,W), got shape {self.data.shape}")
        c, d, h, w = self.data.shape
        if d < 1:
            raise ConfigError("volume depth must be >= 1")
        if h % 2 or w % 2:
            raise ConfigError(f"H and W must be even, got ({h}, {w})")
        if self.hu_window is None:
            self.hu_window = DEFAULT_HU_WINDOWS[self.modality]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def depth(self) -> int:
        return self.data.shape[1]


def normalize_hu(v: Volume) -> Volume:
    """Map HU values linearly from the volume's window onto [-1, 1].

    Values outside the window are clipped. Raises ConfigError for a
    degenerate window and ValueError when called on an already-normalized
    volume (double normalization would silently corrupt intensities).
    """
    lo, hi = v.hu_window
    if lo >= hi:
        raise ConfigError(f"bad HU window: ({lo}, {hi})")
    if v.normalized:
        raise ValueError("volume is already normalized")
    clipped = np.clip(v.data, lo, hi)
    out = (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)
    return Volume(out, v.modality, (lo, hi), v.voxel_id, normalized=True)


def denormalize_hu(v: Volume) -> Volume:
    """Inverse of normalize_hu; exact on in-window values up to float32 rounding."""
    lo, hi = v.hu_window
    if lo >= hi:
        raise ConfigError(f"bad HU window: ({lo}, {hi})")
    if not v.normalized:
        raise ValueError("volume is not normalized")
    out = ((v.data + 1.0) * 0.5 * (hi - lo) + lo).astype(np.float32)
    return Volume(out, v.modality, (lo, hi), v.voxel_id, normalized=False)


def hu_to_normalized(value_hu: float, hu_window: tuple[float, float]) -> float:
    """Map a single HU value into [-1, 1] under the given window (with clipping)."""
    lo, hi = hu_window
    return float(2.0 * (min(max(value_hu, lo), hi) - lo) / (hi - lo) - 1.0)


def classify_artifact_slices(v: Volume) -> list[int]:
    """Indices of depth slices containing at least one above-threshold voxel.

    The threshold is 2000 HU for kVCT and 1000 HU for MVCT, compared in the
    volume's own intensity domain (thresholds are mapped through the HU
    window when the volume is normalized).
    """
    thr = ARTIFACT_THRESHOLD_HU[v.modality]
    if v.normalized:
        thr = hu_to_normalized(thr, v.hu_window)
    over = (v.data > thr).any(axis=(0, 2, 3))
    return [int(i) for i in np.nonzero(over)[0]]


def write_volume(path: str | Path, v: Volume) -> None:
    """Serialize a volume to the H3DV container.

    Layout: magic "H3DV", u16 version, u8 modality, four u32 dims (C,D,H,W),
    two f64 window bounds, then C*D*H*W little-endian float32 values in
    C-major/row-major order.
    """
    c, d, h, w = v.data.shape
    lo, hi = v.hu_window
    header = _HEADER.pack(H3DV_MAGIC, H3DV_VERSION, v.modality.value, c, d, h, w, lo, hi)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path: str | Path) -> Volume:
    """Read an H3DV file; raises FormatError on bad magic/version/truncation."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, modality, c, d, h, w, lo, hi = _HEADER.unpack_from(raw)
    if magic != H3DV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != H3DV_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        modality = Modality(modality)
    except ValueError as e:
        raise FormatError(f"{path}: unknown modality code {modality}") from e
    n = c * d * h * w
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, d, h, w).copy()
    return Volume(data, modality, (lo, hi), voxel_id=Path(path).stem)
