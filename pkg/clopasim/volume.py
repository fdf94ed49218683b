"""Dense 3-D volumes with per-axis spacing and the CLVX raw file format.

Header: magic ``CLVX``, format version (u32), three extents (u32), three
spacings (f32), all little-endian.  The payload is f32 voxels for images
and one byte per voxel for masks; the kind is implied by payload length.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clopasim.util import atomic_write_bytes

VOLUME_MAGIC = b"CLVX"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sI3I3f")


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise VolumeFormatError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def is_mask(self) -> bool:
        return self.data.dtype == np.bool_

    @classmethod
    def image(cls, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        return cls(np.asarray(data, dtype=np.float32), spacing)

    @classmethod
    def mask(cls, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        return cls(np.asarray(data, dtype=np.bool_), spacing)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *self.extents, *self.spacing)
        if self.is_mask:
            payload = np.ascontiguousarray(self.data, dtype=np.uint8).tobytes()
        else:
            payload = np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        return header + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Volume":
        if len(raw) < _HEADER.size:
            raise VolumeFormatError("truncated volume header")
        magic, version, d, h, w, sz, sy, sx = _HEADER.unpack_from(raw)
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError("not a volume file: bad magic bytes")
        if version != VOLUME_VERSION:
            raise VolumeFormatError(f"unsupported volume version {version}")
        count = d * h * w
        payload = raw[_HEADER.size:]
        spacing = (sz, sy, sx)
        if len(payload) == count:
            data = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).astype(np.bool_)
            return cls(data, spacing)
        if len(payload) == 4 * count:
            data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
            return cls(data, spacing)
        raise VolumeFormatError(f"payload of {len(payload)} bytes does not fit extents {(d, h, w)}")

    def save(self, path: Path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "Volume":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class LabelledSample:
    """An image with its binary ground truth, as cached during annotation."""

    sample_id: int
    image: np.ndarray
    label: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.image.shape != self.label.shape:
            raise VolumeFormatError(
                f"sample {self.sample_id}: image {self.image.shape} and label {self.label.shape} differ"
            )
        self.label = np.asarray(self.label, dtype=np.bool_)
