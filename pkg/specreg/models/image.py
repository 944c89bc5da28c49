from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from specreg.errors import DimensionMismatchError, SpecregError


def _frozen_array(values, dtype):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Image2D:
    """Single-channel raster, indexed ``data[y, x]``."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_array(self.data, np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise SpecregError(f'Image2D needs a non-empty 2D array, got shape {data.shape}')
        if not np.all(np.isfinite(data)):
            raise SpecregError('Image2D values must be finite')
        object.__setattr__(self, 'data', data)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = _frozen_array(self.bits, bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise SpecregError(f'BinaryMask needs a non-empty 2D array, got shape {bits.shape}')
        object.__setattr__(self, 'bits', bits)

    @classmethod
    def full(cls, width, height, value=True):
        return cls(np.full((height, width), value, dtype=bool))

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def shape(self):
        return self.bits.shape

    def count(self):
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True)
class SpectralStack:
    channels: Tuple[Image2D, ...]
    labels: Optional[Tuple[str, ...]] = field(default=None)

    def __post_init__(self):
        channels = tuple(self.channels)
        if not channels:
            raise SpecregError('SpectralStack needs at least one channel')
        shape = channels[0].shape
        for index, channel in enumerate(channels):
            if channel.shape != shape:
                raise DimensionMismatchError(
                    f'channel {index} is {channel.width}x{channel.height}, '
                    f'expected {shape[1]}x{shape[0]}')
        labels = tuple(self.labels) if self.labels is not None else None
        if labels is not None and len(labels) != len(channels):
            raise SpecregError('one label per channel is required')
        object.__setattr__(self, 'channels', channels)
        object.__setattr__(self, 'labels', labels)

    @property
    def width(self):
        return self.channels[0].width

    @property
    def height(self):
        return self.channels[0].height

    def __len__(self):
        return len(self.channels)

    def to_dict(self):
        return {
            'channels': len(self.channels),
            'width': self.width,
            'height': self.height,
            'labels': list(self.labels) if self.labels else None,
        }


def as_mask(region: Optional[BinaryMask], shape: Sequence[int]) -> np.ndarray:
    """Boolean array for an optional region; ``None`` means the whole image."""
    if region is None:
        return np.ones(tuple(shape), dtype=bool)
    if region.shape != tuple(shape):
        raise DimensionMismatchError(
            f'region is {region.width}x{region.height}, expected {shape[1]}x{shape[0]}')
    return region.bits
