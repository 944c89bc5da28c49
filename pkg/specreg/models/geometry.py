import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from specreg.errors import SpecregError
from specreg.models.image import BinaryMask, Image2D, _frozen_array


@dataclass(frozen=True)
class HomogeneousTransform2D:
    """3×3 matrix acting on column vectors (x, y, 1)."""

    m: np.ndarray

    def __post_init__(self):
        m = _frozen_array(self.m, np.float64)
        if m.shape != (3, 3):
            raise SpecregError(f'homogeneous transform must be 3x3, got {m.shape}')
        if not np.all(np.isfinite(m)):
            raise SpecregError('homogeneous transform entries must be finite')
        object.__setattr__(self, 'm', m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def to_dict(self):
        return {'matrix': self.m.tolist()}


@dataclass(frozen=True)
class ControlGrid:
    """Uniform mesh of control-point displacements.

    Control point ``(a, b)`` sits at ``origin + (a * spacing[0], b * spacing[1])``
    and its displacement is ``disp[b, a] = (dx, dy)`` in pixels.
    """

    disp: np.ndarray
    spacing: Tuple[float, float]
    origin: Tuple[float, float]

    def __post_init__(self):
        disp = _frozen_array(self.disp, np.float64)
        if disp.ndim != 3 or disp.shape[2] != 2:
            raise SpecregError(f'control displacements must be (ny, nx, 2), got {disp.shape}')
        if disp.shape[0] < 4 or disp.shape[1] < 4:
            raise SpecregError('a cubic B-spline grid needs at least 4x4 control points')
        if not np.all(np.isfinite(disp)):
            raise SpecregError('control displacements must be finite')
        spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if min(spacing) <= 0 or not all(math.isfinite(s) for s in spacing):
            raise SpecregError('grid spacing must be positive')
        origin = (float(self.origin[0]), float(self.origin[1]))
        object.__setattr__(self, 'disp', disp)
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', origin)

    @classmethod
    def zeros_for(cls, width, height, spacing):
        """Zero grid covering a width × height image with one cell of margin."""
        sx, sy = (spacing, spacing) if np.isscalar(spacing) else spacing
        nx = int(math.floor((width - 1) / sx)) + 4
        ny = int(math.floor((height - 1) / sy)) + 4
        return cls(np.zeros((ny, nx, 2)), (sx, sy), (-sx, -sy))

    @property
    def nx(self):
        return self.disp.shape[1]

    @property
    def ny(self):
        return self.disp.shape[0]

    @property
    def size(self):
        return self.nx * self.ny

    def with_disp(self, disp):
        return ControlGrid(np.asarray(disp, dtype=np.float64).reshape(self.disp.shape),
                           self.spacing, self.origin)

    def parameters(self):
        return self.disp.reshape(-1).copy()

    def support(self):
        """Half-open pixel box ((x0, x1), (y0, y1)) where queries have full 4×4 support."""
        (sx, sy), (ox, oy) = self.spacing, self.origin
        return ((ox + sx, ox + (self.nx - 2) * sx), (oy + sy, oy + (self.ny - 2) * sy))

    def to_dict(self):
        return {
            'nx': self.nx,
            'ny': self.ny,
            'spacing': list(self.spacing),
            'origin': list(self.origin),
            'max_abs_disp_px': float(np.abs(self.disp).max()),
        }


@dataclass(frozen=True)
class DeformationField:
    """Dense displacement ``disp[y, x] = (dx, dy)`` in pixels."""

    disp: np.ndarray

    def __post_init__(self):
        disp = _frozen_array(self.disp, np.float64)
        if disp.ndim != 3 or disp.shape[2] != 2 or disp.shape[0] < 1 or disp.shape[1] < 1:
            raise SpecregError(f'deformation field must be (height, width, 2), got {disp.shape}')
        if not np.all(np.isfinite(disp)):
            raise SpecregError('deformation field values must be finite')
        object.__setattr__(self, 'disp', disp)

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width, 2)))

    @property
    def width(self):
        return self.disp.shape[1]

    @property
    def height(self):
        return self.disp.shape[0]

    def magnitude(self):
        return np.hypot(self.disp[..., 0], self.disp[..., 1])


@dataclass(frozen=True)
class WarpResult:
    image: Image2D
    valid: BinaryMask

    def __post_init__(self):
        if self.image.shape != self.valid.shape:
            raise SpecregError('warped image and validity mask must share dimensions')

    @property
    def width(self):
        return self.image.width

    @property
    def height(self):
        return self.image.height
