import logging
import math
import struct

import numpy as np
from scipy import ndimage

from specreg.errors import DimensionMismatchError, DomainError, FoldingGuardError, ImageFormatError
from specreg.models import (
    BinaryMask, ControlGrid, DeformationField, HomogeneousTransform2D, Image2D, WarpResult,
)
from specreg.services.image_service import ImageService
from specreg.utils import atomic_write

logger = logging.getLogger(__name__)

FIELD_MAGIC = b'DFLD'
FIELD_HEADER = struct.Struct('<4sIII')
FOLDING_GUARD = 0.4


def _basis(u):
    """Cubic B-spline basis values, stacked on a trailing axis of length 4."""
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    return np.stack([
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ], axis=-1)


def _cell(coord, origin, spacing, count, axis):
    t = (coord - origin) / spacing
    whole = np.floor(t)
    index = whole.astype(np.int64) - 1
    if np.any(index < 0) or np.any(index + 3 > count - 1):
        raise DomainError(f'query outside the grid support along {axis}')
    return index, t - whole


def _subdivide(c, axis):
    """Cubic B-spline midpoint subdivision along one axis (n -> 2n-3 points)."""
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]
    out = np.empty((2 * n - 3,) + c.shape[1:])
    out[0::2] = (c[:-1] + c[1:]) / 2.0
    out[1::2] = (c[:-2] + 6.0 * c[1:-1] + c[2:]) / 8.0
    return np.moveaxis(out, 0, axis)


class TransformService:

    # Homogeneous transforms

    @staticmethod
    def transform_points(T, xs, ys):
        """Vectorised homogeneous mapping; returns (x', y', ok) with ok=False where w = 0"""
        a, b, c = T.m[0]
        d, e, f = T.m[1]
        g, h, i = T.m[2]
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        w = g * xs + h * ys + i
        ok = w != 0
        safe = np.where(ok, w, 1.0)
        out_x = np.where(ok, (a * xs + b * ys + c) / safe, np.nan)
        out_y = np.where(ok, (d * xs + e * ys + f) / safe, np.nan)
        return out_x, out_y, ok

    @staticmethod
    def transform_point(T, p):
        x, y, ok = TransformService.transform_points(T, [p[0]], [p[1]])
        if not ok[0]:
            raise DomainError(f'homogeneous denominator vanishes at {tuple(p)}')
        return float(x[0]), float(y[0])

    @staticmethod
    def compose(first, then):
        """Transform applying ``first`` and then ``then`` (matrix then · first)"""
        return HomogeneousTransform2D(then.m @ first.m)

    @staticmethod
    def invert(T):
        if abs(np.linalg.det(T.m)) < 1e-15:
            raise DomainError('transform is not invertible')
        return HomogeneousTransform2D(np.linalg.inv(T.m))

    @staticmethod
    def make_rigid(angle, tx, ty):
        c, s = math.cos(angle), math.sin(angle)
        return HomogeneousTransform2D([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])

    @staticmethod
    def make_similarity(scale, angle, tx, ty):
        c, s = scale * math.cos(angle), scale * math.sin(angle)
        return HomogeneousTransform2D([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])

    @staticmethod
    def make_affine(a11, a12, a21, a22, tx, ty):
        if a11 * a22 - a12 * a21 == 0:
            raise DomainError('affine matrix is singular')
        return HomogeneousTransform2D([[a11, a12, tx], [a21, a22, ty], [0.0, 0.0, 1.0]])

    @staticmethod
    def scale_to_level(T, level):
        """Express a full-resolution transform in the pixel frame of pyramid ``level``"""
        if level == 0:
            return T
        factor = 2.0 ** level
        down = np.diag([1.0 / factor, 1.0 / factor, 1.0])
        up = np.diag([factor, factor, 1.0])
        return HomogeneousTransform2D(down @ T.m @ up)

    # Free-form deformation

    @staticmethod
    def bspline_weights(u):
        """(B0, B1, B2, B3) at fractional coordinate u ∈ [0, 1)"""
        if not 0.0 <= u < 1.0:
            raise DomainError(f'B-spline coordinate must lie in [0, 1), got {u}')
        return tuple(float(w) for w in _basis(u))

    @staticmethod
    def support_weights(grid, xs, ys):
        """Per-point cell indices and basis weights: (ix, iy, bx, by)"""
        (sx, sy), (ox, oy) = grid.spacing, grid.origin
        ix, u = _cell(np.asarray(xs, dtype=np.float64), ox, sx, grid.nx, 'x')
        iy, v = _cell(np.asarray(ys, dtype=np.float64), oy, sy, grid.ny, 'y')
        return ix, iy, _basis(u), _basis(v)

    @staticmethod
    def ffd_displacements(grid, xs, ys):
        """Tensor-product B-spline displacement at many points, shape xs.shape + (2,)"""
        ix, iy, bx, by = TransformService.support_weights(grid, xs, ys)
        out = np.zeros(ix.shape + (2,))
        for m in range(4):
            for l in range(4):
                weight = by[..., m] * bx[..., l]
                out += weight[..., None] * grid.disp[iy + m, ix + l]
        return out

    @staticmethod
    def ffd_displacement(grid, x, y):
        dx, dy = TransformService.ffd_displacements(grid, np.array([x]), np.array([y]))[0]
        return float(dx), float(dy)

    @staticmethod
    def pixel_lattice(width, height):
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return xs, ys

    @staticmethod
    def densify(grid, width, height):
        xs, ys = TransformService.pixel_lattice(width, height)
        return DeformationField(TransformService.ffd_displacements(grid, xs, ys))

    @staticmethod
    def covers(grid, width, height):
        (x0, x1), (y0, y1) = grid.support()
        return x0 <= 0 and y0 <= 0 and x1 > width - 1 and y1 > height - 1

    @staticmethod
    def pad_to_cover(grid, width, height):
        """Append edge-replicated control points until the grid supports the image"""
        disp, (ox, oy) = np.array(grid.disp), grid.origin
        (sx, sy) = grid.spacing
        while ox + sx > 0:
            disp = np.pad(disp, ((0, 0), (1, 0), (0, 0)), mode='edge')
            ox -= sx
        while oy + sy > 0:
            disp = np.pad(disp, ((1, 0), (0, 0), (0, 0)), mode='edge')
            oy -= sy
        while ox + (disp.shape[1] - 2) * sx <= width - 1:
            disp = np.pad(disp, ((0, 0), (0, 1), (0, 0)), mode='edge')
        while oy + (disp.shape[0] - 2) * sy <= height - 1:
            disp = np.pad(disp, ((0, 1), (0, 0), (0, 0)), mode='edge')
        return ControlGrid(disp, grid.spacing, (ox, oy))

    @staticmethod
    def refine_grid(grid):
        """Halve the spacing while reproducing the represented field exactly"""
        disp = _subdivide(_subdivide(grid.disp, 1), 0)
        (sx, sy), (ox, oy) = grid.spacing, grid.origin
        return ControlGrid(disp, (sx / 2.0, sy / 2.0), (ox + sx / 2.0, oy + sy / 2.0))

    @staticmethod
    def rescale_grid(grid, factor):
        """Change pixel units, e.g. factor 2 when moving to the next finer pyramid level"""
        (sx, sy), (ox, oy) = grid.spacing, grid.origin
        return ControlGrid(grid.disp * factor, (sx * factor, sy * factor), (ox * factor, oy * factor))

    # Warping

    @staticmethod
    def warp_image(img, sampling=None, field=None, width=None, height=None):
        """Backward warp: output[p] = img(sampling(p + field[p])) with validity mask"""
        if field is not None:
            if (width, height) != (None, None) and (width, height) != (field.width, field.height):
                raise DimensionMismatchError(
                    f'field is {field.width}x{field.height}, output requested {width}x{height}')
            width, height = field.width, field.height
        else:
            width = img.width if width is None else width
            height = img.height if height is None else height
        xs, ys = TransformService.pixel_lattice(width, height)
        if field is not None:
            xs = xs + field.disp[..., 0]
            ys = ys + field.disp[..., 1]
        ok = np.ones(xs.shape, dtype=bool)
        if sampling is not None:
            xs, ys, ok = TransformService.transform_points(sampling, xs, ys)
        values, valid = ImageService.sample_points(img.data, xs, ys)
        valid &= ok
        values[~valid] = 0.0
        return WarpResult(Image2D(values), BinaryMask(valid))

    # Synthetic fields

    @staticmethod
    def check_folding_guard(spacing, max_disp):
        if max_disp < 0 or max_disp >= FOLDING_GUARD * spacing:
            raise FoldingGuardError(
                f'max displacement {max_disp} px must lie in [0, {FOLDING_GUARD} x spacing '
                f'= {FOLDING_GUARD * spacing:g} px)')

    @staticmethod
    def random_deformation(seed, shape, spacing, max_disp):
        """Seeded control displacements, each component uniform in [-max_disp, max_disp]"""
        TransformService.check_folding_guard(spacing, max_disp)
        width, height = shape
        grid = ControlGrid.zeros_for(width, height, spacing)
        rng = np.random.default_rng(seed)
        disp = rng.uniform(-max_disp, max_disp, size=grid.disp.shape) if max_disp > 0 else grid.disp
        return grid.with_disp(disp)

    @staticmethod
    def invert_field(field, iterations=50, tol=1e-6):
        """Dense inverse displacement v with v(q) = -u(q + v(q)), by fixed-point iteration"""
        xs, ys = TransformService.pixel_lattice(field.width, field.height)
        u = field.disp
        inverse = -u.copy()
        for _ in range(iterations):
            coords = np.stack([ys + inverse[..., 1], xs + inverse[..., 0]])
            sampled = np.stack([
                ndimage.map_coordinates(u[..., k], coords, order=1, mode='nearest', prefilter=False)
                for k in range(2)
            ], axis=-1)
            update = -sampled
            change = float(np.abs(update - inverse).max())
            inverse = update
            if change < tol:
                break
        return DeformationField(inverse)

    # DFLD codec

    @staticmethod
    def save_field(field, path):
        with atomic_write(path) as handle:
            handle.write(FIELD_HEADER.pack(FIELD_MAGIC, field.width, field.height, 0))
            handle.write(field.disp.astype('<f4').tobytes())
        return path

    @staticmethod
    def load_field(path):
        try:
            with open(path, 'rb') as handle:
                raw = handle.read()
        except OSError as e:
            raise ImageFormatError(f'cannot read {path}: {e.strerror or e}') from None
        if len(raw) < FIELD_HEADER.size:
            raise ImageFormatError(f'{path} is too short for a DFLD header')
        magic, width, height, _ = FIELD_HEADER.unpack_from(raw)
        if magic != FIELD_MAGIC:
            raise ImageFormatError(f'{path} is not a DFLD file')
        body = raw[FIELD_HEADER.size:]
        if len(body) != width * height * 8:
            raise ImageFormatError(f'{path}: expected {width * height * 8} bytes of field data')
        disp = np.frombuffer(body, dtype='<f4').reshape(height, width, 2).astype(np.float64)
        return DeformationField(disp)
