import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from specreg.errors import DimensionMismatchError, DomainError, FoldingGuardError, ImageFormatError
from specreg.models import ControlGrid, DeformationField, HomogeneousTransform2D, Image2D
from specreg.services import TransformService
from specreg.services.transform_service import FIELD_HEADER


def _cubic_bspline(t):
    t = abs(t)
    if t < 1:
        return 2.0 / 3.0 - t * t + t ** 3 / 2.0
    if t < 2:
        return (2.0 - t) ** 3 / 6.0
    return 0.0


class TransformServiceTestCase(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.rng = np.random.default_rng(11)
        self.grid = ControlGrid.zeros_for(64, 48, 16).with_disp(
            self.rng.uniform(-3, 3, size=ControlGrid.zeros_for(64, 48, 16).disp.shape))

    def test_transform_point(self):
        """Test homogeneous mapping of single points."""
        identity = HomogeneousTransform2D.identity()
        self.assertEqual(TransformService.transform_point(identity, (7, -2)), (7.0, -2.0))
        shift = TransformService.make_rigid(0.0, 2, -3)
        self.assertEqual(TransformService.transform_point(shift, (0, 0)), (2.0, -3.0))
        projective = HomogeneousTransform2D([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        self.assertEqual(TransformService.transform_point(projective, (1, 1)), (0.5, 0.5))
        vanishing = HomogeneousTransform2D([[1, 0, 0], [0, 1, 0], [1, 0, 0]])
        with self.assertRaises(DomainError):
            TransformService.transform_point(vanishing, (0, 5))

    def test_compose_order(self):
        """Test composition applies the first transform first and is associative."""
        a = TransformService.make_rigid(0.3, 1, 2)
        b = TransformService.make_similarity(1.5, 0.0, -4, 0)
        c = TransformService.make_affine(1, 0.2, 0, 1, 3, 3)
        p = (2.0, -1.0)
        ab = TransformService.compose(a, b)
        expected = TransformService.transform_point(b, TransformService.transform_point(a, p))
        np.testing.assert_allclose(TransformService.transform_point(ab, p), expected, atol=1e-12)
        left = TransformService.compose(TransformService.compose(a, b), c)
        right = TransformService.compose(a, TransformService.compose(b, c))
        np.testing.assert_allclose(left.m, right.m, atol=1e-12)
        self.assertFalse(np.allclose(ab.m, TransformService.compose(b, a).m))

    def test_invert(self):
        """Test inversion round trip and singular matrices."""
        T = TransformService.make_similarity(2.0, 0.4, 5, -7)
        p = TransformService.transform_point(TransformService.compose(T, TransformService.invert(T)), (3, 4))
        np.testing.assert_allclose(p, (3, 4), atol=1e-12)
        with self.assertRaises(DomainError):
            TransformService.invert(HomogeneousTransform2D(np.zeros((3, 3))))

    def test_rigid_and_affine(self):
        """Test quarter turns, preserved distances, shear and singular affine matrices."""
        quarter = TransformService.make_rigid(math.pi / 2, 0, 0)
        np.testing.assert_allclose(TransformService.transform_point(quarter, (1, 0)), (0, 1), atol=1e-12)
        rigid = TransformService.make_rigid(0.7, 3, -2)
        p, q = (1.0, 2.0), (-4.0, 5.5)
        tp = TransformService.transform_point(rigid, p)
        tq = TransformService.transform_point(rigid, q)
        self.assertAlmostEqual(math.dist(tp, tq), math.dist(p, q), places=12)

        shear = TransformService.make_affine(1, 2, 0, 1, 0, 0)
        self.assertEqual(TransformService.transform_point(shear, (0, 1)), (2.0, 1.0))
        with self.assertRaises(DomainError):
            TransformService.make_affine(1, 2, 2, 4, 0, 0)

    def test_scale_to_level(self):
        """Test a transform expressed at a coarser level agrees with the full-resolution one."""
        T = TransformService.make_similarity(1.1, 0.2, 6, -4)
        coarse = TransformService.scale_to_level(T, 2)
        x, y = TransformService.transform_point(coarse, (5, 3))
        np.testing.assert_allclose((x * 4, y * 4), TransformService.transform_point(T, (20, 12)), atol=1e-12)

    def test_bspline_weights(self):
        """Test basis values at the cell ends and partition of unity."""
        np.testing.assert_allclose(TransformService.bspline_weights(0.0), (1 / 6, 2 / 3, 1 / 6, 0), atol=1e-15)
        np.testing.assert_allclose(TransformService.bspline_weights(1 - 1e-12), (0, 1 / 6, 2 / 3, 1 / 6),
                                   atol=1e-9)
        for u in self.rng.random(1000):
            self.assertAlmostEqual(sum(TransformService.bspline_weights(u)), 1.0, places=12)
        with self.assertRaises(DomainError):
            TransformService.bspline_weights(1.0)

    def test_ffd_matches_brute_force(self):
        """Test the 4x4 support sum equals a sum over every control point."""
        (sx, sy), (ox, oy) = self.grid.spacing, self.grid.origin
        for x, y in zip(self.rng.uniform(0, 63, 20), self.rng.uniform(0, 47, 20)):
            expected = np.zeros(2)
            for b in range(self.grid.ny):
                for a in range(self.grid.nx):
                    weight = _cubic_bspline((x - ox - a * sx) / sx) * _cubic_bspline((y - oy - b * sy) / sy)
                    expected += weight * self.grid.disp[b, a]
            np.testing.assert_allclose(TransformService.ffd_displacement(self.grid, x, y), expected, atol=1e-12)

    def test_ffd_constant_and_support(self):
        """Test a constant grid reproduces its displacement and queries off the support fail."""
        grid = ControlGrid.zeros_for(32, 32, 16)
        self.assertEqual(TransformService.ffd_displacement(grid, 10, 10), (0.0, 0.0))
        shifted = grid.with_disp(np.broadcast_to([1.5, -2.0], grid.disp.shape))
        field = TransformService.densify(shifted, 32, 32)
        np.testing.assert_allclose(field.disp[..., 0], 1.5, atol=1e-12)
        np.testing.assert_allclose(field.disp[..., 1], -2.0, atol=1e-12)
        with self.assertRaises(DomainError):
            TransformService.ffd_displacement(grid, 32, 5)
        with self.assertRaises(DomainError):
            TransformService.ffd_displacement(grid, -0.5, 5)

    def test_densify_spot_check(self):
        """Test dense fields agree with pointwise evaluation."""
        field = TransformService.densify(self.grid, 64, 48)
        for x, y in zip(self.rng.integers(0, 64, 100), self.rng.integers(0, 48, 100)):
            np.testing.assert_allclose(field.disp[y, x], TransformService.ffd_displacement(self.grid, x, y),
                                       atol=1e-12)

    def test_warp_identity(self):
        """Test warping with nothing returns the input with a full mask."""
        img = Image2D(self.rng.random((12, 10)))
        warped = TransformService.warp_image(img, HomogeneousTransform2D.identity(), DeformationField.zeros(10, 12))
        np.testing.assert_array_equal(warped.image.data, img.data)
        self.assertTrue(warped.valid.bits.all())

    def test_warp_translation(self):
        """Test a translated sampling shifts content and marks outside samples invalid."""
        img = Image2D(self.rng.random((10, 12)))
        warped = TransformService.warp_image(img, TransformService.make_rigid(0.0, 2, -3))
        expected_valid = np.zeros((10, 12), dtype=bool)
        expected_valid[3:, :10] = True
        np.testing.assert_array_equal(warped.valid.bits, expected_valid)
        np.testing.assert_allclose(warped.image.data[3:, :10], img.data[:7, 2:], atol=1e-12)
        self.assertTrue(np.all(warped.image.data[~expected_valid] == 0))

        half = TransformService.warp_image(img, TransformService.make_rigid(0.0, 6, 0))
        self.assertEqual(half.valid.count(), 60)
        self.assertTrue(half.valid.bits[:, :6].all())

    def test_warp_field_dimension_check(self):
        """Test a field of the wrong size is rejected."""
        img = Image2D(np.zeros((8, 8)))
        with self.assertRaises(DimensionMismatchError):
            TransformService.warp_image(img, None, DeformationField.zeros(8, 8), width=4, height=8)

    def test_refine_preserves_field(self):
        """Test grid refinement halves the spacing without changing the field."""
        zero = TransformService.refine_grid(ControlGrid.zeros_for(64, 64, 32))
        self.assertEqual(zero.spacing, (16.0, 16.0))
        self.assertFalse(zero.disp.any())

        refined = TransformService.refine_grid(self.grid)
        self.assertEqual(refined.spacing, (8.0, 8.0))
        self.assertEqual(refined.nx, 2 * self.grid.nx - 3)
        self.assertTrue(TransformService.covers(refined, 64, 48))
        before = TransformService.densify(self.grid, 64, 48).disp
        after = TransformService.densify(refined, 64, 48).disp
        self.assertLess(np.abs(before - after).max(), 1e-6)

    def test_level_transition(self):
        """Test refine, rescale and pad carry a coarse field onto the finer lattice."""
        coarse = TransformService.densify(self.grid, 64, 48).disp
        fine = TransformService.pad_to_cover(
            TransformService.rescale_grid(TransformService.refine_grid(self.grid), 2.0), 128, 96)
        self.assertTrue(TransformService.covers(fine, 128, 96))
        dense = TransformService.densify(fine, 128, 96).disp
        np.testing.assert_allclose(dense[::2, ::2], 2.0 * coarse, atol=1e-9)

    def test_random_deformation(self):
        """Test seeded deformations are reproducible, bounded and fold-free."""
        a = TransformService.random_deformation(42, (64, 64), 16, 6.3)
        b = TransformService.random_deformation(42, (64, 64), 16, 6.3)
        np.testing.assert_array_equal(a.disp, b.disp)
        self.assertFalse(np.array_equal(a.disp, TransformService.random_deformation(43, (64, 64), 16, 6.3).disp))
        self.assertFalse(TransformService.random_deformation(1, (64, 64), 16, 0).disp.any())

        dense = TransformService.densify(a, 64, 64).disp
        self.assertLessEqual(np.abs(dense).max(), 6.3 + 1e-12)
        self.assertTrue(np.all(np.diff(np.arange(64)[None, :] + dense[..., 0], axis=1) > 0))
        self.assertTrue(np.all(np.diff(np.arange(64)[:, None] + dense[..., 1], axis=0) > 0))

        with self.assertRaises(FoldingGuardError):
            TransformService.random_deformation(0, (64, 64), 16, 6.4)
        with self.assertRaises(FoldingGuardError):
            TransformService.random_deformation(0, (64, 64), 16, -1)

    def test_invert_field(self):
        """Test the inverse field undoes the forward one on the interior."""
        grid = TransformService.random_deformation(5, (64, 64), 32, 3)
        inverse = TransformService.invert_field(TransformService.densify(grid, 64, 64)).disp
        xs, ys = TransformService.pixel_lattice(64, 64)
        inner = (slice(8, -8), slice(8, -8))
        forward = TransformService.ffd_displacements(
            grid, xs[inner] + inverse[inner][..., 0], ys[inner] + inverse[inner][..., 1])
        self.assertLess(np.abs(inverse[inner] + forward).max(), 0.05)

    def test_field_codec(self):
        """Test DFLD files round trip with the documented header."""
        tmp = tempfile.mkdtemp()
        try:
            field = DeformationField(self.rng.uniform(-5, 5, size=(6, 9, 2)).astype(np.float32))
            path = TransformService.save_field(field, os.path.join(tmp, 'field.dfld'))
            with open(path, 'rb') as handle:
                raw = handle.read()
            self.assertEqual(FIELD_HEADER.unpack_from(raw), (b'DFLD', 9, 6, 0))
            self.assertEqual(len(raw), FIELD_HEADER.size + 9 * 6 * 8)
            np.testing.assert_array_equal(TransformService.load_field(path).disp, field.disp)

            bad = os.path.join(tmp, 'bad.dfld')
            with open(bad, 'wb') as handle:
                handle.write(b'NOPE' + raw[4:])
            with self.assertRaises(ImageFormatError):
                TransformService.load_field(bad)
        finally:
            shutil.rmtree(tmp)


if __name__ == '__main__':
    unittest.main()
