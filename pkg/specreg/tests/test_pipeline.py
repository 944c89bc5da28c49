import math
import unittest

import numpy as np
from scipy import ndimage

from specreg.errors import DegenerateImageError, DimensionMismatchError
from specreg.models import (
    DistortionSettings, Image2D, Measure, OptimizerConfig, RegistrationConfig, SimilarityConfig, SpectralStack,
)
from specreg.services import EvaluationService, RegistrationService, TransformService


def _texture(seed, size, sigma=3.0):
    smooth = ndimage.gaussian_filter(np.random.default_rng(seed).random((size, size)), sigma)
    return Image2D((smooth - smooth.min()) / (smooth.max() - smooth.min()))


def _similarity_parts(T):
    m = T.m
    return math.sqrt(abs(np.linalg.det(m[:2, :2]))), math.atan2(m[1, 0], m[0, 0]), (m[0, 2], m[1, 2])


class PreRegistrationTestCase(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.optimizer = OptimizerConfig(pyramid_levels=2)
        self.ref = EvaluationService.document_phantom(128, 128, seed=1)

    def test_translation(self):
        """Test a shifted copy is mapped back onto the reference."""
        mov = EvaluationService.document_phantom(128, 128, seed=1, transform=TransformService.make_rigid(0.0, -10, -5))
        M = RegistrationService.pre_register(self.ref, mov, self.optimizer)
        for x, y in ((64, 64), (30, 40), (90, 95)):
            np.testing.assert_allclose(TransformService.transform_point(M, (x + 10, y + 5)), (x, y), atol=0.5)

    def test_identity(self):
        """Test identical images give the identity transform."""
        M = RegistrationService.pre_register(self.ref, self.ref, self.optimizer)
        scale, angle, shift = _similarity_parts(M)
        self.assertAlmostEqual(scale, 1.0, delta=0.01)
        self.assertLess(abs(angle), 0.01)
        self.assertLess(max(abs(shift[0]), abs(shift[1])), 0.5)

    def test_scale(self):
        """Test a half-size copy is scaled back up by two."""
        ref = EvaluationService.document_phantom(256, 256, seed=2)
        mov = EvaluationService.document_phantom(128, 128, seed=2, transform=TransformService.make_similarity(2.0, 0.0, 0, 0),
                                                 frame=(256, 256))
        scale, _, _ = _similarity_parts(RegistrationService.pre_register(ref, mov, self.optimizer))
        self.assertAlmostEqual(scale, 2.0, delta=0.04)

    def test_constant_image(self):
        """Test a constant image cannot be pre-registered."""
        with self.assertRaises(DegenerateImageError):
            RegistrationService.pre_register(self.ref, Image2D(np.full((128, 128), 0.5)), self.optimizer)


class RegisterTestCase(unittest.TestCase):

    def setUp(self):
        """Set up test fixtures before each test method."""
        self.cfg = RegistrationConfig(
            similarity=SimilarityConfig(measure=Measure.SSD),
            optimizer=OptimizerConfig(pyramid_levels=2),
            prereg_enabled=False,
            coarse_spacing=32.0,
        )
        self.ref = _texture(5, 64)

    def _identity_result(self):
        cfg = RegistrationConfig(optimizer=OptimizerConfig(max_iters=0, pyramid_levels=2), prereg_enabled=False,
                                 coarse_spacing=32.0)
        return RegistrationService.register(self.ref, self.ref, cfg)

    def test_identical_images(self):
        """Test registering an image onto itself leaves it in place."""
        result = RegistrationService.register(self.ref, self.ref, self.cfg)
        self.assertLessEqual(result.dense.magnitude().mean(), 0.1)
        self.assertEqual(result.measure, Measure.SSD)
        self.assertEqual(result.moving_size, (64, 64))

    def test_no_iterations_is_identity(self):
        """Test disabled pre-registration with no iterations is the identity."""
        result = self._identity_result()
        np.testing.assert_array_equal(result.prereg.m, np.eye(3))
        self.assertFalse(result.dense.disp.any())
        self.assertFalse(RegistrationService.total_displacement(result).disp.any())
        self.assertEqual(result.trace.total_iterations(), 0)

    def test_pyramid_clamp_reported(self):
        """Test a pyramid too deep for the image is clamped and reported in the result."""
        cfg = RegistrationConfig(optimizer=OptimizerConfig(max_iters=0, pyramid_levels=4), prereg_enabled=False,
                                 coarse_spacing=32.0)
        result = RegistrationService.register(self.ref, self.ref, cfg)
        self.assertEqual(result.to_dict()['pyramid'], {'levels': 3, 'clamped': True})
        unclamped = self._identity_result()
        self.assertEqual((unclamped.pyramid_levels, unclamped.pyramid_clamped), (2, False))

    def test_objective_does_not_increase(self):
        """Test the non-rigid stage never worsens the objective."""
        truth = TransformService.densify(TransformService.random_deformation(8, (64, 64), 32, 2.0), 64, 64)
        warped = TransformService.warp_image(self.ref, None, truth)
        mov = Image2D(np.where(warped.valid.bits, warped.image.data, 0.5))
        result = RegistrationService.register(self.ref, mov, self.cfg)
        self.assertLessEqual(result.score_after, result.score_before)
        registered = RegistrationService.registered_image(mov, result)
        self.assertEqual(registered.image.shape, self.ref.shape)

    def test_warp_stack_identity(self):
        """Test an identity result leaves every channel untouched."""
        result = self._identity_result()
        stack = SpectralStack(tuple(_texture(seed, 64) for seed in (10, 11, 12)), ('a', 'b', 'c'))
        warped, valid = RegistrationService.warp_stack(stack, result)
        self.assertEqual(len(warped), 3)
        self.assertEqual(warped.labels, ('a', 'b', 'c'))
        for before, after in zip(stack.channels, warped.channels):
            np.testing.assert_array_equal(after.data, before.data)
        self.assertTrue(valid.bits.all())

    def test_warp_stack_matches_registered_image(self):
        """Test the stack channel used for registration warps like the registered image."""
        mov = _texture(6, 64)
        result = RegistrationService.register(self.ref, mov, self.cfg)
        stack = SpectralStack((mov, _texture(7, 64)))
        warped, _ = RegistrationService.warp_stack(stack, result)
        np.testing.assert_allclose(warped.channels[0].data, RegistrationService.registered_image(mov, result).image.data,
                                   rtol=0, atol=1e-12)

    def test_warp_stack_size_mismatch(self):
        """Test a stack of another size is rejected."""
        result = self._identity_result()
        with self.assertRaises(DimensionMismatchError):
            RegistrationService.warp_stack(SpectralStack((_texture(1, 32),)), result)

    def test_recovers_noisy_eight_pixel_warp(self):
        """Test an 8 px warp with σ=0.02 noise is recovered to one pixel on the interior."""
        distortion = DistortionSettings(max_disp=8.0, spacing=32.0, noise_sigma=0.02)
        case = EvaluationService.synthesize(_texture(12, 128, sigma=4.0), 3, distortion)
        cfg = RegistrationConfig(optimizer=OptimizerConfig(pyramid_levels=3, max_iters=300), prereg_enabled=False,
                                 coarse_spacing=32.0)
        result = RegistrationService.register(case.reference, case.moving, cfg)
        mean_err, _ = EvaluationService.field_error(case.truth, RegistrationService.total_displacement(result), 0.8)
        self.assertLessEqual(mean_err, 1.0)
        self.assertLess(result.score_after, result.score_before)


if __name__ == '__main__':
    unittest.main()
