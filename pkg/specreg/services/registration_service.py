import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from specreg.config import Config
from specreg.errors import DegenerateImageError, DimensionMismatchError, DomainError, EmptyRegionError
from specreg.models import (
    ControlGrid, DeformationField, HomogeneousTransform2D, Measure, OptimizerConfig, RegistrationResult,
    SimilarityConfig, SpectralStack,
)
from specreg.services.image_service import ImageService
from specreg.services.optimizer_service import OptimizerService
from specreg.services.similarity_service import SimilarityService
from specreg.services.transform_service import TransformService

logger = logging.getLogger(__name__)

PREREG_FD_STEP = 0.1
PREREG_ROUNDS = 5
_PREREG_MEASURE = SimilarityConfig(measure=Measure.CC)


def _foreground_geometry(img):
    """Centroid and bounding-box diagonal of the dark Otsu foreground"""
    mask = ImageService.otsu_mask(img, foreground='dark')
    ys, xs = np.nonzero(mask.bits)
    if xs.size == 0:
        raise EmptyRegionError('Otsu foreground is empty')
    diagonal = math.hypot(float(xs.max() - xs.min()), float(ys.max() - ys.min()))
    return np.array([xs.mean(), ys.mean()]), diagonal


def _require_contrast(img, name):
    if float(img.data.max()) == float(img.data.min()):
        raise DegenerateImageError(f'{name} image is constant')


class RegistrationService:

    @staticmethod
    def pre_register(ref, mov, optimizer=None):
        """Similarity transform mapping moving-frame points onto the reference frame.

        Initialised from the Otsu foreground centroids and bounding-box diagonals,
        then refined on negated cross-correlation at the coarsest pyramid level.
        """
        _require_contrast(ref, 'reference')
        _require_contrast(mov, 'moving')
        ref = ImageService.normalize_minmax(ref)
        mov = ImageService.normalize_minmax(mov)
        optimizer = optimizer or OptimizerConfig()

        c_ref, d_ref = _foreground_geometry(ref)
        c_mov, d_mov = _foreground_geometry(mov)
        scale0 = d_ref / d_mov if d_mov > 0 and d_ref > 0 else 1.0
        shift0 = c_ref - scale0 * c_mov
        logger.info('Pre-registration start: scale %.4f, shift (%.2f, %.2f)', scale0, *shift0)

        depth = min(ImageService.pyramid_depth(ref.width, ref.height, optimizer.pyramid_levels),
                    ImageService.pyramid_depth(mov.width, mov.height, optimizer.pyramid_levels))
        I = ImageService.build_pyramid(ref, depth)[-1]
        J = ImageService.build_pyramid(mov, depth)[-1]
        factor = 2.0 ** (depth - 1)
        # rotation and log-scale parameters are arc lengths in pixels at this radius
        radius = 0.5 * math.hypot(I.width, I.height)

        def transform(x):
            return TransformService.make_similarity(
                math.exp(x[3] / radius), x[2] / radius, x[0], x[1])

        def objective(x):
            try:
                sampling = TransformService.invert(transform(x))
                warped = TransformService.warp_image(J, sampling, width=I.width, height=I.height)
                return SimilarityService.evaluate(_PREREG_MEASURE, I, warped)
            except (EmptyRegionError, DegenerateImageError, DomainError):
                return np.inf

        def gradient(x):
            g = np.zeros(4)
            for k in range(4):
                e = np.zeros(4)
                e[k] = PREREG_FD_STEP
                g[k] = (objective(x + e) - objective(x - e)) / (2.0 * PREREG_FD_STEP)
            return g

        x = np.array([shift0[0] / factor, shift0[1] / factor, 0.0, radius * math.log(scale0)])
        for _ in range(PREREG_ROUNDS):
            scale = float(np.max(np.abs(gradient(x))))
            if not np.isfinite(scale) or scale == 0:
                break
            x, trace = OptimizerService.minimize(
                lambda v: objective(v) / scale, lambda v: gradient(v) / scale, x, optimizer)
            if trace.levels[-1].iterations == 0:
                break

        coarse = transform(x).m
        up = np.diag([factor, factor, 1.0])
        down = np.diag([1.0 / factor, 1.0 / factor, 1.0])
        result = HomogeneousTransform2D(up @ coarse @ down)
        logger.info('Pre-registration: scale %.4f, angle %.4f rad, shift (%.2f, %.2f)',
                    math.exp(x[3] / radius), x[2] / radius, result.m[0, 2], result.m[1, 2])
        return result

    @staticmethod
    def register(ref, mov, cfg):
        """Pre-registration (optional) followed by coarse-to-fine B-spline refinement"""
        _require_contrast(ref, 'reference')
        _require_contrast(mov, 'moving')
        ref_n = ImageService.normalize_minmax(ref)
        mov_n = ImageService.normalize_minmax(mov)

        if cfg.prereg_enabled:
            prereg = RegistrationService.pre_register(ref_n, mov_n, cfg.optimizer)
        else:
            prereg = HomogeneousTransform2D.identity()
        sampling = TransformService.invert(prereg)

        zero = ControlGrid.zeros_for(ref_n.width, ref_n.height, cfg.coarse_spacing)
        score_before = SimilarityService.objective(cfg.similarity, ref_n, mov_n, sampling, zero)
        logger.info('Objective after pre-registration (%s): %.6g', cfg.similarity.measure.value, score_before)

        grid, trace = OptimizerService.schedule(
            ref_n, mov_n, cfg.optimizer, cfg.similarity, cfg.coarse_spacing, sampling)
        score_after = SimilarityService.objective(cfg.similarity, ref_n, mov_n, sampling, grid)
        logger.info('Objective after non-rigid refinement: %.6g (%d iterations)',
                    score_after, trace.total_iterations())

        return RegistrationResult(
            prereg=prereg,
            sampling=sampling,
            grid=grid,
            dense=TransformService.densify(grid, ref_n.width, ref_n.height),
            trace=trace,
            score_before=score_before,
            score_after=score_after,
            measure=cfg.similarity.measure,
            moving_size=(mov.width, mov.height),
            pyramid_levels=len(trace.levels),
            pyramid_clamped=len(trace.levels) < cfg.optimizer.pyramid_levels,
        )

    @staticmethod
    def registered_image(mov, result):
        """Moving image resampled onto the reference lattice"""
        return TransformService.warp_image(mov, result.sampling, result.dense)

    @staticmethod
    def warp_stack(stack, result):
        """Warp every channel with the same transform; returns the stack and shared validity"""
        if result.moving_size is not None and (stack.width, stack.height) != tuple(result.moving_size):
            raise DimensionMismatchError(
                f'stack is {stack.width}x{stack.height}, registration used '
                f'{result.moving_size[0]}x{result.moving_size[1]}')
        with ThreadPoolExecutor(max_workers=Config.THREADS) as executor:
            warped = list(executor.map(
                lambda channel: RegistrationService.registered_image(channel, result), stack.channels))
        logger.info('Warped %d channels', len(warped))
        return SpectralStack(tuple(w.image for w in warped), stack.labels), warped[0].valid

    @staticmethod
    def total_displacement(result):
        """Effective displacement M⁻¹(p + u(p)) − p of pre-registration plus the dense field"""
        xs, ys = TransformService.pixel_lattice(result.dense.width, result.dense.height)
        tx, ty, _ = TransformService.transform_points(
            result.sampling, xs + result.dense.disp[..., 0], ys + result.dense.disp[..., 1])
        return DeformationField(np.stack([tx - xs, ty - ys], axis=-1))

