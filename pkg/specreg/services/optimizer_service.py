import logging
from dataclasses import replace

import numpy as np

from specreg.errors import DegenerateImageError, DomainError, EmptyRegionError, OptimizationError
from specreg.models import ControlGrid, OptimizerTrace, TraceEntry
from specreg.services.image_service import ImageService
from specreg.services.similarity_service import SimilarityService
from specreg.services.transform_service import TransformService

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-9


def _downsample_region(region, level):
    if region is None or level == 0:
        return region
    factor = 2 ** level
    return type(region)(region.bits[::factor, ::factor])


class OptimizerService:

    @staticmethod
    def minimize(objective, grad, x0, cfg, trace=None, level=0):
        """Steepest descent with Armijo backtracking.

        Returns the best parameter vector seen and the trace, whose newest level holds
        one entry for the start point followed by one entry per accepted step.
        """
        trace = OptimizerTrace() if trace is None else trace
        record = trace.start_level(level)

        x = np.array(x0, dtype=np.float64)
        f = float(objective(x))
        if not np.isfinite(f):
            raise OptimizationError(f'objective is not finite at the starting point: {f}')
        g = np.asarray(grad(x), dtype=np.float64)
        g_norm = float(np.linalg.norm(g))
        record.entries.append(TraceEntry(0, f, 0.0, g_norm))

        for iteration in range(1, cfg.max_iters + 1):
            if not np.isfinite(g_norm):
                logger.warning('Level %d: gradient is not finite, stopping', level)
                record.aborted = True
                break
            if g_norm < GRAD_TOL:
                break

            step, accepted = cfg.initial_step, None
            while step >= cfg.min_step:
                candidate = x - step * g
                value = float(objective(candidate))
                if np.isnan(value) or value == -np.inf:
                    logger.warning('Level %d: objective became non-finite at step %g, aborting', level, step)
                    record.aborted = True
                    return x, trace
                # +inf: the trial left the measurable overlap, try a shorter step
                if value < f and value <= f - cfg.armijo * step * g_norm ** 2:
                    accepted = (candidate, value)
                    break
                step *= cfg.backtrack_factor
            if accepted is None:
                logger.debug('Level %d: no step above %g decreases the objective', level, cfg.min_step)
                break

            improvement = (f - accepted[1]) / max(abs(f), np.finfo(float).tiny)
            x, f = accepted
            g = np.asarray(grad(x), dtype=np.float64)
            g_norm = float(np.linalg.norm(g))
            record.entries.append(TraceEntry(iteration, f, step, g_norm))
            logger.debug('Level %d iter %d: objective %.6g step %.3g |g| %.3g',
                         level, iteration, f, step, g_norm)
            if improvement < cfg.rel_tol:
                break
        return x, trace

    @staticmethod
    def schedule(ref, mov, cfg, sim, coarse_spacing, sampling=None, region=None):
        """Coarse-to-fine B-spline optimisation.

        ``sampling`` maps reference-frame points into the moving image at full
        resolution. Returns the final full-resolution ControlGrid and the trace.
        """
        depth = min(ImageService.pyramid_depth(ref.width, ref.height, cfg.pyramid_levels),
                    ImageService.pyramid_depth(mov.width, mov.height, cfg.pyramid_levels))
        if depth < cfg.pyramid_levels:
            logger.warning('Pyramid clamped to %d levels for %dx%d images', depth, ref.width, ref.height)
        ref_pyramid = ImageService.build_pyramid(ref, depth)
        mov_pyramid = ImageService.build_pyramid(mov, depth)

        top = depth - 1
        coarse = ref_pyramid[top]
        grid = ControlGrid.zeros_for(coarse.width, coarse.height, coarse_spacing / 2 ** top)
        trace = OptimizerTrace()

        for level in range(top, -1, -1):
            I, J = ref_pyramid[level], mov_pyramid[level]
            pre = TransformService.scale_to_level(sampling, level) if sampling is not None else None
            sim_level = sim.for_level(level, I.width, I.height)
            region_level = _downsample_region(region, level)
            logger.info('Level %d: %dx%d, %dx%d control points, spacing %.3g px',
                        level, I.width, I.height, grid.nx, grid.ny, grid.spacing[0])

            def objective(x, grid=grid):
                try:
                    return SimilarityService.objective(sim_level, I, J, pre, grid.with_disp(x), region_level)
                except (EmptyRegionError, DegenerateImageError, DomainError):
                    return np.inf

            def gradient(x, grid=grid):
                return SimilarityService.gradient(sim_level, I, J, pre, grid.with_disp(x), region_level)

            x0 = grid.parameters()
            zero = np.zeros_like(x0)
            if level < top and objective(zero) < objective(x0):
                logger.warning('Level %d: carried deformation is worse than none, restarting from zero', level)
                x0 = zero

            # normalise so that the initial step moves the steepest control point by ~1 px
            scale = float(np.max(np.abs(gradient(x0))))
            scale = scale if np.isfinite(scale) and scale > 0 else 1.0
            x, trace = OptimizerService.minimize(
                lambda x: objective(x) / scale, lambda x: gradient(x) / scale, x0, cfg, trace, level)
            record = trace.levels[-1]
            record.entries = [replace(e, objective=e.objective * scale, grad_norm=e.grad_norm * scale)
                              for e in record.entries]
            logger.info('Level %d: %d iterations, objective %.6g -> %.6g', level, record.iterations,
                        record.entries[0].objective, record.entries[-1].objective)

            grid = grid.with_disp(x)
            if level > 0:
                finer = ref_pyramid[level - 1]
                grid = TransformService.rescale_grid(TransformService.refine_grid(grid), 2.0)
                grid = TransformService.pad_to_cover(grid, finer.width, finer.height)
        return grid, trace
