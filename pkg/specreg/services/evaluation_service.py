import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from specreg.config import Config
from specreg.errors import DegenerateImageError, DimensionMismatchError, EmptyRegionError, UsageError
from specreg.models import (
    DeformationField, EvaluationReport, HomogeneousTransform2D, Image2D, RegionRow,
    RegionSpec, SyntheticCase,
)
from specreg.services.image_service import ImageService
from specreg.services.registration_service import RegistrationService
from specreg.services.transform_service import TransformService
from specreg.utils import atomic_write

logger = logging.getLogger(__name__)

RED = (255, 0, 0)
GREEN = (0, 255, 0)
BLUE = (0, 0, 255)
WHITE = (255, 255, 255)

FULL_AREA = 'Full area'


def _overlap_counts(P, S):
    if P.shape != S.shape:
        raise DimensionMismatchError(f'masks are {P.width}x{P.height} and {S.width}x{S.height}')
    both = np.count_nonzero(P.bits & S.bits)
    either = np.count_nonzero(P.bits | S.bits)
    if either == 0:
        raise EmptyRegionError('overlap is undefined for two empty masks')
    return both, either, P.count() + S.count()


def _to_uint8(values):
    return np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


class EvaluationService:

    @staticmethod
    def dice(P, S):
        """2|P∩S| / (|P| + |S|)"""
        both, _, total = _overlap_counts(P, S)
        return 2.0 * both / total

    @staticmethod
    def relative_overlap(P, S):
        """|P∩S| / |P∪S| (Jaccard)"""
        both, either, _ = _overlap_counts(P, S)
        return both / either

    @staticmethod
    def edge_overlay(ref_edges, reg_edges):
        """RGB overlay: red reference only, blue registered only, green shared, white neither"""
        if ref_edges.shape != reg_edges.shape:
            raise DimensionMismatchError('edge maps must share dimensions')
        a, b = ref_edges.bits, reg_edges.bits
        rgb = np.empty(a.shape + (3,), dtype=np.uint8)
        rgb[...] = WHITE
        rgb[a & ~b] = RED
        rgb[~a & b] = BLUE
        rgb[a & b] = GREEN
        return rgb

    @staticmethod
    def false_color_overlay(ref, img):
        """Reference in the red channel, registered image in green and blue"""
        if ref.shape != img.shape:
            raise DimensionMismatchError('images must share dimensions')
        red, cyan = _to_uint8(ref.data), _to_uint8(img.data)
        return np.stack([red, cyan, cyan], axis=-1)

    @staticmethod
    def overlay(ref, img, mode='edges', percentile=90.0):
        if mode == 'edges':
            return EvaluationService.edge_overlay(
                ImageService.sobel_edge_map(ref, percentile), ImageService.sobel_edge_map(img, percentile))
        if mode == 'falsecolor':
            return EvaluationService.false_color_overlay(ref, img)
        raise UsageError(f'unknown overlay mode {mode!r}')

    @staticmethod
    def save_rgb(rgb, path):
        with atomic_write(path) as handle:
            Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(handle, format='PNG')
        return path

    @staticmethod
    def region_row(ref, before, after, region):
        rows, cols = region.slices()
        ref_mask = ImageService.otsu_mask(Image2D(ref.data[rows, cols]))
        before_mask = ImageService.otsu_mask(Image2D(before.data[rows, cols]))
        after_mask = ImageService.otsu_mask(Image2D(after.data[rows, cols]))
        return RegionRow(
            name=region.name,
            dsc_before=EvaluationService.dice(ref_mask, before_mask),
            dsc_after=EvaluationService.dice(ref_mask, after_mask),
            relative_overlap_after=EvaluationService.relative_overlap(ref_mask, after_mask),
        )

    @staticmethod
    def region_report(ref, before, after, regions, measure=None):
        """Otsu dark-foreground Dice before/after and relative overlap after, per region"""
        if not (ref.shape == before.shape == after.shape):
            raise DimensionMismatchError('reference, before and after images must share dimensions')
        for region in regions:
            if not region.fits(ref.width, ref.height):
                raise UsageError(f'region {region.name!r} {region.rect} lies outside the '
                                 f'{ref.width}x{ref.height} image')
        with ThreadPoolExecutor(max_workers=Config.THREADS) as executor:
            rows = list(executor.map(
                lambda region: EvaluationService.region_row(ref, before, after, region), regions))
        for row in rows:
            logger.info('%s: DSC %.4f -> %.4f, RO %.4f', row.name, row.dsc_before, row.dsc_after,
                        row.relative_overlap_after)
        return EvaluationReport(rows=tuple(rows), measure=measure)

    @staticmethod
    def interior_slices(width, height, interior_fraction):
        """Centred box holding ``interior_fraction`` of the area (each side scaled by its root)"""
        if not 0 < interior_fraction <= 1:
            raise UsageError(f'interior fraction must lie in (0, 1], got {interior_fraction}')
        side = math.sqrt(interior_fraction)
        w = max(1, int(round(width * side)))
        h = max(1, int(round(height * side)))
        x0, y0 = (width - w) // 2, (height - h) // 2
        return slice(y0, y0 + h), slice(x0, x0 + w)

    @staticmethod
    def field_error(truth, recovered, interior_fraction=0.8):
        """(mean, max) endpoint error in pixels over the centred interior"""
        if truth.disp.shape != recovered.disp.shape:
            raise DimensionMismatchError(
                f'fields are {truth.width}x{truth.height} and {recovered.width}x{recovered.height}')
        rows, cols = EvaluationService.interior_slices(truth.width, truth.height, interior_fraction)
        diff = truth.disp[rows, cols] - recovered.disp[rows, cols]
        error = np.hypot(diff[..., 0], diff[..., 1])
        return float(error.mean()), float(error.max())

    @staticmethod
    def check_distortion(seed, distortion):
        """Refuse negative seeds and deformations that could fold"""
        if seed < 0:
            raise UsageError(f'seed must be non-negative, got {seed}')
        TransformService.check_folding_guard(distortion.spacing, distortion.max_disp)

    @staticmethod
    def synthesize(img, seed, distortion):
        """Deform, misalign and degrade ``img`` with a seeded, known transformation"""
        if float(img.data.max()) == float(img.data.min()):
            raise DegenerateImageError('synthetic validation needs a non-constant image')
        EvaluationService.check_distortion(seed, distortion)
        reference = ImageService.normalize_minmax(img)
        width, height = reference.width, reference.height
        fill = float(np.median(reference.data))

        grid = TransformService.random_deformation(seed, (width, height), distortion.spacing, distortion.max_disp)
        truth = TransformService.densify(grid, width, height)
        # moving(q) = reference(q + v(q)) with v the inverse of the truth field
        warped = TransformService.warp_image(reference, None, TransformService.invert_field(truth))
        moving = np.where(warped.valid.bits, warped.image.data, fill)

        rigid = HomogeneousTransform2D.identity()
        if distortion.rotation_deg or any(distortion.shift):
            cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
            rigid = TransformService.compose(
                TransformService.make_rigid(0.0, -cx, -cy),
                TransformService.make_rigid(math.radians(distortion.rotation_deg),
                                            cx + distortion.shift[0], cy + distortion.shift[1]))
            misaligned = TransformService.warp_image(Image2D(moving), rigid)
            moving = np.where(misaligned.valid.bits, misaligned.image.data, fill)
            xs, ys = TransformService.pixel_lattice(width, height)
            tx, ty, _ = TransformService.transform_points(
                TransformService.invert(rigid), xs + truth.disp[..., 0], ys + truth.disp[..., 1])
            truth = DeformationField(np.stack([tx - xs, ty - ys], axis=-1))

        rng = np.random.default_rng([seed, 1])
        if distortion.bias_amplitude > 0:
            phase_x, phase_y = rng.uniform(0.0, 2.0 * math.pi, size=2)
            xs, ys = TransformService.pixel_lattice(width, height)
            bias = 1.0 + distortion.bias_amplitude * (
                np.sin(2.0 * math.pi * xs / width + phase_x) * np.cos(2.0 * math.pi * ys / height + phase_y))
            moving = moving * bias
        if distortion.noise_sigma > 0:
            moving = moving + rng.normal(0.0, distortion.noise_sigma, size=moving.shape)

        return SyntheticCase(
            reference=reference,
            moving=Image2D(np.clip(moving, 0.0, 1.0)),
            truth=truth,
            grid=grid,
            rigid=rigid,
            seed=seed,
        )

    @staticmethod
    def validate_case(case, cfg, distortion):
        """Register a synthetic case and score it against its known field"""
        result = RegistrationService.register(case.reference, case.moving, cfg)
        recovered = RegistrationService.total_displacement(result)
        mean_err, max_err = EvaluationService.field_error(case.truth, recovered, distortion.interior_fraction)
        logger.info('Field error: mean %.3f px, max %.3f px', mean_err, max_err)

        before = TransformService.warp_image(case.moving, result.sampling).image
        after = RegistrationService.registered_image(case.moving, result).image
        full = RegionSpec(FULL_AREA, (0, 0, case.reference.width, case.reference.height))
        report = EvaluationService.region_report(case.reference, before, after, [full])
        report = EvaluationReport(rows=report.rows, field_mean_err_px=mean_err,
                                  field_max_err_px=max_err, measure=result.measure.value)
        return report, result

    @staticmethod
    def synthetic_validation(img, seed, cfg, distortion):
        case = EvaluationService.synthesize(img, seed, distortion)
        report, _ = EvaluationService.validate_case(case, cfg, distortion)
        return report

    @staticmethod
    def document_phantom(width, height, seed=0, transform=None, frame=None):
        """Procedural document-like test image: dark pen strokes and blots on light paper.

        ``transform`` maps output pixels into the canonical ``frame`` (width, height;
        defaults to the output size), so shifted or rescaled copies are rendered
        exactly instead of resampled. Strokes stay 15% away from the frame border.
        """
        rng = np.random.default_rng(seed)
        width_out, height_out = width, height
        if frame is not None:
            width, height = frame
        xs, ys = TransformService.pixel_lattice(width_out, height_out)
        if transform is not None:
            xs, ys, _ = TransformService.transform_points(transform, xs, ys)

        paper = 0.85 + 0.04 * np.sin(xs / 37.0) * np.cos(ys / 23.0)
        ink = np.zeros(xs.shape)
        low = np.array([0.15 * width, 0.15 * height])
        high = np.array([0.85 * width, 0.85 * height])
        reach = 0.25 * min(width, height)

        strokes = max(12, int(round(100 * width * height / 512.0 ** 2)))
        for _ in range(strokes):
            start = rng.uniform(low, high)
            end = np.clip(start + rng.uniform(-reach, reach, size=2), low, high)
            thickness = rng.uniform(1.2, 2.5)
            seg = end - start
            length2 = max(float(seg @ seg), 1e-12)
            t = np.clip(((xs - start[0]) * seg[0] + (ys - start[1]) * seg[1]) / length2, 0.0, 1.0)
            d2 = (xs - start[0] - t * seg[0]) ** 2 + (ys - start[1] - t * seg[1]) ** 2
            ink = np.maximum(ink, np.exp(-d2 / thickness ** 2))

        blots = max(2, strokes // 8)
        for _ in range(blots):
            centre = rng.uniform(low + reach / 3, high - reach / 3)
            radii = rng.uniform(0.2, 0.33, size=2) * reach
            r = np.hypot((xs - centre[0]) / radii[0], (ys - centre[1]) / radii[1])
            ink = np.maximum(ink, 0.8 / (1.0 + np.exp((r - 1.0) * 12.0)))

        return Image2D(np.clip(paper - 0.7 * ink, 0.0, 1.0))
