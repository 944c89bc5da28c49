import logging
import os

from specreg.controllers import Command, output_dir
from specreg.models import Image2D
from specreg.services import EvaluationService, ImageService
from specreg.utils import parse_regions_file, slugify, write_json

logger = logging.getLogger(__name__)

evaluate_cmd = Command('evaluate', 'Score registration quality per region and draw edge overlays')
evaluate_cmd.argument('--ref', required=True, help='reference image')
evaluate_cmd.argument('--before', required=True, help='moving image before non-rigid registration')
evaluate_cmd.argument('--after', required=True, help='registered image')
evaluate_cmd.argument('--regions', required=True, help='text file with "name x y w h" lines')
evaluate_cmd.argument('--out-dir', required=True, help='directory for report.json and overlays')
evaluate_cmd.argument('--percentile', type=float, default=90.0,
                      help='Sobel magnitude percentile above which a pixel is an edge')


@evaluate_cmd.route
def cmd_evaluate(args):
    """Write report.json and one edge overlay PNG per region"""
    regions = parse_regions_file(args.regions)
    out = output_dir(args.out_dir)
    ref = ImageService.load_image(args.ref)
    before = ImageService.load_image(args.before)
    after = ImageService.load_image(args.after)

    report = EvaluationService.region_report(ref, before, after, regions)
    write_json(os.path.join(out, 'report.json'), report.to_dict())

    for index, region in enumerate(regions, start=1):
        rows, cols = region.slices()
        rgb = EvaluationService.overlay(Image2D(ref.data[rows, cols]), Image2D(after.data[rows, cols]),
                                        mode='edges', percentile=args.percentile)
        path = os.path.join(out, f'overlay_{index:02d}_{slugify(region.name)}.png')
        EvaluationService.save_rgb(rgb, path)
        logger.info('Wrote %s', path)
    return 0
