import logging
import os

from specreg.controllers import Command
from specreg.errors import DimensionMismatchError
from specreg.services import EvaluationService, ImageService

logger = logging.getLogger(__name__)

overlay_cmd = Command('overlay', 'Draw an edge or false-colour overlay of two images')
overlay_cmd.argument('--ref', required=True, help='reference image')
overlay_cmd.argument('--image', required=True, help='image to compare, usually the registered one')
overlay_cmd.argument('--out', required=True, help='output PNG path')
overlay_cmd.argument('--mode', choices=['edges', 'falsecolor'], default='edges')
overlay_cmd.argument('--percentile', type=float, default=90.0)


@overlay_cmd.route
def cmd_overlay(args):
    ref = ImageService.load_image(args.ref)
    img = ImageService.load_image(args.image)
    if ref.shape != img.shape:
        raise DimensionMismatchError(f'{args.image} does not match the reference dimensions')
    rgb = EvaluationService.overlay(ref, img, mode=args.mode, percentile=args.percentile)
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    EvaluationService.save_rgb(rgb, args.out)
    logger.info('Wrote %s', args.out)
    return 0
