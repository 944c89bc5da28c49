import logging
import os

from specreg.controllers import Command, add_registration_flags, channel_arg, image_name, output_dir, registration_config
from specreg.services import ImageService, RegistrationService, TransformService
from specreg.utils import slugify, write_json, write_trace_csv

logger = logging.getLogger(__name__)

register_cmd = Command('register', 'Register a moving image or spectral stack onto a reference')
register_cmd.argument('--ref', required=True, help='reference image (PGM or PNG)')
register_cmd.argument('--moving', required=True, help='moving image, or a manifest listing stack channels')
register_cmd.argument('--out-dir', required=True, help='directory for the outputs')
register_cmd.argument('--channel', type=channel_arg, help='channel index driving registration, or "mean"')
register_cmd.argument('--seed', type=int, default=0, help='recorded in the report')
register_cmd.argument('--difference', action='store_true',
                      help='also write the ink added since the reference scan (layer subtraction)')
add_registration_flags(register_cmd)


@register_cmd.route
def cmd_register(args):
    """Write the registered image(s), field.dfld, report.json and trace.csv, plus the layer difference on request"""
    cfg = registration_config(args)
    out = output_dir(args.out_dir)

    ref = ImageService.load_image(args.ref)
    stack = ImageService.load_moving(args.moving)
    mov = ImageService.select_moving_channel(stack, cfg.moving_channel)
    logger.info('Registering %s (%d channel(s)) onto %s with %s',
                args.moving, len(stack), args.ref, cfg.similarity.measure.value)

    result = RegistrationService.register(ref, mov, cfg)

    registered = RegistrationService.registered_image(mov, result)
    paths = [ImageService.save_image(registered.image, os.path.join(out, image_name(args, 'registered')))]
    if len(stack) > 1:
        warped, _ = RegistrationService.warp_stack(stack, result)
        for index, (channel, label) in enumerate(zip(warped.channels, warped.labels)):
            stem = f'registered_{index:02d}_{slugify(label)}'
            paths.append(ImageService.save_image(channel, os.path.join(out, image_name(args, stem))))

    if args.difference:
        added = ImageService.layer_difference(ref, registered.image, registered.valid)
        paths.append(ImageService.save_image(added, os.path.join(out, image_name(args, 'difference'))))

    paths.append(TransformService.save_field(
        RegistrationService.total_displacement(result), os.path.join(out, 'field.dfld')))
    report = {
        'measure': result.measure.value,
        'seed': args.seed,
        'reference': args.ref,
        'moving': args.moving,
        'stack': stack.to_dict(),
        'valid_fraction': registered.valid.count() / float(ref.data.size),
        'config': cfg.to_dict(),
        'result': result.to_dict(),
    }
    paths.append(write_json(os.path.join(out, 'report.json'), report))
    paths.append(write_trace_csv(os.path.join(out, 'trace.csv'), result.trace))
    for path in paths:
        logger.info('Wrote %s', path)
    return 0
