import logging
import os

from specreg.controllers import Command, add_registration_flags, image_name, output_dir, registration_config
from specreg.models import DistortionSettings
from specreg.services import EvaluationService, ImageService, RegistrationService, TransformService
from specreg.utils import write_json, write_trace_csv

logger = logging.getLogger(__name__)

synth_cmd = Command('synth', 'Deform an image with a seeded field, register it back and score the recovery')
synth_cmd.argument('--image', required=True, help='source image')
synth_cmd.argument('--seed', required=True, type=int, help='seed for the deformation and distortions')
synth_cmd.argument('--max-disp', required=True, type=float, help='largest control displacement (px)')
synth_cmd.argument('--out-dir', required=True, help='directory for the outputs')
synth_cmd.argument('--spacing', type=float, default=64.0, help='control spacing of the synthetic field (px)')
synth_cmd.argument('--bias', type=float, default=0.0, help='multiplicative bias amplitude, in [0, 1)')
synth_cmd.argument('--noise', type=float, default=0.0, help='Gaussian noise sigma')
synth_cmd.argument('--rotation', type=float, default=0.0, help='rigid misalignment angle (degrees)')
synth_cmd.argument('--shift', type=float, nargs=2, default=(0.0, 0.0), metavar=('DX', 'DY'),
                   help='rigid misalignment translation (px)')
add_registration_flags(synth_cmd)


@synth_cmd.route
def cmd_synth(args):
    """Write the warped input, truth.dfld, recovered.dfld, report.json and trace.csv"""
    distortion = DistortionSettings(
        max_disp=args.max_disp,
        spacing=args.spacing,
        bias_amplitude=args.bias,
        noise_sigma=args.noise,
        rotation_deg=args.rotation,
        shift=tuple(args.shift),
    )
    EvaluationService.check_distortion(args.seed, distortion)
    cfg = registration_config(args)
    img = ImageService.load_image(args.image)
    out = output_dir(args.out_dir)

    case = EvaluationService.synthesize(img, args.seed, distortion)
    ImageService.save_image(case.moving, os.path.join(out, image_name(args, 'warped')))
    TransformService.save_field(case.truth, os.path.join(out, 'truth.dfld'))

    report, result = EvaluationService.validate_case(case, cfg, distortion)
    TransformService.save_field(RegistrationService.total_displacement(result),
                                os.path.join(out, 'recovered.dfld'))
    ImageService.save_image(RegistrationService.registered_image(case.moving, result).image,
                            os.path.join(out, image_name(args, 'registered')))
    write_trace_csv(os.path.join(out, 'trace.csv'), result.trace)

    data = report.to_dict()
    data.update({
        'seed': args.seed,
        'distortion': {
            'max_disp': distortion.max_disp,
            'spacing': distortion.spacing,
            'bias_amplitude': distortion.bias_amplitude,
            'noise_sigma': distortion.noise_sigma,
            'rotation_deg': distortion.rotation_deg,
            'shift': list(distortion.shift),
            'interior_fraction': distortion.interior_fraction,
        },
        'config': cfg.to_dict(),
    })
    write_json(os.path.join(out, 'report.json'), data)
    logger.info('Synthetic run written to %s (mean field error %.3f px)', out, report.field_mean_err_px)
    return 0
