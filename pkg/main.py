import argparse
import logging
import sys
from typing import List, Optional

from src.config import apply_overrides, load_config, parse_float_list
from src.errors import DdstError
from src.harness import cmd_calibrate_evm, cmd_generate, cmd_infer, cmd_sweep, cmd_train
from src.utils import setup_logging

logger = logging.getLogger('ddst')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML experiment config')
    common.add_argument('--seed', type=int)
    common.add_argument('--deterministic', action='store_true', default=None)
    common.add_argument('--out-dir', dest='out_dir')
    common.add_argument('--evm', help='EVM target(s) in percent, e.g. 55 or 45:65:5')
    common.add_argument('--paths', help='channel length(s) L, e.g. 12 or 4,6,8,10,12')
    common.add_argument('--no-progress', action='store_true', help='hide progress bars')
    common.add_argument('--log-level', default='INFO')

    parser = argparse.ArgumentParser(prog='ddst', description='DDST link-level simulation lab')
    sub = parser.add_subparsers(dest='command', required=True)

    generate = sub.add_parser('generate', parents=[common], help='build CE-Net or SD-Net datasets')
    generate.add_argument('--net', choices=['ce', 'sd'], default='ce')
    generate.add_argument('--count', type=int, help='training rows; validation gets a third')
    generate.add_argument('--train-snr', dest='train_snr', help='mixed, inf, a value or a comma list in dB')
    generate.add_argument('--ce-checkpoint', dest='ce_checkpoint')
    generate.add_argument('--perfect-csi', dest='perfect_csi', action='store_true')

    train = sub.add_parser('train', parents=[common], help='train CE-Net or SD-Net')
    train.add_argument('--net', choices=['ce', 'sd'], default='ce')
    train.add_argument('--epochs', type=int)
    train.add_argument('--alpha-grid', dest='alpha_grid', help='L2 coefficients, e.g. 1e-2,1e-3,1e-4')

    infer = sub.add_parser('infer', parents=[common], help='run the online receiver')
    infer.add_argument('--frames', type=int, default=200)
    infer.add_argument('--snr', type=float)
    infer.add_argument('--input', dest='source', help='.npy file with received frames (count, N)')
    infer.add_argument('--ce-checkpoint', dest='ce_checkpoint')
    infer.add_argument('--sd-checkpoint', dest='sd_checkpoint')

    sweep = sub.add_parser('sweep', parents=[common], help='BER sweep over SNR, EVM and L')
    sweep.add_argument('--trials', type=int)
    sweep.add_argument('--variants', help='comma-separated, e.g. "LS_CE + ZF_SD,CE_Net + SD_Net"')
    sweep.add_argument('--snr-grid', dest='snr_grid', help='e.g. 0:30:3 or 24,27,30')
    sweep.add_argument('--workers', type=int)
    sweep.add_argument('--ce-checkpoint', dest='ce_checkpoint')
    sweep.add_argument('--sd-checkpoint', dest='sd_checkpoint')

    sub.add_parser('calibrate-evm', parents=[common], help='drive level for each EVM target')
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    progress = not args.no_progress
    try:
        config = apply_overrides(load_config(args.config), vars(args))
        if args.command == 'generate':
            cmd_generate(config, args.net, args.count, args.train_snr, args.ce_checkpoint, args.perfect_csi, progress)
        elif args.command == 'train':
            alphas = parse_float_list(args.alpha_grid) if args.alpha_grid else None
            cmd_train(config, args.net, alphas, args.epochs, progress)
        elif args.command == 'infer':
            report = cmd_infer(
                config, args.frames, args.snr, args.source, args.ce_checkpoint, args.sd_checkpoint, progress
            )
            if report.ber is not None:
                print(f'BER {report.ber:.6g} over {len(report.bits)} frames')
        elif args.command == 'sweep':
            table = cmd_sweep(config, args.ce_checkpoint, args.sd_checkpoint, progress)
            print(table.to_string(index=False))
        elif args.command == 'calibrate-evm':
            print(cmd_calibrate_evm(config).to_string(index=False))
    except DdstError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(run())
