# app.py
"""
Command-line entry points: synth, train, segment, eval, overlay
Exit codes: 0 success, 2 contract violation, 3 I/O error, 1 anything else
"""
import logging
import os
import sys
from functools import wraps

import click
import numpy as np

from config import Config, ModelConfig, parse_overrides
from data_io import (
    load_checkpoint, load_dataset, load_label_maps, load_sequence, padded_size, read_image,
    render_overlay, save_checkpoint, save_label_maps, tubes_from_label_maps,
)
from errors import ContractViolation, DyeNetError
from inference import InferenceConfig, run_dyenet, write_iteration_report
from metrics import evaluate, to_csv, to_html, to_markdown
from synthetic_data import gen_synthetic, spec_from_preset
from trainer import TrainConfig, build_params, train, write_loss_curve

logger = logging.getLogger(__name__)


def handle_errors(f):
    """Map pipeline exceptions to exit codes"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except DyeNetError as e:
            logger.error(f"❌ {e}")
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error(f"❌ I/O error: {e}")
            sys.exit(3)
    return decorated_function


def config_options(f):
    """--config / --profile / --set shared by the model commands"""
    f = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Override a config key; repeatable')(f)
    f = click.option('--profile', default='default', show_default=True,
                     help='Config profile: full, desk, testing or default')(f)
    f = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='key=value config file')(f)
    return f


def apply_log_level(level):
    """Set the root logging level from a level name"""
    value = getattr(logging, str(level).upper(), None)
    if not isinstance(value, int):
        raise ContractViolation(f"Unknown log level {level!r}; use DEBUG, INFO, WARNING or ERROR")
    logging.getLogger().setLevel(value)


def load_config(config_path, profile, overrides):
    cfg = Config.load(config_path, parse_overrides(overrides), profile)
    # an explicit --log-level wins over log.level
    ctx = click.get_current_context(silent=True)
    if ctx is None or not (ctx.find_root().obj or {}).get('explicit_log_level'):
        apply_log_level(cfg['log.level'])
    return cfg


@click.group()
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR (default: log.level)')
@click.pass_context
def cli(ctx, log_level):
    """DyeNet desk pipeline"""
    ctx.obj = {'explicit_log_level': log_level is not None}
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)
    level = log_level or os.getenv('DYE_LOG_LEVEL')
    if level is not None:
        try:
            apply_log_level(level)
        except ContractViolation as e:
            logger.error(f"❌ {e}")
            sys.exit(e.exit_code)


@cli.command()
@click.option('--preset', required=True, help='static, translate, pan, scale, two_objects, occlusion or distractor')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--count', default=1, show_default=True, type=int)
@handle_errors
def synth(preset, out_dir, seed, count):
    """Generate synthetic sequences with exact masks and flow"""
    if count < 1:
        raise ContractViolation(f"--count must be >= 1, got {count}")
    for offset in range(count):
        spec = spec_from_preset(preset, seed + offset)
        gen_synthetic(spec, os.path.join(out_dir, spec.name))


@cli.command(name='train')
@click.option('--data', 'data_dirs', required=True, multiple=True, type=click.Path(file_okay=False))
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False))
@click.option('--curve', 'curve_path', default=None, type=click.Path(dir_okay=False),
              help='Loss curve CSV (default: next to the checkpoint)')
@config_options
@handle_errors
def train_command(data_dirs, out_path, curve_path, config_path, profile, overrides):
    """Train all sub-networks jointly and write a DYCK checkpoint"""
    cfg = load_config(config_path, profile, overrides)
    model_cfg = ModelConfig.from_config(cfg)
    train_cfg = TrainConfig.from_config(cfg)
    dataset = load_dataset(data_dirs)
    result = train(dataset, train_cfg, model_cfg)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    save_checkpoint(result.params, out_path)
    write_loss_curve(result.curve, curve_path or os.path.splitext(out_path)[0] + '_loss.csv')
    logger.info(f"✅ Trained {train_cfg.iterations} steps, final loss {result.curve[-1]['L']:.4f}")


def _first_frame_masks(seq, first_mask_path):
    if first_mask_path is None:
        masks = seq.first_frame_masks()
        if not masks:
            raise ContractViolation(f"Sequence {seq.name!r} has no frame-1 annotation; pass --first-mask")
        return masks
    label_map = read_image(first_mask_path, 'L')
    if label_map.shape != tuple(seq.original_size):
        raise ContractViolation(f"First-frame mask is {label_map.shape}, frames are {tuple(seq.original_size)}")
    height, width = padded_size(*label_map.shape)
    padded = np.zeros((height, width), dtype=np.uint8)
    padded[:label_map.shape[0], :label_map.shape[1]] = label_map
    return {int(k): padded == k for k in np.unique(padded) if k != 0}


@cli.command()
@click.option('--sequence', 'sequence_dir', required=True, type=click.Path(file_okay=False))
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(dir_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--first-mask', 'first_mask_path', default=None, type=click.Path(dir_okay=False),
              help='Frame-1 instance label map (default: the sequence\'s masks/00001.pgm)')
@config_options
@handle_errors
def segment(sequence_dir, checkpoint_path, out_dir, first_mask_path, config_path, profile, overrides):
    """Segment a sequence from its first-frame masks"""
    cfg = load_config(config_path, profile, overrides)
    infer_cfg = InferenceConfig.from_config(cfg)
    seq = load_sequence(sequence_dir)
    params = load_checkpoint(checkpoint_path, expected=build_params(infer_cfg.model))
    masks = _first_frame_masks(seq, first_mask_path)
    result = run_dyenet(seq, masks, params, infer_cfg, ground_truth=seq if seq.has_masks else None)
    save_label_maps(result.label_maps, out_dir, seq.original_size)
    write_iteration_report(result.reports, os.path.join(out_dir, 'iterations.csv'))
    logger.info(f"✅ Segmented {seq.name}: {len(result.tubes)} tubes after {result.iterations} iterations")


@cli.command(name='eval')
@click.option('--pred', 'pred_dir', required=True, type=click.Path(file_okay=False))
@click.option('--gt', 'gt_dir', required=True, type=click.Path(file_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--tol', default=None, type=int, help='Boundary tolerance in pixels (default: eval.boundary_tol)')
@click.option('--html', 'with_html', is_flag=True, help='Also write report.html')
@handle_errors
def eval_command(pred_dir, gt_dir, out_dir, tol, with_html):
    """Score predicted label maps with J, F, G and mIoU"""
    tol = Config.load()['eval.boundary_tol'] if tol is None else tol
    if tol < 0:
        raise ContractViolation(f"--tol must be >= 0, got {tol}")
    gt_seq = load_sequence(gt_dir)
    report = evaluate(load_label_maps(pred_dir), gt_seq, tol)
    os.makedirs(out_dir, exist_ok=True)
    text = to_markdown(report)
    with open(os.path.join(out_dir, 'report.csv'), 'w', encoding='utf-8', newline='') as f:
        f.write(to_csv(report))
    with open(os.path.join(out_dir, 'report.md'), 'w', encoding='utf-8') as f:
        f.write(text)
    if with_html:
        with open(os.path.join(out_dir, 'report.html'), 'w', encoding='utf-8') as f:
            f.write(to_html(report))
    click.echo(text, nl=False)


@cli.command()
@click.option('--sequence', 'sequence_dir', required=True, type=click.Path(file_okay=False))
@click.option('--pred', 'pred_dir', required=True, type=click.Path(file_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@handle_errors
def overlay(sequence_dir, pred_dir, out_dir):
    """Blend predicted identities over the frames"""
    seq = load_sequence(sequence_dir)
    tubes = tubes_from_label_maps(load_label_maps(pred_dir))
    render_overlay(seq, tubes, out_dir)


if __name__ == "__main__":
    cli()
