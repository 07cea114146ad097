"""
MoSARe command line
synth / ingest-check / train / eval / scenarios / ablate / modalities / export-attn
Every invocation writes its resolved config, log and outputs into one run directory
"""

import argparse
import json
import logging
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from services.config import (
    RunConfig,
    config_hash,
    parse_override_args,
    resolve_config,
    snapshot,
    split_scenarios,
)
from services.data_service import (
    MODALITIES,
    SyntheticSpec,
    generate_synthetic,
    ingest,
    write_dataset,
)
from services.errors import ConfigurationError, MoSAReError, UserInputError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DEFAULT_RUNS_DIR = 'runs'


class CliUsageError(UserInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='Flat key=value config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config key, e.g. --set fusion.k_loc=4 (repeatable)')
    common.add_argument('--out', type=Path, default=None,
                        help='Runs root directory (default: $MOSARE_RUNS_DIR or ./runs)')
    common.add_argument('--verbose', action='store_true', help='Debug logging')

    parser = _Parser(prog='mosare', description='Desk-scale MoSARe multimodal learning')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    synth = sub.add_parser('synth', parents=[common], help='Generate a synthetic dataset')
    synth.add_argument('--data', type=Path, default=None, help='Dataset directory (default: <run>/dataset)')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--classes', type=int, default=3)
    synth.add_argument('--per-class', type=int, default=40)
    synth.add_argument('--dim', type=int, default=32)
    synth.add_argument('--components', type=int, default=16)
    synth.add_argument('--heads', type=int, default=16)
    synth.add_argument('--separation', type=float, default=4.0)
    synth.add_argument('--correlation', type=float, default=0.5)
    synth.add_argument('--noise', type=float, default=1.0)
    synth.add_argument('--patches', type=int, default=0, help='Patches per slide (raw mode)')
    synth.add_argument('--genes', type=int, default=0, help='Genes per expression vector (raw mode)')
    synth.add_argument('--sentences', type=int, default=0, help='Sentences per report (raw mode)')
    synth.add_argument('--folds', type=int, default=5)

    for name, help_text in (('ingest-check', 'Validate a dataset directory'),
                            ('train', 'Train one model, holding out evaluation.holdout_fold'),
                            ('eval', 'k-fold cross-validation under masking.scenario'),
                            ('scenarios', 'All train/test masking scenarios at several fractions'),
                            ('ablate', 'Component ablation ladders'),
                            ('modalities', 'Two- against three-modality cross-validation')):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument('--data', type=Path, required=True, help='Dataset directory')
        if name == 'scenarios':
            command.add_argument('--fractions', type=str, default='0.1,0.3,0.5')
        if name == 'ablate':
            command.add_argument('--fraction', type=float, default=None,
                                 help='Masking fraction of the incomplete ladder (default: evaluation.ablation_fraction)')

    export = sub.add_parser('export-attn', parents=[common], help='Export attention of a trained checkpoint')
    export.add_argument('--checkpoint', type=Path, required=True)
    export.add_argument('--data', type=Path, required=True)
    export.add_argument('--limit', type=int, default=0, help='Export only the first N samples')
    export.add_argument('--no-images', action='store_true')
    return parser


def runs_root(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get('MOSARE_RUNS_DIR', DEFAULT_RUNS_DIR))


def make_run_dir(root: Path, tag: str) -> Path:
    stamp = datetime.now().strftime('%Y%m%d-%H%M%S')
    run_dir = root / f'{stamp}-{tag}'
    suffix = 1
    while run_dir.exists():
        run_dir = root / f'{stamp}-{tag}-{suffix}'
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def setup_logging(run_dir: Path, verbose: bool) -> logging.Handler:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt='%H:%M:%S', force=True)
    handler = logging.FileHandler(run_dir / 'run.log')
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt='%H:%M:%S'))
    handler.setLevel(level)
    logging.getLogger().addHandler(handler)
    return handler


def write_error(run_dir: Optional[Path], exc: BaseException, exit_code: int):
    if run_dir is None:
        return
    payload = {
        'type': type(exc).__name__,
        'message': str(exc),
        'exit_code': exit_code,
        'details': exc.details if isinstance(exc, MoSAReError) else {},
    }
    with open(run_dir / 'error.json', 'w') as f:
        json.dump(payload, f, indent=2, default=str)


def load_records(args, config: RunConfig):
    return ingest(args.data, max_patches=config.model.max_patches, seed=config.train.seed)


def cmd_synth(args, config: RunConfig, run_dir: Path) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        samples_per_class=args.per_class,
        dim=args.dim,
        n_components=args.components,
        n_heads=args.heads,
        class_separation=args.separation,
        modality_correlation=args.correlation,
        noise_std=args.noise,
        seed=args.seed,
        n_patches=args.patches,
        n_genes=args.genes,
        n_sentences=args.sentences,
        k_folds=args.folds,
    )
    records, manifest = generate_synthetic(spec)
    path = write_dataset(records, manifest, args.data or run_dir / 'dataset')
    logger.info(f"Dataset written to {path}")
    print(path)
    return 0


def cmd_ingest_check(args, config: RunConfig, run_dir: Path) -> int:
    records, manifest = load_records(args, config)
    complete = sum(r.is_complete for r in records)
    per_modality = {m.value: sum(r.present(m) for r in records) for m in MODALITIES}
    summary = {
        'n_samples': len(records),
        'n_classes': manifest.n_classes,
        'dim': manifest.dim,
        'complete': complete,
        'present': per_modality,
        'raw': manifest.raw,
        'folds': len(set(manifest.folds.values())) if manifest.folds else 0,
    }
    with open(run_dir / 'ingest_check.json', 'w') as f:
        json.dump(summary, f, indent=2)
    logger.info(f"Dataset OK: {json.dumps(summary)}")
    print(json.dumps(summary))
    return 0


def cmd_train(args, config: RunConfig, run_dir: Path) -> int:
    from services.training import train

    records, manifest = load_records(args, config)
    result = train(records, manifest, config, run_dir=run_dir)
    final = [h for h in result.history if h['epoch'] == result.epochs_completed - 1]
    logger.info(f"Final epoch metrics: {json.dumps(final, default=float)}")
    return 0


def cmd_eval(args, config: RunConfig, run_dir: Path) -> int:
    from services.evaluation import run_cv, write_metric_reports

    records, manifest = load_records(args, config)
    report = run_cv(records, manifest, config, config.masking.scenario, config.masking.fraction,
                    label='cv', run_dir=run_dir)
    write_metric_reports([report], run_dir / 'cv_report')
    return 0


def cmd_scenarios(args, config: RunConfig, run_dir: Path) -> int:
    from services.evaluation import run_scenarios, write_metric_reports

    fractions = split_scenarios(args.fractions)
    records, manifest = load_records(args, config)
    reports = run_scenarios(records, manifest, config, fractions, run_dir=run_dir)
    write_metric_reports(reports, run_dir / 'scenarios')
    return 0


def cmd_ablate(args, config: RunConfig, run_dir: Path) -> int:
    from services.evaluation import run_ablation, write_ablation

    if args.fraction is not None and not 0.0 <= args.fraction <= 1.0:
        raise ConfigurationError(f"--fraction {args.fraction} outside [0, 1]", field='fraction')
    records, manifest = load_records(args, config)
    rows = run_ablation(records, manifest, config, fraction=args.fraction, run_dir=run_dir)
    write_ablation(rows, run_dir / 'ablation')
    return 0


def cmd_modalities(args, config: RunConfig, run_dir: Path) -> int:
    from services.evaluation import run_modality_comparison, write_metric_reports

    records, manifest = load_records(args, config)
    reports = run_modality_comparison(records, manifest, config, run_dir=run_dir)
    write_metric_reports(reports, run_dir / 'modalities')
    return 0


def cmd_export_attn(args, config: RunConfig, run_dir: Path) -> int:
    from services.explainability import export_attention

    records, _ = load_records(args, config)
    if args.limit > 0:
        records = records[:args.limit]
    export_attention(args.checkpoint, records, run_dir / 'attention', images=not args.no_images)
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'ingest-check': cmd_ingest_check,
    'train': cmd_train,
    'eval': cmd_eval,
    'scenarios': cmd_scenarios,
    'ablate': cmd_ablate,
    'modalities': cmd_modalities,
    'export-attn': cmd_export_attn,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Exit code 0 on success, 1 on user or config errors, 2 on runtime failures"""
    load_dotenv()
    run_dir = None
    handler = None
    try:
        try:
            args = build_parser().parse_args(argv)
        except CliUsageError as e:
            print(f"error: {e}", file=sys.stderr)
            return 1

        root = runs_root(args)
        try:
            config = resolve_config(args.config, parse_override_args(args.overrides))
        except UserInputError:
            run_dir = make_run_dir(root, 'invalid')
            handler = setup_logging(run_dir, args.verbose)
            raise
        run_dir = make_run_dir(root, config_hash(config))
        handler = setup_logging(run_dir, args.verbose)
        snapshot(config, run_dir / 'config.json')
        logger.info(f"=== mosare {args.command} === run directory {run_dir}")
        code = COMMANDS[args.command](args, config, run_dir)
        logger.info(f"=== {args.command} complete ===")
        return code
    except UserInputError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        write_error(run_dir, e, 1)
        return 1
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug(traceback.format_exc())
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        write_error(run_dir, e, 2)
        return 2
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == '__main__':
    sys.exit(main())
