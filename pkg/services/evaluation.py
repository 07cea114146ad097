"""
MoSARe evaluation service
Cross-validation, the three missing-modality train/test scenarios, the
component ablation ladders and the two- vs three-modality comparison
Reports are written as JSON and as aligned text tables
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.config import RunConfig, config_hash
from services.data_service import (
    MODALITIES,
    DatasetManifest,
    Modality,
    SampleRecord,
    apply_mask,
    drop_modality,
    scenario_split,
    stratified_folds,
)
from services.errors import MaskingError, MoSAReError
from services.metrics import classification_report
from services.training import MoSAReTrainer, resolve_for_dataset

logger = logging.getLogger(__name__)

METRICS = ('auc', 'f1', 'acc')
TRAIN_TEST_SCENARIOS = (
    'masked_train_masked_test',
    'masked_train_unmasked_test',
    'removed_train_unmasked_test',
)


@dataclass
class MetricReport:
    """Per-fold auc / f1 / acc plus their mean and std; not_applicable marks an NA row"""

    scenario: str = 'none'
    fraction: float = 0.0
    config_hash: str = ''
    label: str = ''
    folds: List[Dict[str, Optional[float]]] = field(default_factory=list)
    not_applicable: bool = False
    note: str = ''

    def values(self, metric: str) -> np.ndarray:
        values = [f[metric] for f in self.folds if f.get(metric) is not None]
        return np.asarray(values, dtype=np.float64)

    def mean(self, metric: str) -> Optional[float]:
        values = self.values(metric)
        return float(np.mean(values)) if values.size else None

    def std(self, metric: str) -> Optional[float]:
        values = self.values(metric)
        return float(np.std(values)) if values.size else None

    def summary(self) -> Dict[str, Any]:
        row = {'label': self.label, 'scenario': self.scenario, 'fraction': self.fraction,
               'config_hash': self.config_hash}
        for metric in METRICS:
            row[f'{metric}_mean'] = None if self.not_applicable else self.mean(metric)
            row[f'{metric}_std'] = None if self.not_applicable else self.std(metric)
        return row

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['summary'] = self.summary()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricReport':
        data = {k: v for k, v in data.items() if k != 'summary'}
        return cls(**data)

    @classmethod
    def na(cls, scenario: str, fraction: float, config: RunConfig, label: str = '', note: str = '') -> 'MetricReport':
        return cls(scenario=scenario, fraction=fraction, config_hash=config_hash(config), label=label,
                   not_applicable=True, note=note)


def _fold_assignment(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig) -> Dict[str, int]:
    ids = {r.sample_id for r in records}
    if manifest.folds and ids <= set(manifest.folds):
        return {sid: manifest.folds[sid] for sid in ids}
    return stratified_folds(records, config.evaluation.k_folds, config.train.seed)


def train_and_score(train_records: List[SampleRecord], test_records: List[SampleRecord], config: RunConfig,
                    n_classes: int, metrics_path: Optional[Path] = None) -> Dict[str, Optional[float]]:
    result = MoSAReTrainer(config, n_classes, metrics_path=metrics_path).fit(train_records)
    probs = result.predict_proba(test_records)
    labels = np.array([r.label for r in test_records])
    return classification_report(probs, labels, n_classes)


def run_cv(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig, scenario: str = 'none',
           fraction: float = 0.0, masked: Optional[List[SampleRecord]] = None, label: str = '',
           run_dir: Optional[Path] = None) -> MetricReport:
    """
    k-fold cross-validation: fold i held out, the other folds train
    Training errors propagate with the fold index in their details
    """
    config = resolve_for_dataset(config, manifest)
    folds = _fold_assignment(records, manifest, config)
    if masked is None:
        masked = records if scenario == 'none' else apply_mask(
            records, fraction, config.train.seed, config.masking.strategy, config.masking.max_retries)
    report = MetricReport(scenario=scenario, fraction=fraction, config_hash=config_hash(config), label=label)

    for fold in range(config.evaluation.k_folds):
        train_records, test_records = scenario_split(records, masked, folds, fold, scenario)
        if not train_records:
            logger.warning(f"{scenario} at {fraction:.0%}: no training samples left in fold {fold}, reporting NA")
            return MetricReport.na(scenario, fraction, config, label, note=f'no training samples in fold {fold}')
        logger.info(f"{label or scenario} fold {fold + 1}/{config.evaluation.k_folds}: "
                    f"{len(train_records)} train / {len(test_records)} test")
        metrics_path = Path(run_dir) / f'fold_{fold}' / 'metrics.jsonl' if run_dir else None
        try:
            scores = train_and_score(train_records, test_records, config, manifest.n_classes, metrics_path)
        except MoSAReError as exc:
            exc.details['fold'] = fold
            logger.error(f"Fold {fold} failed: {exc}")
            raise
        report.folds.append(scores)
        logger.info(f"Fold {fold + 1} auc={scores['auc']} f1={scores['f1']:.4f} acc={scores['acc']:.4f}")
    return report


def run_scenarios(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig,
                  fractions: Sequence[float], run_dir: Optional[Path] = None) -> List[MetricReport]:
    """Every train/test scenario at every masking fraction; the mask is drawn once per fraction"""
    reports = []
    masking = config.masking
    for fraction in fractions:
        masked = apply_mask(records, fraction, config.train.seed, masking.strategy, masking.max_retries)
        for scenario in TRAIN_TEST_SCENARIOS:
            scenario_config = config.override(**{'masking.scenario': scenario, 'masking.fraction': fraction})
            sub_dir = Path(run_dir) / f'{scenario}_{fraction:g}' if run_dir else None
            reports.append(run_cv(records, manifest, scenario_config, scenario, fraction, masked=masked,
                                  label=f'{scenario}@{fraction:g}', run_dir=sub_dir))
    return reports


@dataclass
class AblationRow:
    table: str
    name: str
    components: Dict[str, bool]
    report: MetricReport
    delta_auc: Optional[float] = None

    def summary(self) -> Dict[str, Any]:
        row = {'table': self.table, 'name': self.name}
        row.update(self.components)
        row.update(self.report.summary())
        row['delta_auc'] = self.delta_auc
        return row


COMPLETE_LADDER = (
    ('baseline', {'cma': False, 'recons': False, 'moe': False, 'align': False}),
    ('cma_moe', {'cma': True, 'recons': False, 'moe': True, 'align': False}),
    ('full', {'cma': True, 'recons': False, 'moe': True, 'align': True}),
)

INCOMPLETE_LADDER = (
    ('cma', {'cma': True, 'recons': False, 'moe': False, 'align': False}),
    ('cma_recons', {'cma': True, 'recons': True, 'moe': False, 'align': False}),
    ('cma_recons_moe', {'cma': True, 'recons': True, 'moe': True, 'align': False}),
    ('full', {'cma': True, 'recons': True, 'moe': True, 'align': True}),
)


def ablation_config(config: RunConfig, components: Dict[str, bool]) -> RunConfig:
    overrides = {
        'fusion.use_cma': components['cma'],
        'fusion.use_moe': components['moe'],
        'alignment.enabled': components['align'],
        'reconstruction.enabled': components['recons'],
    }
    return config.override(**overrides)


def _with_deltas(rows: List[AblationRow]) -> List[AblationRow]:
    base = rows[0].report.mean('auc')
    for row in rows:
        current = row.report.mean('auc')
        row.delta_auc = None if base is None or current is None else current - base
    return rows


def _without_reports(masked: List[SampleRecord]) -> List[SampleRecord]:
    two = drop_modality(masked, Modality.RPT)
    empty = [r.sample_id for r in two if not any(r.present(m) for m in MODALITIES)]
    if empty:
        raise MaskingError(f"Dropping reports leaves {len(empty)} samples with no modality (first: {empty[0]})")
    return two


def run_ablation(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig,
                 fraction: Optional[float] = None, run_dir: Optional[Path] = None) -> List[AblationRow]:
    """
    Complete-data ladder (baseline, CMA+MoE, CMA+MoE+alignment), reconstruction off,
    followed by the incomplete-data ladder with reconstruction under masked train and test
    The incomplete ladder keeps all three modalities unless evaluation.ablation_modalities
    is wsi_rna, which drops reports after masking
    AUC deltas are relative to the first row of each ladder
    """
    fraction = config.evaluation.ablation_fraction if fraction is None else fraction
    rows: List[AblationRow] = []

    complete = []
    for name, components in COMPLETE_LADDER:
        variant = ablation_config(config, components)
        sub_dir = Path(run_dir) / f'complete_{name}' if run_dir else None
        report = run_cv(records, manifest, variant, 'none', 0.0, label=f'complete/{name}', run_dir=sub_dir)
        complete.append(AblationRow('complete', name, dict(components), report))
    rows.extend(_with_deltas(complete))

    masking = config.masking
    masked = apply_mask(records, fraction, config.train.seed, masking.strategy, masking.max_retries)
    if config.evaluation.ablation_modalities == 'wsi_rna':
        masked = _without_reports(masked)
    incomplete = []
    for name, components in INCOMPLETE_LADDER:
        variant = ablation_config(config, components).override(**{
            'masking.scenario': 'masked_train_masked_test', 'masking.fraction': fraction})
        sub_dir = Path(run_dir) / f'incomplete_{name}' if run_dir else None
        report = run_cv(records, manifest, variant, 'masked_train_masked_test', fraction, masked=masked,
                        label=f'incomplete/{name}', run_dir=sub_dir)
        incomplete.append(AblationRow('incomplete', name, dict(components), report))
    rows.extend(_with_deltas(incomplete))

    for row in rows:
        delta = '' if row.delta_auc is None else f" ({row.delta_auc:+.4f})"
        logger.info(f"Ablation {row.table}/{row.name}: auc={row.report.mean('auc')}{delta} "
                    f"[{row.report.config_hash}]")
    return rows


def run_modality_comparison(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig,
                            run_dir: Optional[Path] = None) -> List[MetricReport]:
    """WSI + RNA with reports permanently absent against all three modalities"""
    two = drop_modality(records, Modality.RPT)
    reports = [
        run_cv(records, manifest, config, 'masked_train_masked_test', 0.0, masked=two, label='2_modality',
               run_dir=Path(run_dir) / '2_modality' if run_dir else None),
        run_cv(records, manifest, config, 'none', 0.0, label='3_modality',
               run_dir=Path(run_dir) / '3_modality' if run_dir else None),
    ]
    return reports


def reports_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary() for r in reports])


def ablation_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    return pd.DataFrame([r.summary() for r in rows])


def format_table(frame: pd.DataFrame) -> str:
    """Aligned text table, NA for missing values"""
    def fmt(value):
        if isinstance(value, float):
            return 'NA' if np.isnan(value) else f'{value:.4f}'
        return 'NA' if value is None else value

    return frame.apply(lambda col: col.map(fmt)).to_string(index=False)


def write_reports(payload: Any, frame: pd.DataFrame, path: Path) -> Tuple[Path, Path]:
    """Write <path>.json and <path>.txt"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path.with_suffix('.json')
    text_path = path.with_suffix('.txt')
    with open(json_path, 'w') as f:
        json.dump(payload, f, indent=2, default=float)
    with open(text_path, 'w') as f:
        f.write(format_table(frame) + '\n')
    logger.info(f"Report saved to {json_path} and {text_path}")
    return json_path, text_path


def write_metric_reports(reports: Sequence[MetricReport], path: Path) -> Tuple[Path, Path]:
    return write_reports([r.to_dict() for r in reports], reports_frame(reports), path)


def write_ablation(rows: Sequence[AblationRow], path: Path) -> Tuple[Path, Path]:
    payload = [{**r.summary(), 'report': r.report.to_dict()} for r in rows]
    return write_reports(payload, ablation_frame(rows), path)


def load_metric_reports(path: Path) -> List[MetricReport]:
    with open(Path(path).with_suffix('.json')) as f:
        return [MetricReport.from_dict(item) for item in json.load(f)]
