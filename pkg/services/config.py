"""
Run configuration for MoSARe experiments
Nested dataclass sections addressed by flat dotted keys (e.g. fusion.k_loc=8),
loaded from key=value files and command-line overrides
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from dotenv import dotenv_values

from services.errors import ConfigurationError

logger = logging.getLogger(__name__)

SCENARIOS = (
    'none',
    'masked_train_masked_test',
    'masked_train_unmasked_test',
    'removed_train_unmasked_test',
)


def derive_seed(seed: int, *tags: Any) -> int:
    """One independent 32-bit stream per (seed, op-name, ...)"""
    key = '|'.join([str(seed)] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(key.encode('utf-8')).digest()[:4], 'little')


def _require(condition: bool, message: str, key: str):
    if not condition:
        raise ConfigurationError(f"{key}: {message}", field=key)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = 'precomputed'          # precomputed | raw
    dim: int = 32                      # D, resolved from the dataset manifest
    n_components: int = 16             # C local rows for WSI / RPT
    n_heads: int = 16                  # N_h local rows for RNA
    d_attn: int = 0                    # ABMIL hidden width, 0 -> D // 4
    dropout: float = 0.2
    rna_genes: int = 0                 # N_G, raw mode only
    rna_token_dim: int = 1             # D_token; tokens = N_G / D_token
    max_patches: int = 2048
    dtype: str = 'float32'

    def validate(self):
        _require(self.mode in ('precomputed', 'raw'), "must be 'precomputed' or 'raw'", 'model.mode')
        _require(self.dim > 0, 'must be positive', 'model.dim')
        _require(self.n_components > 0, 'must be positive', 'model.n_components')
        _require(self.n_heads > 0, 'must be positive', 'model.n_heads')
        _require(self.d_attn >= 0, 'must be >= 0', 'model.d_attn')
        _require(0.0 <= self.dropout < 1.0, 'must be in [0, 1)', 'model.dropout')
        _require(self.rna_genes >= 0, 'must be >= 0', 'model.rna_genes')
        _require(self.rna_token_dim > 0, 'must be positive', 'model.rna_token_dim')
        if self.rna_genes > 0:
            _require(self.rna_genes % self.rna_token_dim == 0,
                     'must be divisible by model.rna_token_dim', 'model.rna_genes')
        _require(self.max_patches > 0, 'must be positive', 'model.max_patches')
        _require(self.dtype in ('float32', 'float64'), "must be 'float32' or 'float64'", 'model.dtype')

    @property
    def attention_width(self) -> int:
        return self.d_attn if self.d_attn > 0 else max(1, self.dim // 4)


@dataclass(frozen=True)
class FusionConfig:
    n_experts: int = 5
    top_k: int = 2
    k_loc: int = 8
    renormalize_gate: bool = True
    final_fusion: str = 'sum'          # sum | concat
    use_cma: bool = True
    use_moe: bool = True

    def validate(self):
        _require(self.n_experts > 0, 'must be positive', 'fusion.n_experts')
        _require(0 < self.top_k <= self.n_experts, 'must be in [1, n_experts]', 'fusion.top_k')
        _require(self.k_loc > 0, 'must be positive', 'fusion.k_loc')
        _require(self.final_fusion in ('sum', 'concat'), "must be 'sum' or 'concat'", 'fusion.final_fusion')


@dataclass(frozen=True)
class ReconstructionConfig:
    enabled: bool = True
    rec_loss_on_masked: bool = False
    share_levels: bool = False

    def validate(self):
        pass


@dataclass(frozen=True)
class AlignmentConfig:
    enabled: bool = True
    symcl_tau: float = 10.0
    symcl_tau_mode: str = 'multiply'   # multiply (as printed) | divide
    mcl_tau: float = 0.1
    n_components: int = 3              # M_comp per class GMM
    momentum: float = 0.999
    sinkhorn_iters: int = 10
    sinkhorn_epsilon: float = 1.0
    sinkhorn_tol: float = 1e-6         # column-marginal tolerance after the first sinkhorn_iters passes
    sinkhorn_max_iters: int = 10000
    variance_floor: float = 1e-6

    def validate(self):
        _require(self.symcl_tau > 0, 'must be positive', 'alignment.symcl_tau')
        _require(self.symcl_tau_mode in ('multiply', 'divide'), "must be 'multiply' or 'divide'",
                 'alignment.symcl_tau_mode')
        _require(self.mcl_tau > 0, 'must be positive', 'alignment.mcl_tau')
        _require(self.n_components > 0, 'must be positive', 'alignment.n_components')
        _require(0.0 <= self.momentum <= 1.0, 'must be in [0, 1]', 'alignment.momentum')
        _require(self.sinkhorn_iters >= 0, 'must be >= 0 (0 is plain EM)', 'alignment.sinkhorn_iters')
        _require(self.sinkhorn_epsilon > 0, 'must be positive', 'alignment.sinkhorn_epsilon')
        _require(self.sinkhorn_tol > 0, 'must be positive', 'alignment.sinkhorn_tol')
        _require(self.sinkhorn_max_iters > 0, 'must be positive', 'alignment.sinkhorn_max_iters')
        _require(self.variance_floor > 0, 'must be positive', 'alignment.variance_floor')


@dataclass(frozen=True)
class LossConfig:
    lambda_symcl: float = 1.0
    lambda_mcl: float = 2.0
    lambda_rec: float = 1.0
    lambda_cls: float = 1.0

    def validate(self):
        for f in fields(self):
            _require(getattr(self, f.name) >= 0, 'must be >= 0', f'loss.{f.name}')


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    warmup_epochs: int = 10
    beta_1: float = 0.9
    beta_2: float = 0.999
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    per_modality_heads: bool = False

    def validate(self):
        _require(self.learning_rate > 0, 'must be positive', 'train.learning_rate')
        _require(self.batch_size > 0, 'must be positive', 'train.batch_size')
        _require(self.epochs > 0, 'must be positive', 'train.epochs')
        _require(self.warmup_epochs >= 0, 'must be >= 0', 'train.warmup_epochs')
        _require(self.warmup_epochs < self.epochs, 'warm-up must be shorter than train.epochs',
                 'train.warmup_epochs')
        _require(0.0 <= self.beta_1 < 1.0, 'must be in [0, 1)', 'train.beta_1')
        _require(0.0 <= self.beta_2 < 1.0, 'must be in [0, 1)', 'train.beta_2')
        _require(self.weight_decay >= 0, 'must be >= 0', 'train.weight_decay')
        _require(self.clip_norm > 0, 'must be positive', 'train.clip_norm')


@dataclass(frozen=True)
class MaskingConfig:
    scenario: str = 'none'
    fraction: float = 0.0
    strategy: str = 'spread'           # spread | independent
    max_retries: int = 1000

    def validate(self):
        _require(self.scenario in SCENARIOS, f'must be one of {SCENARIOS}', 'masking.scenario')
        _require(0.0 <= self.fraction <= 1.0, 'must be in [0, 1]', 'masking.fraction')
        _require(self.strategy in ('spread', 'independent'), "must be 'spread' or 'independent'",
                 'masking.strategy')
        _require(self.max_retries > 0, 'must be positive', 'masking.max_retries')


@dataclass(frozen=True)
class EvaluationConfig:
    k_folds: int = 5
    holdout_fold: int = 0
    ablation_fraction: float = 0.3
    # 'wsi_rna' runs the incomplete ladder with reports dropped
    ablation_modalities: str = 'all'

    def validate(self):
        _require(self.k_folds >= 2, 'must be >= 2', 'evaluation.k_folds')
        _require(0 <= self.holdout_fold < self.k_folds, 'must be a valid fold index', 'evaluation.holdout_fold')
        _require(0.0 <= self.ablation_fraction <= 1.0, 'must be in [0, 1]', 'evaluation.ablation_fraction')
        _require(self.ablation_modalities in ('all', 'wsi_rna'), "must be 'all' or 'wsi_rna'",
                 'evaluation.ablation_modalities')


_SECTIONS = {
    'model': ModelConfig,
    'fusion': FusionConfig,
    'reconstruction': ReconstructionConfig,
    'alignment': AlignmentConfig,
    'loss': LossConfig,
    'train': TrainConfig,
    'masking': MaskingConfig,
    'evaluation': EvaluationConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """All hyperparameters of a run; immutable, derive variants with override()"""

    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.fusion.k_loc > self.model.n_components:
            raise ConfigurationError(
                f"fusion.k_loc ({self.fusion.k_loc}) exceeds model.n_components ({self.model.n_components})",
                field='fusion.k_loc',
            )
        if self.fusion.k_loc > self.model.n_heads:
            raise ConfigurationError(
                f"fusion.k_loc ({self.fusion.k_loc}) exceeds model.n_heads ({self.model.n_heads})",
                field='fusion.k_loc',
            )

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for section, values in asdict(self).items():
            for key, value in values.items():
                flat[f'{section}.{key}'] = value
        return flat

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    def override(self, **flat: Any) -> 'RunConfig':
        """Return a copy with dotted keys replaced: cfg.override(**{'fusion.k_loc': 4})"""
        return apply_overrides(self, flat)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]]) -> 'RunConfig':
        flat = {}
        for section, values in data.items():
            if section not in _SECTIONS:
                raise ConfigurationError(f"Unknown config section '{section}'", field=section)
            for key, value in values.items():
                flat[f'{section}.{key}'] = value
        return apply_overrides(cls(), flat)


def _coerce(value: Any, target: type, key: str) -> Any:
    if not isinstance(value, str):
        if target is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, target):
            return value
        value = str(value)
    text = value.strip()
    try:
        if target is bool:
            lowered = text.lower()
            if lowered in ('true', '1', 'yes', 'on'):
                return True
            if lowered in ('false', '0', 'no', 'off'):
                return False
            raise ValueError(text)
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse '{text}' as {target.__name__}", field=key)


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply flat dotted overrides; unknown keys are rejected"""
    grouped: Dict[str, Dict[str, Any]] = {}
    for key, raw in overrides.items():
        section, _, name = key.partition('.')
        if section not in _SECTIONS or not name:
            raise ConfigurationError(f"Unknown config key '{key}'", field=key)
        types = {f.name: f.type for f in fields(_SECTIONS[section])}
        if name not in types:
            raise ConfigurationError(f"Unknown config key '{key}'", field=key)
        grouped.setdefault(section, {})[name] = _coerce(raw, types[name], key)

    sections = {name: getattr(config, name) for name in _SECTIONS}
    for section, values in grouped.items():
        sections[section] = replace(sections[section], **values)
    return RunConfig(**sections)


def parse_override_args(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """Turn repeated --set key=value flags into a dict"""
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            raise ConfigurationError(f"Override '{pair}' is not of the form key=value", field=pair)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config_file(path: Path) -> Dict[str, str]:
    """Read a flat key=value config file with # comments"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", field='config')
    values = dotenv_values(path)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigurationError(f"Config keys without a value in {path}: {missing}", field=missing[0])
    return dict(values)


def resolve_config(config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                   base: Optional[RunConfig] = None) -> RunConfig:
    config = base or RunConfig()
    if config_path is not None:
        config = apply_overrides(config, load_config_file(config_path))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def with_dataset_shape(config: RunConfig, dim: int, n_components: int, n_heads: int, n_genes: int = 0) -> RunConfig:
    """Pin the model shape fields to the dataset manifest"""
    current = (config.model.dim, config.model.n_components, config.model.n_heads)
    if current != (dim, n_components, n_heads):
        logger.info(f"Resolving model shape from dataset: D={dim}, C={n_components}, N_h={n_heads}")
    shape = {
        'model.dim': dim,
        'model.n_components': n_components,
        'model.n_heads': n_heads,
    }
    if n_genes:
        shape['model.rna_genes'] = n_genes
    return apply_overrides(config, shape)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def snapshot(config: RunConfig, path: Path) -> Path:
    """Write the resolved config as JSON plus the flat key=value form"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump({'config_hash': config_hash(config), 'config': config.to_dict()}, f, indent=2, sort_keys=True)
    flat_path = path.with_suffix('.conf')
    with open(flat_path, 'w') as f:
        f.write(f"# resolved config {config_hash(config)}\n")
        for key, value in sorted(config.to_flat().items()):
            text = str(value).lower() if isinstance(value, bool) else value
            f.write(f"{key}={text}\n")
    return path


def split_scenarios(spec: str) -> Tuple[float, ...]:
    """Parse '0.1,0.3,0.5' into fractions"""
    try:
        fractions = tuple(float(x) for x in spec.split(',') if x.strip())
    except ValueError:
        raise ConfigurationError(f"Cannot parse fractions '{spec}'", field='fractions')
    for value in fractions:
        if not 0.0 <= value <= 1.0:
            raise ConfigurationError(f"Fraction {value} outside [0, 1]", field='fractions')
    return fractions
