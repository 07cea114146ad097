"""
Data Service for multimodal sample records
Dataset schema, synthetic three-modality generator, on-disk ingestion,
modality masking and stratified fold assignment
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold

from services.config import RunConfig, derive_seed
from services.errors import (
    ConfigurationError,
    DimensionError,
    MaskingError,
    ParseError,
    StratificationError,
)

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    WSI = 'wsi'
    RNA = 'rna'
    RPT = 'rpt'


MODALITIES = (Modality.WSI, Modality.RNA, Modality.RPT)


@dataclass(eq=False)
class ModalityInput:
    global_vec: np.ndarray     # (D,)
    local: np.ndarray          # (C_m, D)
    present: bool = True


@dataclass(eq=False)
class SampleRecord:
    """One patient: per-modality global vector, local matrix and presence flag"""

    sample_id: str
    label: int
    modalities: Dict[Modality, ModalityInput]
    patch_embeddings: Optional[np.ndarray] = None     # raw WSI bag (N_patch, D)
    patch_coords: Optional[np.ndarray] = None         # (N_patch, 2) grid positions
    rna_expression: Optional[np.ndarray] = None       # raw RNA vector (N_G,)
    sentence_embeddings: Optional[np.ndarray] = None  # raw report sentences (N_sent, D)
    source: Optional['SampleRecord'] = None           # the record before masking, when kept as ground truth

    def present(self, modality: Modality) -> bool:
        return bool(self.modalities[modality].present)

    def presence(self) -> Tuple[bool, bool, bool]:
        return tuple(self.present(m) for m in MODALITIES)

    @property
    def is_complete(self) -> bool:
        return all(self.presence())


@dataclass
class DatasetManifest:
    n_samples: int
    n_classes: int
    dim: int
    n_components: int = 16
    n_heads: int = 16
    folds: Dict[str, int] = field(default_factory=dict)
    provenance: str = 'synthetic'
    n_genes: int = 0
    raw: bool = False

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['D'] = data.pop('dim')
        data['C'] = data.pop('n_components')
        data['N_h'] = data.pop('n_heads')
        return data

    @classmethod
    def from_dict(cls, data: Dict, file: str = 'manifest.json') -> 'DatasetManifest':
        try:
            manifest = cls(
                n_samples=int(data['n_samples']),
                n_classes=int(data['n_classes']),
                dim=int(data['D']),
                n_components=int(data.get('C', 16)),
                n_heads=int(data.get('N_h', 16)),
                folds={str(k): int(v) for k, v in data.get('folds', {}).items()},
                provenance=str(data.get('provenance', 'ingested')),
                n_genes=int(data.get('n_genes', 0)),
                raw=bool(data.get('raw', False)),
            )
        except KeyError as e:
            raise ParseError(f"Missing field {e} in {file}", file=file, field=str(e).strip("'"))
        except (TypeError, ValueError) as e:
            raise ParseError(f"Malformed manifest {file}: {e}", file=file)
        for name in ('n_samples', 'n_classes', 'dim', 'n_components', 'n_heads'):
            if getattr(manifest, name) <= 0:
                raise ParseError(f"{name} must be positive in {file}", file=file, field=name)
        return manifest

    def local_rows(self, modality: Modality) -> int:
        return self.n_heads if modality == Modality.RNA else self.n_components


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 3
    samples_per_class: int = 40
    dim: int = 32
    n_components: int = 16
    n_heads: int = 16
    class_separation: float = 4.0
    modality_correlation: float = 0.5
    noise_std: float = 1.0
    seed: int = 0
    # raw-mode extension; zero keeps the dataset precomputed-only
    n_patches: int = 0
    n_genes: int = 0
    n_sentences: int = 0
    k_folds: int = 5

    def validate(self):
        positive = ('n_classes', 'samples_per_class', 'dim', 'n_components', 'n_heads', 'noise_std', 'k_folds')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be strictly positive", field=name)
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be at least 2", field='n_classes')
        if self.class_separation < 0:
            raise ConfigurationError("class_separation must be >= 0", field='class_separation')
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise ConfigurationError("modality_correlation must be in [0, 1]", field='modality_correlation')
        for name in ('n_patches', 'n_genes', 'n_sentences'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0", field=name)
        raw_fields = [self.n_patches > 0, self.n_genes > 0, self.n_sentences > 0]
        if any(raw_fields) and not all(raw_fields):
            raise ConfigurationError("raw mode needs n_patches, n_genes and n_sentences together",
                                     field='n_patches')

    @property
    def raw(self) -> bool:
        return self.n_patches > 0


def _class_centroids(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Centroids pairwise class_separation * noise_std apart"""
    scale = spec.class_separation * spec.noise_std / math.sqrt(2.0)
    if spec.n_classes <= spec.dim:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.n_classes)))
        return scale * basis.T
    directions = rng.standard_normal((spec.n_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return scale * directions


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[SampleRecord], DatasetManifest]:
    """
    Draw a complete three-modality dataset around per-class centroids
    Modality latents share a component with weight modality_correlation
    """
    spec.validate()
    rng = np.random.default_rng(derive_seed(spec.seed, 'generate_synthetic'))
    centroids = _class_centroids(spec, rng)
    rho = spec.modality_correlation
    sigma = spec.noise_std

    read_out = None
    if spec.raw:
        read_out = rng.standard_normal((spec.n_genes, spec.dim)) / math.sqrt(spec.dim)
        side = int(math.ceil(math.sqrt(spec.n_patches)))
        grid = np.array([(i // side, i % side) for i in range(spec.n_patches)], dtype=np.int64)

    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    labels = labels[rng.permutation(labels.size)]

    records = []
    for idx, label in enumerate(labels):
        center = centroids[label]
        shared = rng.standard_normal(spec.dim)
        latents = {}
        modalities = {}
        for modality in MODALITIES:
            own = rng.standard_normal(spec.dim)
            latent = center + sigma * (math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own)
            latents[modality] = latent
            rows = spec.n_heads if modality == Modality.RNA else spec.n_components
            modalities[modality] = ModalityInput(
                global_vec=latent + sigma * rng.standard_normal(spec.dim),
                local=latent[None, :] + sigma * rng.standard_normal((rows, spec.dim)),
                present=True,
            )
        record = SampleRecord(sample_id=f"s{idx:05d}", label=int(label), modalities=modalities)
        if spec.raw:
            patches = latents[Modality.WSI][None, :] + sigma * rng.standard_normal((spec.n_patches, spec.dim))
            record.patch_embeddings = patches.astype(np.float32)
            record.patch_coords = grid.copy()
            record.rna_expression = read_out @ latents[Modality.RNA] + sigma * rng.standard_normal(spec.n_genes)
            record.sentence_embeddings = (latents[Modality.RPT][None, :]
                                          + sigma * rng.standard_normal((spec.n_sentences, spec.dim)))
        records.append(record)

    folds = {}
    if spec.samples_per_class >= spec.k_folds:
        folds = stratified_folds(records, spec.k_folds, spec.seed)
    else:
        logger.warning(f"Too few samples per class for {spec.k_folds} folds, manifest carries no folds")

    manifest = DatasetManifest(
        n_samples=len(records),
        n_classes=spec.n_classes,
        dim=spec.dim,
        n_components=spec.n_components,
        n_heads=spec.n_heads,
        folds=folds,
        provenance='synthetic',
        n_genes=spec.n_genes,
        raw=spec.raw,
    )
    logger.info(f"Generated {len(records)} synthetic samples ({spec.n_classes} classes, D={spec.dim}, "
                f"separation={spec.class_separation})")
    return records, manifest


def _masked_copy(record: SampleRecord, masked: List[Modality], keep_source: bool = True) -> SampleRecord:
    if not masked:
        return record
    modalities = dict(record.modalities)
    updates = {}
    for modality in masked:
        current = modalities[modality]
        modalities[modality] = ModalityInput(
            global_vec=np.zeros_like(current.global_vec),
            local=np.zeros_like(current.local),
            present=False,
        )
        if modality == Modality.WSI:
            updates.update(patch_embeddings=None, patch_coords=None)
        elif modality == Modality.RNA:
            updates['rna_expression'] = None
        else:
            updates['sentence_embeddings'] = None
    source = (record.source or record) if keep_source else None
    return replace(record, modalities=modalities, source=source, **updates)


def _spread_victims(n: int, count: int, rng: np.random.Generator) -> List[np.ndarray]:
    missing = np.zeros(n, dtype=np.int64)
    victims = []
    for modality in MODALITIES:
        order = rng.permutation(n)
        order = order[missing[order] < 2]
        order = order[np.argsort(missing[order], kind='stable')]
        if order.size < count:
            raise MaskingError(f"Cannot mask {count} samples of {modality.value} without removing "
                               f"every modality of some sample")
        chosen = order[:count]
        missing[chosen] += 1
        victims.append(chosen)
    return victims


def _independent_victims(n: int, count: int, rng: np.random.Generator, max_retries: int) -> List[np.ndarray]:
    for attempt in range(max_retries):
        victims = [rng.choice(n, size=count, replace=False) for _ in MODALITIES]
        missing = np.zeros(n, dtype=np.int64)
        for chosen in victims:
            missing[chosen] += 1
        if not np.any(missing == len(MODALITIES)):
            if attempt:
                logger.debug(f"Independent masking satisfied after {attempt + 1} draws")
            return victims
    raise MaskingError(f"No valid independent mask of {count}/{n} per modality within {max_retries} draws")


def apply_mask(records: List[SampleRecord], fraction: float, seed: int, strategy: str = 'spread',
               max_retries: int = 1000) -> List[SampleRecord]:
    """
    Zero exactly round(fraction * n) samples per modality, never all three of one sample
    'spread' masks still-complete samples first; 'independent' draws each modality
    separately and redraws until no sample is left empty
    """
    if not 0.0 <= fraction <= 1.0:
        raise MaskingError(f"Masking fraction {fraction} outside [0, 1]")
    n = len(records)
    count = int(math.floor(fraction * n + 0.5))
    if count == 0:
        return list(records)
    incomplete = [r.sample_id for r in records if not r.is_complete]
    if incomplete:
        raise MaskingError(f"apply_mask needs complete records, {len(incomplete)} already masked "
                           f"(first: {incomplete[0]})")
    if len(MODALITIES) * count > (len(MODALITIES) - 1) * n:
        raise MaskingError(f"Fraction {fraction} on {n} samples would remove every modality of some sample")

    rng = np.random.default_rng(derive_seed(seed, 'apply_mask'))
    if strategy == 'spread':
        victims = _spread_victims(n, count, rng)
    elif strategy == 'independent':
        victims = _independent_victims(n, count, rng, max_retries)
    else:
        raise ConfigurationError(f"Unknown masking strategy '{strategy}'", field='masking.strategy')

    masked_by_sample: Dict[int, List[Modality]] = {}
    for modality, chosen in zip(MODALITIES, victims):
        for i in chosen:
            masked_by_sample.setdefault(int(i), []).append(modality)

    out = [_masked_copy(r, masked_by_sample.get(i, [])) for i, r in enumerate(records)]
    n_complete = sum(r.is_complete for r in out)
    logger.info(f"Masked {count}/{n} samples per modality ({strategy}), {n_complete} complete samples remain")
    return out


def stratified_folds(records: List[SampleRecord], k_folds: int = 5, seed: int = 0) -> Dict[str, int]:
    labels = np.array([r.label for r in records])
    classes, counts = np.unique(labels, return_counts=True)
    short = [int(c) for c, n in zip(classes, counts) if n < k_folds]
    if short:
        raise StratificationError(f"Classes {short} have fewer than {k_folds} samples")
    splitter = StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=derive_seed(seed, 'stratified_folds'))
    folds = {}
    for fold, (_, test_idx) in enumerate(splitter.split(np.zeros(len(records)), labels)):
        for i in test_idx:
            folds[records[i].sample_id] = fold
    return folds


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _array_json(array: np.ndarray) -> list:
    return np.asarray(array, dtype=np.float64).tolist()


def write_dataset(records: List[SampleRecord], manifest: DatasetManifest, path: Path) -> Path:
    """Write manifest.json and samples/<id>.json (+ <id>.wsi.bin in raw mode)"""
    path = Path(path)
    samples_dir = path / 'samples'
    samples_dir.mkdir(parents=True, exist_ok=True)

    with open(path / 'manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)

    for record in records:
        payload = {'sample_id': record.sample_id, 'label': int(record.label)}
        for modality in MODALITIES:
            entry = record.modalities[modality]
            payload[modality.value] = {
                'present': bool(entry.present),
                'global': _array_json(entry.global_vec),
                'local': _array_json(entry.local),
            }
        if record.patch_embeddings is not None:
            bag = np.ascontiguousarray(record.patch_embeddings, dtype='<f4')
            bag.tofile(samples_dir / f"{record.sample_id}.wsi.bin")
            payload['wsi']['n_patch'] = int(bag.shape[0])
            if record.patch_coords is not None:
                payload['wsi']['coords'] = np.asarray(record.patch_coords).astype(int).tolist()
        if record.rna_expression is not None:
            payload['rna']['expression'] = _array_json(record.rna_expression)
        if record.sentence_embeddings is not None:
            payload['rpt']['sentences'] = _array_json(record.sentence_embeddings)
        with open(samples_dir / f"{record.sample_id}.json", 'w', encoding='utf-8') as f:
            json.dump(payload, f)

    logger.info(f"Wrote {len(records)} samples to {path}")
    return path


def _read_json(file: Path) -> Dict:
    try:
        with open(file, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise ParseError(f"Missing file {file}", file=str(file))
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON in {file}: {e}", file=str(file))


def _field(payload: Dict, key: str, file: Path, prefix: str = ''):
    if key not in payload:
        raise ParseError(f"Missing field '{prefix}{key}' in {file}", file=str(file), field=f"{prefix}{key}")
    return payload[key]


def _as_array(value, file: Path, name: str) -> np.ndarray:
    try:
        return np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"Field '{name}' in {file} is not numeric", file=str(file), field=name)


def _read_sample(file: Path, manifest: DatasetManifest, max_patches: int, seed: int) -> SampleRecord:
    payload = _read_json(file)
    sample_id = str(payload.get('sample_id', file.name[:-len('.json')]))
    label = _field(payload, 'label', file)
    if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < manifest.n_classes:
        raise ParseError(f"Label {label!r} of {sample_id} outside [0, {manifest.n_classes})",
                         file=str(file), field='label')

    modalities = {}
    for modality in MODALITIES:
        key = modality.value
        entry = _field(payload, key, file)
        present = _field(entry, 'present', file, f'{key}.')
        if not isinstance(present, bool):
            raise ParseError(f"'{key}.present' must be a boolean in {file}", file=str(file), field=f'{key}.present')
        global_vec = _as_array(_field(entry, 'global', file, f'{key}.'), file, f'{key}.global')
        local = _as_array(_field(entry, 'local', file, f'{key}.'), file, f'{key}.local')
        rows = manifest.local_rows(modality)
        if global_vec.shape != (manifest.dim,):
            raise DimensionError(f"{sample_id}: {key}.global has shape {global_vec.shape}, "
                                 f"manifest expects ({manifest.dim},)", sample_id=sample_id)
        if local.shape != (rows, manifest.dim):
            raise DimensionError(f"{sample_id}: {key}.local has shape {local.shape}, "
                                 f"manifest expects ({rows}, {manifest.dim})", sample_id=sample_id)
        if present:
            if not (np.all(np.isfinite(global_vec)) and np.all(np.isfinite(local))):
                raise ParseError(f"{sample_id}: non-finite values in present modality {key}",
                                 file=str(file), field=key)
        elif np.any(global_vec != 0) or np.any(local != 0):
            logger.warning(f"{sample_id}: {key} marked absent but carries values, zero-filling")
            global_vec = np.zeros_like(global_vec)
            local = np.zeros_like(local)
        modalities[modality] = ModalityInput(global_vec=global_vec, local=local, present=present)

    record = SampleRecord(sample_id=sample_id, label=label, modalities=modalities)
    wsi, rna, rpt = payload['wsi'], payload['rna'], payload['rpt']

    if 'n_patch' in wsi and modalities[Modality.WSI].present:
        n_patch = int(wsi['n_patch'])
        bag = np.fromfile(file.parent / f"{sample_id}.wsi.bin", dtype='<f4')
        if bag.size != n_patch * manifest.dim:
            raise DimensionError(f"{sample_id}: patch file holds {bag.size} floats, expected "
                                 f"{n_patch} x {manifest.dim}", sample_id=sample_id)
        bag = bag.reshape(n_patch, manifest.dim).astype(np.float32)
        coords = np.asarray(wsi['coords'], dtype=np.int64) if 'coords' in wsi else None
        if n_patch > max_patches:
            rng = np.random.default_rng(derive_seed(seed, 'ingest', sample_id))
            keep = np.sort(rng.choice(n_patch, size=max_patches, replace=False))
            bag = bag[keep]
            coords = coords[keep] if coords is not None else None
            logger.debug(f"{sample_id}: sampled {max_patches} of {n_patch} patches")
        record.patch_embeddings = bag
        record.patch_coords = coords
    if 'expression' in rna and modalities[Modality.RNA].present:
        expression = _as_array(rna['expression'], file, 'rna.expression')
        if manifest.n_genes and expression.shape != (manifest.n_genes,):
            raise DimensionError(f"{sample_id}: rna.expression has {expression.size} genes, "
                                 f"manifest expects {manifest.n_genes}", sample_id=sample_id)
        record.rna_expression = expression
    if 'sentences' in rpt and modalities[Modality.RPT].present:
        sentences = _as_array(rpt['sentences'], file, 'rpt.sentences')
        if sentences.ndim != 2 or sentences.shape[1] != manifest.dim:
            raise DimensionError(f"{sample_id}: rpt.sentences has shape {sentences.shape}",
                                 sample_id=sample_id)
        record.sentence_embeddings = sentences
    return record


def ingest(path: Path, max_patches: int = 2048, seed: int = 0) -> Tuple[List[SampleRecord], DatasetManifest]:
    """Load and validate a dataset directory written by write_dataset or an external exporter"""
    path = Path(path)
    manifest = DatasetManifest.from_dict(_read_json(path / 'manifest.json'), file=str(path / 'manifest.json'))
    samples_dir = path / 'samples'
    if not samples_dir.is_dir():
        raise ParseError(f"Missing samples directory in {path}", file=str(samples_dir))

    files = sorted(p for p in samples_dir.glob('*.json'))
    records = [_read_sample(file, manifest, max_patches, seed) for file in files]

    if len(records) != manifest.n_samples:
        raise ParseError(f"Manifest declares {manifest.n_samples} samples, found {len(records)}",
                         file=str(path / 'manifest.json'), field='n_samples')
    ids = {r.sample_id for r in records}
    if len(ids) != len(records):
        raise ParseError("Duplicate sample_id values", file=str(samples_dir), field='sample_id')
    if manifest.folds and set(manifest.folds) != ids:
        raise ParseError("Fold map does not cover exactly the dataset samples",
                         file=str(path / 'manifest.json'), field='folds')

    logger.info(f"Ingested {len(records)} samples from {path} (D={manifest.dim}, "
                f"{manifest.n_classes} classes, provenance={manifest.provenance})")
    return records, manifest


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def collate(records: List[SampleRecord], config: RunConfig) -> Dict[str, np.ndarray]:
    """Stack records into dense arrays keyed by modality; raw mode adds padded bags"""
    dtype = np.dtype(config.model.dtype)
    batch = {
        'sample_ids': np.array([r.sample_id for r in records]),
        'labels': np.array([r.label for r in records], dtype=np.int64),
        'presence': np.array([r.presence() for r in records], dtype=dtype),
    }
    for modality in MODALITIES:
        batch[f'{modality.value}_global'] = np.stack(
            [r.modalities[modality].global_vec for r in records]).astype(dtype)
        batch[f'{modality.value}_local'] = np.stack(
            [r.modalities[modality].local for r in records]).astype(dtype)

    if config.model.mode == 'raw':
        dim = config.model.dim
        sizes = []
        for r in records:
            if r.present(Modality.WSI) and r.patch_embeddings is None:
                raise DimensionError(f"{r.sample_id}: raw mode needs patch embeddings for a present WSI",
                                     sample_id=r.sample_id)
            if r.present(Modality.RNA) and r.rna_expression is None:
                raise DimensionError(f"{r.sample_id}: raw mode needs an RNA expression vector",
                                     sample_id=r.sample_id)
            sizes.append(0 if r.patch_embeddings is None else r.patch_embeddings.shape[0])
        width = max(1, max(sizes))
        patches = np.zeros((len(records), width, dim), dtype=dtype)
        mask = np.zeros((len(records), width), dtype=dtype)
        coords = np.full((len(records), width, 2), -1, dtype=np.int64)
        expression = np.zeros((len(records), config.model.rna_genes), dtype=dtype)
        for i, r in enumerate(records):
            if r.patch_embeddings is not None:
                n = r.patch_embeddings.shape[0]
                patches[i, :n] = r.patch_embeddings
                mask[i, :n] = 1.0
                if r.patch_coords is not None:
                    coords[i, :n] = r.patch_coords
            if r.rna_expression is not None:
                if r.rna_expression.shape != (config.model.rna_genes,):
                    raise DimensionError(f"{r.sample_id}: expression has {r.rna_expression.size} genes, "
                                         f"model expects {config.model.rna_genes}", sample_id=r.sample_id)
                expression[i] = r.rna_expression
        batch.update(wsi_patches=patches, wsi_patch_mask=mask, wsi_coords=coords, rna_expression=expression)
    return batch


def remove_incomplete(records: List[SampleRecord]) -> List[SampleRecord]:
    return [r for r in records if r.is_complete]


def split_by_fold(records: List[SampleRecord], folds: Dict[str, int], fold: int
                  ) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    train = [r for r in records if folds[r.sample_id] != fold]
    test = [r for r in records if folds[r.sample_id] == fold]
    return train, test


def drop_modality(records: List[SampleRecord], modality: Modality) -> List[SampleRecord]:
    """Mark one modality absent in every record"""
    return [_masked_copy(r, [modality], keep_source=False) if r.present(modality) else r for r in records]


def scenario_split(original: List[SampleRecord], masked: List[SampleRecord], folds: Dict[str, int], fold: int,
                   scenario: str) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Training and test records of one fold under a train/test masking scenario"""
    train_original, test_original = split_by_fold(original, folds, fold)
    train_masked, test_masked = split_by_fold(masked, folds, fold)
    if scenario == 'none':
        return train_original, test_original
    if scenario == 'masked_train_masked_test':
        return train_masked, test_masked
    if scenario == 'masked_train_unmasked_test':
        return train_masked, test_original
    if scenario == 'removed_train_unmasked_test':
        return remove_incomplete(train_masked), test_original
    raise ConfigurationError(f"Unknown scenario '{scenario}'", field='masking.scenario')
