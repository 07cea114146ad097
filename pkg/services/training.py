"""
MoSARe training service
Total loss composition with warm-up gated alignment terms, the mini-batch
Adam loop with online Sinkhorn-EM updates, and per-epoch metric logging
"""

import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from services.alignment import (
    ClassGMM,
    alignment_features,
    initialize_class_gmms,
    mcl_loss,
    symcl_total,
    update_from_config,
)
from services.config import RunConfig, derive_seed, with_dataset_shape
from services.data_service import (
    DatasetManifest,
    SampleRecord,
    apply_mask,
    collate,
    remove_incomplete,
    scenario_split,
)
from services.encoders import prepare_local_components
from services.errors import LabelError, TrainingDivergedError
from services.fusion import ModalityBundle
from services.metrics import classification_report
from services.model import MoSAReModel, build_model
from services.reconstruction import reconstruction_loss

logger = logging.getLogger(__name__)

LOSS_KEYS = ('symcl', 'mcl', 'rec', 'cls_global', 'cls_local', 'cls_agg')


def classification_losses(global_logits: Sequence[tf.Tensor], local_logits: Sequence[tf.Tensor],
                          aggregate_logits: tf.Tensor, labels) -> Tuple[tf.Tensor, tf.Tensor, tf.Tensor]:
    """Cross-entropy of every head; global and local terms average over the three modalities"""
    n_classes = int(aggregate_logits.shape[-1])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)]
        raise LabelError(f"Labels {sorted(set(bad.tolist()))} outside [0, {n_classes})")
    labels = tf.constant(labels)

    def cross_entropy(logits):
        return tf.reduce_mean(tf.nn.sparse_softmax_cross_entropy_with_logits(labels=labels, logits=logits))

    loss_global = tf.add_n([cross_entropy(x) for x in global_logits]) / float(len(global_logits))
    loss_local = tf.add_n([cross_entropy(x) for x in local_logits]) / float(len(local_logits))
    return loss_global, loss_local, cross_entropy(aggregate_logits)


def warmup_schedule(epoch: int, config: RunConfig) -> FrozenSet[str]:
    """Reconstruction and classification always; both alignments from the end of warm-up on"""
    if epoch < config.train.warmup_epochs:
        return frozenset({'rec', 'cls'})
    return frozenset({'rec', 'cls', 'symcl', 'mcl'})


def active_losses(epoch: int, config: RunConfig) -> FrozenSet[str]:
    active = set(warmup_schedule(epoch, config))
    if not config.alignment.enabled:
        active -= {'symcl', 'mcl'}
    if not config.reconstruction.enabled:
        active.discard('rec')
    return frozenset(active)


def total_loss(bundle: ModalityBundle, logits, labels, config: RunConfig, epoch: int,
               gmm: Optional[ClassGMM] = None, prototypes: Optional[np.ndarray] = None,
               targets: Optional[ModalityBundle] = None) -> Tuple[tf.Tensor, Dict[str, tf.Tensor]]:
    """
    lambda_symcl * SymCL + lambda_mcl * MCL + lambda_rec * L_rec + lambda_cls * (L_G + L_L + L_agg)
    Inactive terms are exact zeros in the breakdown; targets is the unmasked forward pass of the same batch
    """
    active = active_losses(epoch, config)
    zero = tf.zeros((), dtype=bundle.presence.dtype)
    global_logits, local_logits, aggregate_logits = logits
    cls_global, cls_local, cls_agg = classification_losses(global_logits, local_logits, aggregate_logits, labels)

    components = {
        'symcl': zero,
        'mcl': zero,
        'rec': zero,
        'cls_global': cls_global,
        'cls_local': cls_local,
        'cls_agg': cls_agg,
    }
    if 'symcl' in active:
        components['symcl'] = symcl_total(bundle, config.alignment.symcl_tau, config.alignment.symcl_tau_mode)
    if 'mcl' in active:
        components['mcl'] = mcl_loss(alignment_features(bundle.x_out), labels, gmm, config.alignment.mcl_tau,
                                     prototypes=prototypes)
    if 'rec' in active:
        components['rec'] = reconstruction_loss(bundle, on_masked=config.reconstruction.rec_loss_on_masked,
                                                targets=targets)

    weights = config.loss
    total = (weights.lambda_symcl * components['symcl']
             + weights.lambda_mcl * components['mcl']
             + weights.lambda_rec * components['rec']
             + weights.lambda_cls * (components['cls_global'] + components['cls_local'] + components['cls_agg']))
    return total, components


def loss_breakdown(total: tf.Tensor, components: Dict[str, tf.Tensor]) -> Dict[str, float]:
    breakdown = {k: float(v) for k, v in components.items()}
    breakdown['total'] = float(total)
    return breakdown


@dataclass
class TrainResult:
    model: MoSAReModel
    config: RunConfig
    n_classes: int
    gmm: Optional[ClassGMM] = None
    centroids: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)
    epochs_completed: int = 0

    def prepare(self, records: List[SampleRecord]) -> List[SampleRecord]:
        """Apply the training corpus centroids to raw-mode records"""
        if self.config.model.mode != 'raw':
            return records
        prepared, _ = prepare_local_components(records, self.config.model.n_components, self.config.train.seed,
                                               centroids=self.centroids,
                                               variance_floor=self.config.alignment.variance_floor)
        return prepared

    def predict_proba(self, records: List[SampleRecord]) -> np.ndarray:
        return self.model.predict_proba(self.prepare(records))


class MoSAReTrainer:
    """Owns the model, optimizer and class GMM state of one training run"""

    def __init__(self, config: RunConfig, n_classes: int, metrics_path: Optional[Path] = None):
        self.config = config
        self.n_classes = n_classes
        self.metrics_path = Path(metrics_path) if metrics_path else None
        tf.keras.utils.set_random_seed(config.train.seed)
        tf.config.experimental.enable_op_determinism()
        self.model = build_model(config, n_classes)
        train = config.train
        self.optimizer = tf.keras.optimizers.Adam(
            learning_rate=train.learning_rate,
            beta_1=train.beta_1,
            beta_2=train.beta_2,
            weight_decay=train.weight_decay or None,
        )
        self.gmm: Optional[ClassGMM] = None
        self.centroids: Dict[str, np.ndarray] = {}
        self.history: List[Dict[str, Any]] = []
        self.ground_truth: Dict[str, SampleRecord] = {}

    def _log_metrics(self, entry: Dict[str, Any]):
        self.history.append(entry)
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, 'a') as f:
                f.write(json.dumps(entry, sort_keys=True) + '\n')

    def _batches(self, records: List[SampleRecord], order: Optional[np.ndarray] = None):
        order = np.arange(len(records)) if order is None else order
        size = self.config.train.batch_size
        for start in range(0, len(records), size):
            yield [records[i] for i in order[start:start + size]]

    def _collect_features(self, records: List[SampleRecord]) -> Tuple[np.ndarray, np.ndarray]:
        features, labels = [], []
        for chunk in self._batches(records):
            batch = collate(chunk, self.config)
            bundle = self.model.forward(batch, training=False)
            features.append(alignment_features(bundle.x_out).numpy())
            labels.append(batch['labels'])
        return np.concatenate(features), np.concatenate(labels)

    def _initialize_gmms(self, records: List[SampleRecord]):
        features, labels = self._collect_features(records)
        align = self.config.alignment
        self.gmm = initialize_class_gmms(features, labels, self.n_classes, align.n_components,
                                         self.config.train.seed, align.variance_floor)

    def _keep_ground_truth(self, records: List[SampleRecord]):
        """Unmasked originals of masked training records, used as reconstruction targets"""
        rec = self.config.reconstruction
        sources = [r.source for r in records if r.source is not None]
        if not (rec.enabled and rec.rec_loss_on_masked and sources):
            return
        if self.config.model.mode == 'raw':
            sources, _ = prepare_local_components(sources, self.config.model.n_components, self.config.train.seed,
                                                  centroids=self.centroids,
                                                  variance_floor=self.config.alignment.variance_floor)
        self.ground_truth = {r.sample_id: r for r in sources}
        logger.info(f"Reconstruction targets kept for {len(sources)} masked samples")

    def target_batch(self, chunk: List[SampleRecord]) -> Optional[Dict[str, np.ndarray]]:
        if not any(r.sample_id in self.ground_truth for r in chunk):
            return None
        return collate([self.ground_truth.get(r.sample_id, r) for r in chunk], self.config)

    def train_step(self, batch: Dict[str, np.ndarray], epoch: int, batch_index: int,
                   target_batch: Optional[Dict[str, np.ndarray]] = None) -> Tuple[Dict[str, float], np.ndarray]:
        targets = None
        if target_batch is not None and 'rec' in active_losses(epoch, self.config):
            targets = self.model.forward(target_batch, training=False)
        with tf.GradientTape() as tape:
            bundle = self.model.forward(batch, training=True)
            total, components = total_loss(bundle, self.model.logits(bundle), batch['labels'], self.config,
                                           epoch, self.gmm, targets=targets)
        breakdown = loss_breakdown(total, components)
        if not np.all(np.isfinite(list(breakdown.values()))):
            raise TrainingDivergedError(f"Loss diverged at epoch {epoch}, batch {batch_index}: {breakdown}",
                                        epoch=epoch, batch=batch_index, breakdown=breakdown)

        variables = self.model.trainable_variables
        grads = tape.gradient(total, variables)
        # hard top-k selections leave some parameters without a gradient path
        grads = [tf.zeros_like(v) if g is None else g for g, v in zip(grads, variables)]
        if not all(bool(tf.reduce_all(tf.math.is_finite(g))) for g in grads):
            raise TrainingDivergedError(f"Non-finite gradient at epoch {epoch}, batch {batch_index}",
                                        epoch=epoch, batch=batch_index, breakdown=breakdown)
        grads, _ = tf.clip_by_global_norm(grads, self.config.train.clip_norm)
        self.optimizer.apply_gradients(zip(grads, variables))
        return breakdown, alignment_features(bundle.x_out).numpy()

    def evaluate_split(self, records: List[SampleRecord], epoch: int, split: str) -> Dict[str, Any]:
        """Mean loss components and auc / f1 / acc in inference mode"""
        sums: Dict[str, float] = defaultdict(float)
        probs, labels = [], []
        for chunk in self._batches(records):
            batch = collate(chunk, self.config)
            bundle = self.model.forward(batch, training=False)
            logits = self.model.logits(bundle)
            total, components = total_loss(bundle, logits, batch['labels'], self.config, epoch, self.gmm)
            for key, value in loss_breakdown(total, components).items():
                sums[key] += value * len(chunk)
            probs.append(tf.nn.softmax(logits[2], axis=-1).numpy())
            labels.append(batch['labels'])
        entry = {'epoch': epoch, 'split': split}
        entry.update({k: v / len(records) for k, v in sums.items()})
        entry.update(classification_report(np.concatenate(probs), np.concatenate(labels), self.n_classes))
        return entry

    def fit(self, train_records: List[SampleRecord], val_records: Optional[List[SampleRecord]] = None
            ) -> TrainResult:
        config = self.config
        if not train_records:
            raise LabelError("No training samples")
        if config.model.mode == 'raw':
            train_records, self.centroids = prepare_local_components(
                train_records, config.model.n_components, config.train.seed,
                variance_floor=config.alignment.variance_floor)
            if val_records:
                val_records, _ = prepare_local_components(val_records, config.model.n_components,
                                                          config.train.seed, centroids=self.centroids,
                                                          variance_floor=config.alignment.variance_floor)
        self._keep_ground_truth(train_records)

        logger.info(f"Training on {len(train_records)} samples"
                    f"{f', validating on {len(val_records)}' if val_records else ''} "
                    f"for {config.train.epochs} epochs (warm-up {config.train.warmup_epochs})")
        started = time.time()
        for epoch in range(config.train.epochs):
            active = active_losses(epoch, config)
            if 'mcl' in active and self.gmm is None:
                self._initialize_gmms(train_records)

            order = np.random.default_rng(derive_seed(config.train.seed, 'shuffle', epoch)).permutation(
                len(train_records))
            running: Dict[str, float] = defaultdict(float)
            n_batches = 0
            for batch_index, chunk in enumerate(self._batches(train_records, order)):
                batch = collate(chunk, config)
                breakdown, features = self.train_step(batch, epoch, batch_index, self.target_batch(chunk))
                if 'mcl' in active:
                    update_from_config(self.gmm, features, batch['labels'], config.alignment)
                for key, value in breakdown.items():
                    running[key] += value
                n_batches += 1

            train_entry = self.evaluate_split(train_records, epoch, 'train')
            train_entry['batch_loss'] = running['total'] / max(n_batches, 1)
            self._log_metrics(train_entry)
            message = f"Epoch {epoch + 1}/{config.train.epochs} loss={train_entry['batch_loss']:.4f} " \
                      f"acc={train_entry['acc']:.3f}"
            if val_records:
                val_entry = self.evaluate_split(val_records, epoch, 'val')
                self._log_metrics(val_entry)
                message += f" val_acc={val_entry['acc']:.3f}"
                if val_entry['auc'] is not None:
                    message += f" val_auc={val_entry['auc']:.3f}"
            logger.info(message)

        logger.info(f"Training finished in {time.time() - started:.1f}s")
        return TrainResult(model=self.model, config=config, n_classes=self.n_classes, gmm=self.gmm,
                           centroids=self.centroids, history=self.history, epochs_completed=config.train.epochs)


def resolve_for_dataset(config: RunConfig, manifest: DatasetManifest) -> RunConfig:
    return with_dataset_shape(config, manifest.dim, manifest.n_components, manifest.n_heads,
                              manifest.n_genes if config.model.mode == 'raw' else 0)


def train(records: List[SampleRecord], manifest: DatasetManifest, config: RunConfig,
          run_dir: Optional[Path] = None, holdout: bool = True) -> TrainResult:
    """
    Train one model; with fold assignments the configured holdout fold is the validation split
    masking.scenario applies to the training side, and to validation only for masked_train_masked_test
    Writes metrics.jsonl and checkpoint.zip into run_dir when given
    """
    from services.checkpoint import save_checkpoint

    config = resolve_for_dataset(config, manifest)
    masking = config.masking
    masked = records
    if masking.scenario != 'none':
        masked = apply_mask(records, masking.fraction, config.train.seed, masking.strategy, masking.max_retries)

    if holdout and manifest.folds:
        train_records, val_records = scenario_split(records, masked, manifest.folds,
                                                    config.evaluation.holdout_fold, masking.scenario)
    else:
        val_records = None
        train_records = remove_incomplete(masked) if masking.scenario == 'removed_train_unmasked_test' else masked

    metrics_path = Path(run_dir) / 'metrics.jsonl' if run_dir else None
    trainer = MoSAReTrainer(config, manifest.n_classes, metrics_path=metrics_path)
    result = trainer.fit(train_records, val_records)
    if run_dir:
        save_checkpoint(Path(run_dir) / 'checkpoint.zip', result)
    return result
