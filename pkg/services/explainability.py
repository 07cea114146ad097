"""
Attention export for trained MoSARe models
Per-sample ABMIL patch weights, RNA token attention, local selection masks,
cross-modal attention term magnitudes and routed expert indices as JSON lines,
plus patch heatmaps when coordinates are known
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import tensorflow as tf

from services.checkpoint import load_checkpoint
from services.data_service import MODALITIES, SampleRecord, collate
from services.fusion import ModalityBundle
from services.training import TrainResult

logger = logging.getLogger(__name__)

try:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    MATPLOTLIB_AVAILABLE = True
except ImportError:
    MATPLOTLIB_AVAILABLE = False
    logger.warning("matplotlib not available - attention export writes JSON only")

ARRAY_FIELDS = ('patch_weights', 'patch_coords', 'token_weights', 'final_experts', 'probabilities')
NESTED_ARRAY_FIELDS = ('local_masks', 'local_experts')


def cross_term_magnitudes(vectors: Dict, i: int) -> Dict[str, Dict[str, float]]:
    """|a.b| * ||b|| of every partner term a + (a.b) b, per modality of sample i"""
    out = {}
    for modality in MODALITIES:
        a = np.asarray(vectors[modality][i], dtype=np.float64)
        out[modality.value] = {}
        for partner in MODALITIES:
            if partner == modality:
                continue
            b = np.asarray(vectors[partner][i], dtype=np.float64)
            out[modality.value][partner.value] = float(abs(a @ b) * np.linalg.norm(b))
    return out


def _sample_entry(record: SampleRecord, bundle: ModalityBundle, probs: np.ndarray, i: int) -> Dict[str, Any]:
    entry: Dict[str, Any] = {
        'sample_id': record.sample_id,
        'label': int(record.label),
        'presence': [bool(p) for p in record.presence()],
        'probabilities': probs[i].tolist(),
        'local_masks': {m.value: bundle.local_masks[m][i].numpy().tolist() for m in MODALITIES},
        'cma_global_terms': cross_term_magnitudes({m: bundle.globals_[m].numpy() for m in MODALITIES}, i),
        'cma_local_terms': cross_term_magnitudes({m: bundle.local_means[m].numpy() for m in MODALITIES}, i),
    }
    if bundle.local_experts:
        entry['local_experts'] = {m.value: bundle.local_experts[m][i].numpy().tolist() for m in MODALITIES}
    if bundle.final_experts is not None:
        entry['final_experts'] = bundle.final_experts[i].numpy().tolist()
    if 'patch_weights' in bundle.attention and record.patch_embeddings is not None:
        n = record.patch_embeddings.shape[0]
        entry['patch_weights'] = bundle.attention['patch_weights'][i, :n].numpy().tolist()
        if record.patch_coords is not None:
            entry['patch_coords'] = np.asarray(record.patch_coords).tolist()
    if 'token_weights' in bundle.attention and record.rna_expression is not None:
        entry['token_weights'] = bundle.attention['token_weights'][i].numpy().tolist()
    return entry


def render_heatmap(entry: Dict[str, Any], path: Path) -> Optional[Path]:
    """Scatter of patch grid positions coloured by attention weight"""
    if not MATPLOTLIB_AVAILABLE or 'patch_coords' not in entry:
        return None
    coords = np.asarray(entry['patch_coords'])
    weights = np.asarray(entry['patch_weights'])
    fig, ax = plt.subplots(figsize=(4, 4))
    points = ax.scatter(coords[:, 1], coords[:, 0], c=weights, cmap='viridis', marker='s', s=60)
    ax.invert_yaxis()
    ax.set_title(f"{entry['sample_id']} (label {entry['label']})")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(points, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)
    return path


def export_attention(checkpoint: Union[Path, str, TrainResult], records: List[SampleRecord], out_path: Path,
                     batch_size: int = 64, images: bool = True) -> Path:
    """Write attention.jsonl (and heatmaps/<id>.png when patch coordinates exist) under out_path"""
    result = checkpoint if isinstance(checkpoint, TrainResult) else load_checkpoint(Path(checkpoint))
    records = result.prepare(records)
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    export_file = out_path / 'attention.jsonl'
    heatmap_dir = out_path / 'heatmaps'

    n_images = 0
    with open(export_file, 'w') as f:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            bundle = result.model.forward(collate(chunk, result.config), training=False)
            _, _, aggregate = result.model.logits(bundle)
            probs = tf.nn.softmax(aggregate, axis=-1).numpy()
            for i, record in enumerate(chunk):
                entry = _sample_entry(record, bundle, probs, i)
                f.write(json.dumps(entry) + '\n')
                if images and 'patch_coords' in entry:
                    heatmap_dir.mkdir(exist_ok=True)
                    if render_heatmap(entry, heatmap_dir / f'{record.sample_id}.png'):
                        n_images += 1
    logger.info(f"Exported attention for {len(records)} samples to {export_file} ({n_images} heatmaps)")
    return export_file


def load_attention_export(path: Path) -> List[Dict[str, Any]]:
    """Read attention.jsonl back; numeric fields become numpy arrays"""
    path = Path(path)
    if path.is_dir():
        path = path / 'attention.jsonl'
    entries = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            entry = json.loads(line)
            for key in ARRAY_FIELDS:
                if key in entry:
                    entry[key] = np.asarray(entry[key])
            for key in NESTED_ARRAY_FIELDS:
                if key in entry:
                    entry[key] = {m: np.asarray(v) for m, v in entry[key].items()}
            entries.append(entry)
    return entries
