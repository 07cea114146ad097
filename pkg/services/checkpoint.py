"""
Checkpoint Service
Serializes a trained MoSARe model, its class GMMs and corpus centroids into one zip archive
and restores them into a rebuilt model
"""

import io
import json
import logging
import zipfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from services import __version__
from services.alignment import ClassGMM
from services.config import RunConfig, config_hash
from services.data_service import MODALITIES, Modality
from services.errors import ParseError
from services.model import build_model
from services.training import TrainResult

logger = logging.getLogger(__name__)

STATE_DTYPE = '<f8'


def placeholder_batch(config: RunConfig, size: int = 2) -> Dict[str, np.ndarray]:
    """All-present zero batch with the model's input shapes, used to create variables"""
    model = config.model
    dtype = np.dtype(model.dtype)
    rows = {Modality.WSI: model.n_components, Modality.RNA: model.n_heads, Modality.RPT: model.n_components}
    batch = {
        'sample_ids': np.array([f'placeholder{i}' for i in range(size)]),
        'labels': np.zeros(size, dtype=np.int64),
        'presence': np.ones((size, len(MODALITIES)), dtype=dtype),
    }
    for modality in MODALITIES:
        batch[f'{modality.value}_global'] = np.zeros((size, model.dim), dtype=dtype)
        batch[f'{modality.value}_local'] = np.zeros((size, rows[modality], model.dim), dtype=dtype)
    if model.mode == 'raw':
        batch.update(
            wsi_patches=np.zeros((size, 1, model.dim), dtype=dtype),
            wsi_patch_mask=np.ones((size, 1), dtype=dtype),
            wsi_coords=np.zeros((size, 1, 2), dtype=np.int64),
            rna_expression=np.zeros((size, model.rna_genes), dtype=dtype),
        )
    return batch


def parameter_dtype(variable) -> str:
    """Little-endian dtype string of a variable, '<f4' or '<f8'"""
    return np.dtype(variable.dtype.as_numpy_dtype).newbyteorder('<').str


def _pack(arrays: List[Tuple[str, np.ndarray, str]]) -> Tuple[List[Dict[str, Any]], bytes]:
    index, buffer, offset = [], io.BytesIO(), 0
    for name, array, dtype in arrays:
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        index.append({'name': name, 'shape': list(np.shape(array)), 'dtype': dtype, 'offset': offset,
                      'nbytes': len(data)})
        buffer.write(data)
        offset += len(data)
    return index, buffer.getvalue()


def _unpack(index: List[Dict[str, Any]], blob: bytes) -> List[Tuple[str, np.ndarray]]:
    arrays = []
    for entry in index:
        end = entry['offset'] + entry['nbytes']
        if end > len(blob):
            raise ParseError(f"Parameter '{entry['name']}' runs past the end of parameters.bin",
                             file='parameters.bin', field=entry['name'])
        data = np.frombuffer(blob[entry['offset']:end], dtype=entry['dtype'])
        arrays.append((entry['name'], data.reshape(entry['shape']).copy()))
    return arrays


def save_checkpoint(path: Path, result: TrainResult) -> Path:
    """
    config.json, model.json, parameters.json + parameters.bin and rng.json in one zip
    Parameters keep their own dtype; rng.json holds the seed and completed epochs,
    which fix every later shuffle order
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = result.config

    arrays = [(v.name, v.numpy(), parameter_dtype(v)) for v in result.model.weights]
    if result.gmm is not None:
        arrays += [(f'gmm/{k}', v, STATE_DTYPE) for k, v in result.gmm.to_arrays().items()]
    arrays += [(f'encoders/{k}', v, STATE_DTYPE) for k, v in sorted(result.centroids.items())]
    index, blob = _pack(arrays)

    model_info = {
        'version': __version__,
        'created': datetime.now().isoformat(),
        'n_classes': result.n_classes,
        'dim': config.model.dim,
        'n_components': config.model.n_components,
        'n_heads': config.model.n_heads,
        'mode': config.model.mode,
        'n_parameters': len(result.model.weights),
        'epochs_completed': result.epochs_completed,
    }
    rng_state = {
        'seed': config.train.seed,
        'epochs_completed': result.epochs_completed,
    }
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr('config.json', json.dumps({'config_hash': config_hash(config),
                                                    'config': config.to_dict()}, indent=2, sort_keys=True))
        archive.writestr('model.json', json.dumps(model_info, indent=2))
        archive.writestr('parameters.json', json.dumps(index, indent=2))
        archive.writestr('parameters.bin', blob)
        archive.writestr('rng.json', json.dumps(rng_state, indent=2))
        archive.writestr('history.json', json.dumps(result.history, default=float))
    logger.info(f"Checkpoint saved to {path} ({len(result.model.weights)} tensors, {len(blob)} bytes)")
    return path


def _read_json(archive: zipfile.ZipFile, name: str, path: Path) -> Any:
    try:
        return json.loads(archive.read(name))
    except KeyError:
        raise ParseError(f"Checkpoint {path} has no {name}", file=str(path), field=name)
    except json.JSONDecodeError as e:
        raise ParseError(f"Checkpoint {path}: malformed {name}: {e}", file=str(path), field=name)


def load_checkpoint(path: Path) -> TrainResult:
    """Rebuild the model from the stored config and assign parameters by position"""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"Checkpoint not found: {path}", file=str(path))
    try:
        archive = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise ParseError(f"Checkpoint {path} is not a zip archive: {e}", file=str(path))

    with archive:
        config = RunConfig.from_dict(_read_json(archive, 'config.json', path)['config'])
        model_info = _read_json(archive, 'model.json', path)
        index = _read_json(archive, 'parameters.json', path)
        rng_state = _read_json(archive, 'rng.json', path)
        history = json.loads(archive.read('history.json')) if 'history.json' in archive.namelist() else []
        arrays = _unpack(index, archive.read('parameters.bin'))

    parameters = [(n, a) for n, a in arrays if not n.startswith(('gmm/', 'encoders/'))]
    gmm_arrays = {n[len('gmm/'):]: a for n, a in arrays if n.startswith('gmm/')}
    centroids = {n[len('encoders/'):]: a for n, a in arrays if n.startswith('encoders/')}

    model = build_model(config, model_info['n_classes'])
    model.build_from_batch(placeholder_batch(config))
    variables = model.weights
    if len(variables) != len(parameters):
        raise ParseError(f"Checkpoint {path} holds {len(parameters)} tensors, model has {len(variables)}",
                         file=str(path), field='parameters.json')
    for variable, (name, value) in zip(variables, parameters):
        if tuple(variable.shape) != value.shape:
            raise ParseError(f"Shape mismatch for {name}: stored {value.shape}, model {tuple(variable.shape)}",
                             file=str(path), field=name)
        variable.assign(value.astype(variable.dtype.as_numpy_dtype))

    logger.info(f"Loaded checkpoint {path} ({len(parameters)} tensors, "
                f"{rng_state.get('epochs_completed', 0)} epochs)")
    return TrainResult(
        model=model,
        config=config,
        n_classes=model_info['n_classes'],
        gmm=ClassGMM.from_arrays(gmm_arrays) if gmm_arrays else None,
        centroids=centroids,
        history=history,
        epochs_completed=int(rng_state.get('epochs_completed', 0)),
    )
