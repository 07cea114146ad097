import json

import numpy as np
import pytest

from services.checkpoint import save_checkpoint
from services.data_service import MODALITIES, Modality, drop_modality, generate_synthetic
from services.explainability import (
    MATPLOTLIB_AVAILABLE,
    cross_term_magnitudes,
    export_attention,
    load_attention_export,
)
from services.training import train
from tests.helpers import small_config, small_spec


@pytest.fixture(scope='module')
def raw_run():
    records, manifest = generate_synthetic(small_spec(seed=5, n_patches=9, n_genes=12, n_sentences=5))
    return records, train(records, manifest, small_config(**{'model.mode': 'raw', 'train.epochs': 2}),
                          holdout=False)


@pytest.fixture(scope='module')
def precomputed_run():
    records, manifest = generate_synthetic(small_spec(seed=6))
    return records, train(records, manifest, small_config(**{'train.epochs': 2}), holdout=False)


class TestCrossTermMagnitudes:
    def test_hand_values(self):
        vectors = {
            Modality.WSI: np.array([[1.0, 0.0]]),
            Modality.RNA: np.array([[2.0, 0.0]]),
            Modality.RPT: np.array([[0.0, 3.0]]),
        }
        terms = cross_term_magnitudes(vectors, 0)
        assert terms['wsi'] == {'rna': 4.0, 'rpt': 0.0}
        assert terms['rna'] == {'wsi': 2.0, 'rpt': 0.0}
        assert terms['rpt'] == {'wsi': 0.0, 'rna': 0.0}


class TestExportAttention:
    def test_raw_export(self, raw_run, tmp_path):
        records, result = raw_run
        path = export_attention(result, records[:6], tmp_path / 'attention')
        entries = load_attention_export(path)
        assert [e['sample_id'] for e in entries] == [r.sample_id for r in records[:6]]
        for entry in entries:
            np.testing.assert_allclose(entry['patch_weights'].sum(), 1.0, atol=1e-6)
            assert entry['patch_coords'].shape == (9, 2)
            np.testing.assert_allclose(entry['token_weights'].sum(axis=-1), 1.0, atol=1e-6)
            for m in MODALITIES:
                assert entry['local_masks'][m.value].sum() == result.config.fusion.k_loc
                assert entry['local_experts'][m.value].shape[-1] == result.config.fusion.top_k
            np.testing.assert_allclose(entry['probabilities'].sum(), 1.0, atol=1e-5)
        if MATPLOTLIB_AVAILABLE:
            assert len(list((tmp_path / 'attention' / 'heatmaps').glob('*.png'))) == 6

    def test_reimport_matches_file(self, raw_run, tmp_path):
        records, result = raw_run
        path = export_attention(result, records[:3], tmp_path / 'attention', images=False)
        raw_lines = [json.loads(line) for line in path.read_text().splitlines()]
        for written, loaded in zip(raw_lines, load_attention_export(tmp_path / 'attention')):
            np.testing.assert_array_equal(loaded['patch_weights'], written['patch_weights'])
            for m in MODALITIES:
                np.testing.assert_array_equal(loaded['local_masks'][m.value], written['local_masks'][m.value])
            assert loaded['cma_global_terms'] == written['cma_global_terms']
        assert not (tmp_path / 'attention' / 'heatmaps').exists()

    def test_precomputed_export_has_no_patches(self, precomputed_run, tmp_path):
        records, result = precomputed_run
        path = export_attention(result, records[:4], tmp_path / 'attention')
        entries = load_attention_export(path)
        assert all('patch_weights' not in e and 'token_weights' not in e for e in entries)
        assert all(e['final_experts'].shape == (6, 2) for e in entries)
        assert not (tmp_path / 'attention' / 'heatmaps').exists()

    def test_absent_modality_has_no_cross_terms(self, precomputed_run, tmp_path):
        records, result = precomputed_run
        two = drop_modality(records[:2], Modality.RPT)
        entries = load_attention_export(export_attention(result, two, tmp_path / 'attention'))
        for entry in entries:
            assert entry['presence'] == [True, True, False]
            assert entry['cma_global_terms']['wsi']['rpt'] == 0.0
            assert entry['cma_local_terms']['rpt'] == {'wsi': 0.0, 'rna': 0.0}

    def test_from_checkpoint_path(self, precomputed_run, tmp_path):
        records, result = precomputed_run
        checkpoint = save_checkpoint(tmp_path / 'checkpoint.zip', result)
        direct = load_attention_export(export_attention(result, records[:2], tmp_path / 'a'))
        restored = load_attention_export(export_attention(checkpoint, records[:2], tmp_path / 'b'))
        for x, y in zip(direct, restored):
            np.testing.assert_allclose(x['probabilities'], y['probabilities'], atol=1e-7)
