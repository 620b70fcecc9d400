# -*- coding: utf-8 -*-
"""合成语料、划分、归一化、批量读取"""

import os

import numpy as np
import pytest
import torch

from archive import read_archive
from body_model import load_body_model
from corpus import (CONTAINERS, OBJECT_VOCAB, SPLITS, CorpusManifest, HoiDataset, NormStats, Vocabulary,
                    generate_synthetic_corpus, human_dim_of, initial_scene, load_batch, make_primitive, read_obj,
                    split_counts, tokenize)
from errors import ValidationError
from motion_repr import human_feature_width, rot6d_to_matrix


def test_split_counts():
    assert split_counts(100, (0.8, 0.15, 0.05)) == [80, 15, 5]
    assert split_counts(10, (0.8, 0.15, 0.05)) == [8, 1, 1]
    assert split_counts(3, (0.8, 0.15, 0.05)) == [1, 1, 1]
    assert sum(split_counts(17, (0.8, 0.15, 0.05))) == 17


def test_tokenize_and_vocab(tmp_path):
    assert tokenize("Put the Apple, then the cup's lid.") == ['put', 'the', 'apple', ',', 'then', 'the', "cup's",
                                                              'lid', '.']
    vocab = Vocabulary.build(['pick up the apple', 'put it into the bowl'])
    encoded = vocab.encode('pick up the pear', 6)
    assert encoded.length == 4
    assert encoded.ids[3] == vocab.unk_id
    assert encoded.ids[4:] == [vocab.pad_id, vocab.pad_id]
    vocab.save(str(tmp_path / 'vocab.json'))
    assert Vocabulary.load(str(tmp_path / 'vocab.json')).tokens == vocab.tokens


@pytest.mark.parametrize('name', sorted(OBJECT_VOCAB))
def test_primitives_are_centered(name):
    vertices, faces = make_primitive(name)
    assert len(faces) > 0
    assert np.allclose(0.5 * (vertices.min(0) + vertices.max(0)), 0.0, atol=1e-9)


def test_cylinder_axis_is_vertical():
    vertices, _ = make_primitive('bottle')
    extent = np.ptp(vertices, axis=0)
    assert np.isclose(extent[1], OBJECT_VOCAB['bottle'][1][1])


def test_read_obj(tmp_path):
    path = tmp_path / 'quad.obj'
    path.write_text('# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n', encoding='utf-8')
    vertices, faces = read_obj(str(path))
    assert vertices.shape == (4, 3)
    assert faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    empty = tmp_path / 'empty.obj'
    empty.write_text('v 0 0 0\n', encoding='utf-8')
    with pytest.raises(ValidationError):
        read_obj(str(empty))


def test_corpus_layout(corpus, tiny_config):
    assert len(corpus.ids) == tiny_config.num_sequences
    assert sorted(set(corpus.splits.values())) == sorted(SPLITS)
    assert [len(corpus.ids_for(s)) for s in SPLITS] == [4, 1, 1]
    loaded = CorpusManifest.load(corpus.root)
    assert loaded.splits == corpus.splits
    with pytest.raises(ValidationError):
        loaded.ids_for('holdout')


def test_sequences_are_well_formed(corpus, tiny_config):
    body_model = load_body_model(tiny_config.body_model)
    for seq_id in corpus.ids:
        seq = read_archive(corpus.path_of(seq_id))
        assert tiny_config.min_frames <= seq.num_frames <= tiny_config.max_frames
        assert seq.human.num_joints == body_model.num_joints
        assert len(seq.objects) == tiny_config.num_objects
        assert any(name not in CONTAINERS for name in seq.object_names)
        assert all(seg.end - seg.start >= 15 for seg in seq.segments)
        for obj in seq.objects:
            first = rot6d_to_matrix(torch.as_tensor(obj.rotation[0], dtype=torch.float64))
            assert torch.allclose(first, torch.eye(3, dtype=torch.float64), atol=1e-5)
        assert len(seq.contacts) == len(seq.segments)


def test_grasped_object_follows_wrist(corpus):
    seq = read_archive(corpus.path_of(corpus.ids[0]))
    contact = seq.contacts[0]
    obj, joint = contact['object'], contact['joint']
    start, end = contact['start'], contact['end']
    offset = seq.objects[obj].translation[start:end + 1] - seq.human.positions[start:end + 1, joint]
    distance = np.linalg.norm(offset, axis=-1)
    assert np.ptp(distance) < 1e-4


def test_generation_is_deterministic(tiny_config, tmp_path):
    cfg = tiny_config.replace(num_sequences=3)
    a = generate_synthetic_corpus(cfg, str(tmp_path / 'a'))
    b = generate_synthetic_corpus(cfg, str(tmp_path / 'b'))
    for seq_id in a.ids:
        with open(os.path.join(a.path_of(seq_id), 'tensors.bin'), 'rb') as fa, \
                open(os.path.join(b.path_of(seq_id), 'tensors.bin'), 'rb') as fb:
            assert fa.read() == fb.read()


def test_corpus_config_errors(tiny_config, tmp_path):
    with pytest.raises(ValidationError):
        generate_synthetic_corpus(tiny_config.replace(num_sequences=2), str(tmp_path / 'x'))
    with pytest.raises(ValidationError):
        generate_synthetic_corpus(tiny_config.replace(min_frames=20, max_frames=40), str(tmp_path / 'y'))


def test_normalization_uses_train_split(corpus):
    stats = corpus.load_stats()
    train = [read_archive(corpus.path_of(i)) for i in corpus.ids_for('train')]
    human = np.concatenate([s.human.flatten() for s in train]).astype(np.float64)
    normalized = stats.normalize_human(human)
    varying = stats.human_std > 10 * stats.min_std
    assert np.allclose(normalized.mean(0)[varying], 0.0, atol=1e-6)
    assert np.allclose(normalized.std(0)[varying], 1.0, atol=1e-6)
    assert np.allclose(stats.denormalize_human(normalized), human)


def test_norm_stats_json_is_exact(tmp_path):
    stats = NormStats(human_mean=np.array([0.1, 1 / 3]), human_std=np.array([1.0, 2.0]),
                      object_mean=np.arange(9) / 7.0, object_std=np.ones(9))
    stats.save(str(tmp_path / 'stats.json'))
    back = NormStats.load(str(tmp_path / 'stats.json'))
    assert np.array_equal(back.human_mean, stats.human_mean)
    assert np.array_equal(back.object_mean, stats.object_mean)


def test_batches(corpus, tiny_config):
    dataset = HoiDataset(corpus, 'train')
    batch = next(dataset.batches(3, seed=1))
    n_obj = tiny_config.num_objects
    assert batch.human.shape == (3, tiny_config.max_motion_len, human_dim_of(corpus))
    assert batch.objects.shape == (3, tiny_config.max_motion_len, 9 * n_obj)
    assert batch.geometry.shape == (3, n_obj, tiny_config.bps_points, 3)
    assert torch.equal(batch.mask.sum(1).long(), batch.lengths)
    assert (batch.human[batch.mask == 0] == 0).all()
    for row in batch.object_order:
        assert sorted(row.tolist()) == list(range(n_obj))


def test_batch_condition_is_raw_scale(corpus):
    dataset = HoiDataset(corpus, 'train')
    batch = next(dataset.batches(2, seed=0, shuffle_objects=False))
    cond = batch.condition(3, dataset.stats)
    raw_h, _ = batch.raw(dataset.stats)
    assert cond.human_init.shape[1] == 3
    assert torch.allclose(cond.human_init, raw_h[:, :3])


def test_load_batch_is_seeded(corpus):
    a = load_batch(corpus, 'train', 2, seed=4)
    b = load_batch(corpus, 'train', 2, seed=4)
    assert a.ids == b.ids
    assert torch.equal(a.object_order, b.object_order)
    with pytest.raises(ValidationError):
        load_batch(corpus, 'dev', 2)


def test_segment_level_dataset(corpus, tiny_config):
    dataset = HoiDataset(corpus, 'train', level='segment', context=tiny_config.overlap_frames)
    sequences = dataset.sequences
    assert len(dataset) == sum(len(s.segments) for s in sequences)
    assert all(item.text for item in dataset.items)


def test_initial_scene(tiny_config):
    features, geometries = initial_scene(tiny_config, ['apple', 'bowl'])
    assert features.shape == (1, human_feature_width(tiny_config.num_joints) + 18)
    assert [g.name for g in geometries] == ['apple', 'bowl']
    with pytest.raises(ValidationError):
        initial_scene(tiny_config, ['apple', 'spaceship'])
    with pytest.raises(ValidationError):
        initial_scene(tiny_config, ['apple'])


if __name__ == '__main__':
    pytest.main([__file__])
