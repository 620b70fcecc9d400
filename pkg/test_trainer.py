# -*- coding: utf-8 -*-
"""训练循环、checkpoint 与续训"""

import json
import os

import numpy as np
import pytest
import torch

from archive import load_checkpoint
from denoiser import OPTIM_PREFIX
from errors import ConfigError, TrainingDivergedError
from trainer import LOG_FILE, Trainer, train


def _weights(directory):
    tensors, _ = load_checkpoint(directory, kind='denoiser')
    return {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}


def test_training_writes_log_and_checkpoints(tiny_config, corpus, tmp_path):
    cfg = tiny_config.replace(epochs=2)
    result = train(cfg, corpus, str(tmp_path))
    assert result.epochs == 2
    assert np.isfinite(result.final_loss)
    for name in ('last', 'best', 'epoch_0001', 'epoch_0002'):
        assert os.path.isdir(tmp_path / name)
    with open(tmp_path / LOG_FILE, 'r', encoding='utf-8') as f:
        records = [json.loads(line) for line in f]
    assert [r['epoch'] for r in records] == [0, 1]
    assert records[1]['lr'] == pytest.approx(cfg.lr * cfg.lr_decay)
    for key in ('loss', 'val_loss', 'loss_pos', 'loss_vel', 'loss_pen', 'loss_dis', 'loss_rec', 'rss_mb'):
        assert key in records[0]

    _, meta = load_checkpoint(str(tmp_path / 'last'), kind='denoiser')
    assert meta['fingerprint'] == cfg.fingerprint()
    assert meta['epoch'] == 1
    assert meta['vocab'][:2] == ['<pad>', '<unk>']


def test_resume_matches_uninterrupted_run(tiny_config, corpus, tmp_path):
    full = train(tiny_config.replace(epochs=2), corpus, str(tmp_path / 'full'))
    train(tiny_config.replace(epochs=1), corpus, str(tmp_path / 'split'))
    resumed = train(tiny_config.replace(epochs=2), corpus, str(tmp_path / 'split'), resume=True)
    assert resumed.steps == full.steps
    a, b = _weights(full.last_checkpoint), _weights(resumed.last_checkpoint)
    assert a.keys() == b.keys()
    for name in a:
        assert np.allclose(a[name], b[name], atol=1e-6), name


def test_overfit_mode_keeps_lr(tiny_config, corpus, tmp_path):
    cfg = tiny_config.replace(epochs=3, overfit=True, save_every=0)
    result = train(cfg, corpus, str(tmp_path))
    assert [r['lr'] for r in result.history] == [cfg.lr] * 3
    assert not os.path.isdir(tmp_path / 'epoch_0001')


def test_step_limit(tiny_config, corpus, tmp_path):
    result = train(tiny_config.replace(epochs=5, max_steps=1), corpus, str(tmp_path))
    assert result.steps == 1
    assert len(result.history) == 1


def test_segment_mode_picks_k_within_bounds(tiny_config, corpus, tmp_path):
    trainer = Trainer(tiny_config.replace(train_mode='seg'), corpus, str(tmp_path))
    batch = next(trainer.train_set.batches(2, seed=0))
    rng = np.random.default_rng(0)
    ks = {trainer._pick_k(batch, rng) for _ in range(50)}
    assert min(ks) >= 1
    assert max(ks) <= min(tiny_config.k_max, int(batch.lengths.min()) - 1)


@pytest.mark.parametrize('generation, prob, expected', [
    ('joint', 1.0, {False}),
    ('consecutive', 1.0, {True}),
    ('consecutive', 0.0, {False}),
])
def test_consecutive_training_conditions_on_object_track(tiny_config, corpus, tmp_path, monkeypatch,
                                                         generation, prob, expected):
    trainer = Trainer(tiny_config.replace(generation=generation, object_track_prob=prob), corpus, str(tmp_path))
    seen = []
    forward = trainer.model.forward

    def spy(x_h, x_o, condition, t, **kwargs):
        seen.append(condition.object_track is not None)
        if condition.object_track is not None:
            assert torch.equal(condition.object_track[:, :condition.k], condition.object_init)
        return forward(x_h, x_o, condition, t, **kwargs)

    monkeypatch.setattr(trainer.model, 'forward', spy)
    batch = next(trainer.train_set.batches(2, seed=0))
    generator = torch.Generator().manual_seed(0)
    for _ in range(4):
        total, _ = trainer.compute_losses(batch, 1, generator)
        assert torch.isfinite(total)
    assert set(seen) == expected


def test_divergence_is_reported(tiny_config, corpus, tmp_path, monkeypatch):
    trainer = Trainer(tiny_config.replace(epochs=1), corpus, str(tmp_path))

    def broken(batch, k, generator):
        value = torch.tensor(float('nan'), requires_grad=True)
        return value, {'pos': value}

    monkeypatch.setattr(trainer, 'compute_losses', broken)
    with pytest.raises(TrainingDivergedError) as info:
        trainer.fit()
    assert info.value.code == 'diverged'


def test_corpus_mismatch(tiny_config, corpus, tmp_path):
    with pytest.raises(ConfigError):
        Trainer(tiny_config.replace(num_objects=3), corpus, str(tmp_path))


@pytest.mark.slow
def test_overfit_one_batch_drives_loss_down(tiny_config, corpus, tmp_path):
    cfg = tiny_config.replace(epochs=200, overfit=True, lr=1e-3, save_every=0, dropout=0.0, cond_dropout=0.0)
    result = train(cfg, corpus, str(tmp_path))
    losses = [r['loss'] for r in result.history]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


if __name__ == '__main__':
    pytest.main([__file__])
