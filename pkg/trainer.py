# -*- coding: utf-8 -*-
"""
训练循环
- Adam + 每个 epoch 的指数学习率衰减 (lr_e = lr * lr_decay^e)
- 每个 epoch 一行 JSON 日志 (train_log.jsonl)
- checkpoint: last (每个 epoch)、epoch_XXXX (每 save_every 个 epoch)、best (验证集最好)
- 随机数按 (seed, epoch) 重新播种，从 last 续训与不中断训练一致
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import psutil
import torch
from tqdm import tqdm

from archive import load_checkpoint
from body_model import load_body_model
from corpus import HoiDataset, human_dim_of
from denoiser import OPTIM_PREFIX, DenoiserConfig, build_denoiser, load_embedding_file, save_denoiser
from diffusion import make_schedule, training_batch
from errors import ConfigError, TrainingDivergedError
from losses import LossWeights, hoi_losses, loss_rec

logger = logging.getLogger(__name__)

LOG_FILE = 'train_log.jsonl'
LAST, BEST = 'last', 'best'


@dataclass
class TrainResult:
    out_dir: str
    last_checkpoint: str
    best_checkpoint: str
    epochs: int
    steps: int
    final_loss: float
    best_val: float
    history: list = field(default_factory=list)


def _epoch_seed(seed, epoch):
    return int(seed) * 10007 + int(epoch)


def rss_mb():
    return psutil.Process(os.getpid()).memory_info().rss / (1024 * 1024)


class Trainer:
    def __init__(self, cfg, manifest, out_dir, progress=False):
        if cfg.num_objects != manifest.num_objects:
            raise ConfigError(f'config expects {cfg.num_objects} objects, corpus has {manifest.num_objects}')
        if cfg.num_joints != manifest.num_joints:
            raise ConfigError(f'config expects {cfg.num_joints} joints, corpus has {manifest.num_joints}')
        self.cfg = cfg
        self.out_dir = out_dir
        self.progress = progress
        os.makedirs(out_dir, exist_ok=True)

        level = 'sequence' if cfg.train_mode == 'gen' else 'segment'
        max_len = cfg.max_motion_len if level == 'sequence' else cfg.max_seg_len
        max_text = cfg.max_text_len if level == 'sequence' else cfg.max_seg_text_len
        self.train_set = HoiDataset(manifest, 'train', level, max_len, max_text, context=cfg.overlap_frames)
        self.val_set = HoiDataset(manifest, 'val', level, max_len, max_text, context=cfg.overlap_frames)
        self.stats = self.train_set.stats
        self.vocab = self.train_set.vocab

        vectors = None
        if cfg.text_embedding_file:
            vectors = load_embedding_file(cfg.text_embedding_file, self.vocab)
        self.model_config = DenoiserConfig.from_run_config(cfg, human_dim_of(manifest), len(self.vocab),
                                                           0 if vectors is None else vectors.shape[1])
        torch.manual_seed(cfg.seed)
        self.model = build_denoiser(self.model_config, vectors)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=cfg.lr_decay)
        self.schedule = make_schedule(cfg.schedule, cfg.diffusion_steps)
        self.body_model = load_body_model(cfg.body_model)
        self.weights = LossWeights.from_config(cfg)

        self.epoch = 0
        self.step = 0
        self.best_val = float('inf')
        self.last_saved = None

    # ------------------------------------------------------------------

    def _pick_k(self, batch, rng):
        if self.cfg.train_mode == 'gen':
            k = self.cfg.cond_frames
        else:
            k = int(rng.integers(1, self.cfg.k_max + 1))
        return max(1, min(k, int(batch.lengths.min()) - 1))

    def _track_objects(self, generator):
        # 两阶段生成: 按概率把整段物体运动作为条件
        if self.cfg.generation != 'consecutive':
            return False
        return bool(torch.rand(1, generator=generator) < self.cfg.object_track_prob)

    def compute_losses(self, batch, k, generator):
        """一个 batch 的全部损失，返回 (total, parts)"""
        x0 = torch.cat([batch.human, batch.objects], dim=-1)
        t, _, xt = training_batch(x0, self.schedule, generator)
        d_h = batch.human.shape[-1]
        condition = batch.condition(k, with_objects=self._track_objects(generator))
        pred_h, pred_o = self.model(xt[..., :d_h], xt[..., d_h:], condition, t, frame_mask=batch.mask)

        gt_h, gt_o = batch.raw(self.stats)
        total, parts = hoi_losses(self.stats.denormalize_human(pred_h), self.stats.denormalize_objects(pred_o),
                                  gt_h, gt_o, batch.mask, batch.samples, self.body_model, self.cfg, self.weights)
        parts['rec'] = loss_rec(torch.cat([pred_h, pred_o], dim=-1), x0, batch.mask)
        total = total + self.weights.rec * parts['rec']
        return total, parts

    def _train_batches(self, epoch):
        if self.cfg.overfit:
            return [next(self.train_set.batches(self.cfg.batch_size, seed=self.cfg.seed, epoch=0))]
        return self.train_set.batches(self.cfg.batch_size, seed=self.cfg.seed, epoch=epoch)

    def train_epoch(self, epoch):
        seed = _epoch_seed(self.cfg.seed, epoch)
        torch.manual_seed(seed)
        generator = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        self.model.train()
        totals, part_sums = [], {}
        for batch in self._train_batches(epoch):
            total, parts = self.compute_losses(batch, self._pick_k(batch, rng), generator)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f'loss became {total.item()} at epoch {epoch}, step {self.step}',
                                            last_checkpoint=self.last_saved, epoch=epoch, step=self.step)
            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()
            self.step += 1
            totals.append(total.item())
            for name, value in parts.items():
                part_sums.setdefault(name, []).append(float(value.detach()))
            if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                break
        return float(np.mean(totals)) if totals else float('nan'), \
            {name: float(np.mean(v)) for name, v in part_sums.items()}

    @torch.no_grad()
    def validate(self):
        self.model.eval()
        generator = torch.Generator().manual_seed(self.cfg.seed)
        rng = np.random.default_rng(self.cfg.seed)
        totals = []
        for batch in self.val_set.batches(self.cfg.batch_size, seed=self.cfg.seed, shuffle=False,
                                          shuffle_objects=False):
            total, _ = self.compute_losses(batch, self._pick_k(batch, rng), generator)
            totals.append(total.item())
        return float(np.mean(totals)) if totals else float('nan')

    # ------------------------------------------------------------------

    def save(self, name):
        path = os.path.join(self.out_dir, name)
        opt = self.optimizer.state_dict()
        tensors = {}
        for idx, state in opt['state'].items():
            for key, value in state.items():
                tensors[f'{OPTIM_PREFIX}{idx}.{key}'] = torch.as_tensor(value).detach().cpu().numpy()
        meta = {
            'run_config': self.cfg.to_dict(),
            'fingerprint': self.cfg.fingerprint(),
            'epoch': self.epoch,
            'step': self.step,
            'best_val': self.best_val if np.isfinite(self.best_val) else None,
            'param_groups': opt['param_groups'],
            'scheduler': self.scheduler.state_dict(),
            'vocab': self.vocab.tokens,
            'stats': self.stats.to_dict(),
        }
        save_denoiser(self.model, path, meta, tensors)
        return path

    def resume(self, directory=None):
        directory = directory or os.path.join(self.out_dir, LAST)
        tensors, meta = load_checkpoint(directory, kind='denoiser')
        if DenoiserConfig(**meta['config']) != self.model_config:
            raise ConfigError(f'checkpoint {directory} was trained with a different network config')
        self.model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()
                                    if not k.startswith(OPTIM_PREFIX)})
        state = {}
        for name, value in tensors.items():
            if not name.startswith(OPTIM_PREFIX):
                continue
            idx, key = name[len(OPTIM_PREFIX):].split('.', 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(value)
        self.optimizer.load_state_dict({'state': state, 'param_groups': meta['param_groups']})
        self.scheduler.load_state_dict(meta['scheduler'])
        self.epoch = int(meta['epoch']) + 1
        self.step = int(meta['step'])
        self.best_val = float('inf') if meta.get('best_val') is None else float(meta['best_val'])
        self.last_saved = directory
        logger.info('resumed from %s at epoch %d, step %d', directory, self.epoch, self.step)

    def _log(self, record):
        with open(os.path.join(self.out_dir, LOG_FILE), 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def fit(self):
        cfg = self.cfg
        history = []
        final = float('nan')
        epochs = range(self.epoch, cfg.epochs)
        for epoch in tqdm(epochs, disable=not self.progress, desc='train'):
            self.epoch = epoch
            start = time.time()
            lr = self.optimizer.param_groups[0]['lr']
            final, parts = self.train_epoch(epoch)
            if not cfg.overfit:
                self.scheduler.step()
            val = self.validate()
            record = {'epoch': epoch, 'step': self.step, 'lr': lr, 'loss': final, 'val_loss': val,
                      'rss_mb': round(rss_mb(), 1), 'seconds': round(time.time() - start, 3)}
            record.update({f'loss_{k}': v for k, v in parts.items()})
            self._log(record)
            history.append(record)
            logger.info('epoch %d: loss %.5f, val %.5f, lr %.3g', epoch, final, val, lr)

            if val < self.best_val:
                self.best_val = val
                self.save(BEST)
            if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
                self.save(f'epoch_{epoch + 1:04d}')
            self.last_saved = self.save(LAST)
            if cfg.max_steps and self.step >= cfg.max_steps:
                break

        best = os.path.join(self.out_dir, BEST)
        return TrainResult(out_dir=self.out_dir, last_checkpoint=os.path.join(self.out_dir, LAST),
                           best_checkpoint=best if os.path.isdir(best) else os.path.join(self.out_dir, LAST),
                           epochs=self.epoch + 1, steps=self.step, final_loss=final,
                           best_val=self.best_val, history=history)


def train(cfg, manifest, out_dir, resume=False, progress=False):
    trainer = Trainer(cfg, manifest, out_dir, progress)
    if resume and os.path.isdir(os.path.join(out_dir, LAST)):
        trainer.resume()
    return trainer.fit()
