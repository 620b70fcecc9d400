# -*- coding: utf-8 -*-
"""
评估
- 对比学习训练的文本 / 动作特征提取器 (动作特征包含人体和全部物体)
- R-precision, FID, MM-Dist, Diversity, MultiModality，多次重复给出 95% 置信区间
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from tqdm import tqdm

from archive import load_checkpoint, save_checkpoint
from config import SCHEMA_VERSION
from diffusion import get_sampler
from errors import TrainingDivergedError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'extractors'


# ---------------------------------------------------------------------------
# 特征提取器
# ---------------------------------------------------------------------------

@dataclass
class ExtractorConfig:
    motion_dim: int
    vocab_size: int
    width: int = 256
    hidden: int = 256
    temperature: float = 0.07


class _SequenceEncoder(nn.Module):
    def __init__(self, in_dim, hidden, width):
        super().__init__()
        self.gru = nn.GRU(in_dim, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, width)

    def forward(self, x, mask):
        h, _ = self.gru(x)
        m = mask.to(h.dtype)[..., None]
        pooled = (h * m).sum(1) / m.sum(1).clamp_min(1)
        return F.normalize(self.out(pooled), dim=-1)


class FeatureExtractors(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.motion_in = nn.Linear(config.motion_dim, config.hidden)
        self.motion = _SequenceEncoder(config.hidden, config.hidden, config.width)
        self.embedding = nn.Embedding(config.vocab_size, config.hidden, padding_idx=0)
        self.text = _SequenceEncoder(config.hidden, config.hidden, config.width)

    def encode_motion(self, human, objects, mask):
        """输入为归一化特征，人体与物体逐帧拼接"""
        x = torch.cat([human, objects], dim=-1).to(self.motion_in.weight.dtype)
        return self.motion(F.gelu(self.motion_in(x)), mask)

    def encode_text(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        return self.text(self.embedding(tokens), tokens != 0)

    def contrastive_loss(self, motion_feats, text_feats):
        logits = motion_feats @ text_feats.T / self.config.temperature
        target = torch.arange(len(logits), device=logits.device)
        return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def train_extractors(dataset, cfg, seed=0, epochs=None, progress=False):
    """对称 InfoNCE，batch 内其它样本为负例"""
    if len(dataset) == 0:
        raise ValidationError('cannot train extractors on an empty split')
    first = dataset.items[0]
    config = ExtractorConfig(motion_dim=first.human.shape[-1] + first.objects.shape[1] * first.objects.shape[2],
                             vocab_size=len(dataset.vocab), width=cfg.feature_width, hidden=cfg.feature_width,
                             temperature=cfg.eval_temperature)
    torch.manual_seed(seed)
    model = FeatureExtractors(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.extractor_lr)
    epochs = cfg.extractor_epochs if epochs is None else epochs
    model.train()
    for epoch in tqdm(range(epochs), disable=not progress, desc='extractors'):
        losses = []
        for batch in dataset.batches(cfg.batch_size, seed=seed, epoch=epoch):
            if len(batch.ids) < 2:
                continue
            loss = model.contrastive_loss(model.encode_motion(batch.human, batch.objects, batch.mask),
                                          model.encode_text(batch.text_tokens))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f'extractor loss became {loss.item()} at epoch {epoch}',
                                            epoch=epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        if losses:
            logger.debug('extractors epoch %d: loss %.4f', epoch, float(np.mean(losses)))
    model.eval()
    return model


def save_extractors(model, directory, extra_meta=None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {'kind': CHECKPOINT_KIND, 'config': asdict(model.config)}
    meta.update(extra_meta or {})
    return save_checkpoint(directory, tensors, meta)


def load_extractors(directory):
    tensors, meta = load_checkpoint(directory, kind=CHECKPOINT_KIND)
    model = FeatureExtractors(ExtractorConfig(**meta['config']))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# 指标
# ---------------------------------------------------------------------------

def r_precision(motion_feats, text_feats, pool_size=32, top_k=3, seed=0):
    """
    每个动作与它的文本及 pool_size-1 条随机干扰文本比较欧氏距离
    返回 top-1..top-k 的累计命中率
    """
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    n = len(motion_feats)
    if pool_size > n:
        raise ValidationError(f'pool of {pool_size} needs at least {pool_size} pairs, got {n}')
    rng = np.random.default_rng(seed)
    hits = np.zeros(top_k)
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)
        dist = np.linalg.norm(text_feats[np.concatenate([[i], others])] - motion_feats[i], axis=-1)
        rank = int((dist[1:] < dist[0]).sum())
        if rank < top_k:
            hits[rank:] += 1
    return hits / n


def _covariance(x, jitter):
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return cov + jitter * np.eye(cov.shape[0])


def _sqrt_psd(mat):
    w, v = linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(features_a, features_b, jitter=1e-6):
    """Fréchet 距离，矩阵平方根用对称化乘积的特征分解，负特征值截断为 0"""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValidationError('FID needs at least 2 samples per set')
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = _covariance(a, jitter), _covariance(b, jitter)
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    w = linalg.eigvalsh(0.5 * (middle + middle.T))
    trace_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt)
    return max(value, 0.0)


def mm_dist(motion_feats, text_feats):
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    return float(np.linalg.norm(motion_feats - text_feats, axis=-1).mean())


def diversity(features, subset_size=50, seed=0):
    """两组互不相交的随机子集按编号配对的平均距离"""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n < 2:
        raise ValidationError('diversity needs at least 2 samples')
    size = min(subset_size, n // 2)
    perm = np.random.default_rng(seed).permutation(n)
    first, second = features[perm[:size]], features[perm[size:2 * size]]
    return float(np.linalg.norm(first - second, axis=-1).mean())


def multimodality(features_by_text):
    """texts x samples x d：每个文本内所有样本对的平均距离，再对文本平均"""
    feats = np.asarray(features_by_text, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[1] < 2:
        raise ValidationError('multimodality needs texts x samples(>=2) x d features')
    i, j = np.triu_indices(feats.shape[1], k=1)
    return float(np.linalg.norm(feats[:, i] - feats[:, j], axis=-1).mean())


def summarize(values):
    """均值与 95% 置信半宽 1.96 * std / sqrt(R)"""
    values = np.asarray(values, dtype=np.float64)
    r = len(values)
    return {'mean': float(values.mean()), 'ci95': float(1.96 * values.std() / np.sqrt(r)), 'repetitions': r}


@dataclass
class MetricReport:
    generated: dict
    real: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    fingerprint: str = ''

    def to_dict(self):
        out = {}
        for name, stats in self.generated.items():
            entry = dict(stats)
            entry['config'] = self.fingerprint
            if name in self.real:
                entry['real'] = self.real[name]
            out[name] = entry
        out['_run'] = {'config': self.config, 'fingerprint': self.fingerprint, 'schema_version': SCHEMA_VERSION}
        return out

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


# ---------------------------------------------------------------------------
# 评估流程
# ---------------------------------------------------------------------------

@torch.no_grad()
def _features(extractors, human, objects, mask):
    return extractors.encode_motion(human, objects, mask).numpy()


@torch.no_grad()
def _generate(model, batch, stats, schedule, seed, guidance_scale, k=1, mode='joint'):
    condition = batch.condition(k, stats)
    human, objects = get_sampler(mode)(model, condition, schedule, seed=seed, guidance_scale=guidance_scale,
                                       stats=stats)
    return stats.normalize_human(human), stats.normalize_objects(objects)


def _metric_row(motion, text, cfg, seed):
    row = {}
    top = r_precision(motion, text, cfg.pool_size, cfg.top_k, seed)
    for i, value in enumerate(top):
        row[f'r_precision_top{i + 1}'] = value
    row['mm_dist'] = mm_dist(motion, text)
    row['diversity'] = diversity(motion, cfg.diversity_subset, seed)
    return row


def evaluate_generated(model, extractors, dataset, cfg, schedule, seed=0, repetitions=None, progress=False):
    """
    对一个划分做完整评估，真实数据作为 real 行一起报告
    生成时以真实序列的首帧、文本和物体几何为条件
    model 为 None 时拿真实数据和自己比
    """
    repetitions = repetitions or cfg.repetitions
    n = len(dataset)
    if n < cfg.pool_size:
        raise ValidationError(f'split has {n} items, R-precision pool needs {cfg.pool_size}')
    stats = dataset.stats
    batch = dataset.collate(dataset.items, np.random.default_rng(seed), shuffle_objects=False)
    with torch.no_grad():
        text_feats = extractors.encode_text(batch.text_tokens).numpy()
    real_feats = _features(extractors, batch.human, batch.objects, batch.mask)

    mm_count = min(cfg.mm_texts, n)
    mm_batch = dataset.collate(dataset.items[:mm_count], np.random.default_rng(seed), shuffle_objects=False)

    gen_rows, real_rows = [], []
    for r in tqdm(range(repetitions), disable=not progress, desc='eval'):
        rep_seed = seed + r
        if model is None:
            gen_feats = real_feats
        else:
            human, objects = _generate(model, batch, stats, schedule, rep_seed, cfg.guidance_scale,
                                       mode=cfg.generation)
            gen_feats = _features(extractors, human, objects, batch.mask)
        row = _metric_row(gen_feats, text_feats, cfg, rep_seed)
        row['fid'] = fid(gen_feats, real_feats)

        if model is not None:
            per_text = []
            for s in range(cfg.mm_samples):
                h, o = _generate(model, mm_batch, stats, schedule, rep_seed * 1000 + s + 1, cfg.guidance_scale,
                                 mode=cfg.generation)
                per_text.append(_features(extractors, h, o, mm_batch.mask))
            row['multimodality'] = multimodality(np.stack(per_text, axis=1))
        gen_rows.append(row)

        real = _metric_row(real_feats, text_feats, cfg, rep_seed)
        real['fid'] = fid(real_feats, real_feats)
        real_rows.append(real)
        logger.info('repetition %d/%d: top%d %.3f, fid %.4f', r + 1, repetitions, cfg.top_k,
                    row[f'r_precision_top{cfg.top_k}'], row['fid'])

    generated = {name: summarize([row[name] for row in gen_rows]) for name in gen_rows[0]}
    real = {name: summarize([row[name] for row in real_rows]) for name in real_rows[0]}
    return MetricReport(generated=generated, real=real, config=cfg.to_dict(), fingerprint=cfg.fingerprint())
