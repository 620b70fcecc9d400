# -*- coding: utf-8 -*-
"""
分段自回归生成
每段以上一段最后 k 帧为条件生成，拼接时丢掉后一段重复的 k 帧
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch

from archive import read_archive
from config import from_dict as config_from_dict
from corpus import OBJECT_VOCAB, CorpusManifest, NormStats, Vocabulary, initial_scene, tokenize
from denoiser import load_denoiser
from diffusion import ConditionPack, get_sampler, make_schedule
from errors import ConfigError, HoiError, SegmentFailure, ValidationError
from motion_repr import HoiSequence, HumanMotion, ObjectTrack, Segment

logger = logging.getLogger(__name__)

JERK_WINDOW = 3


@dataclass
class TimelineScript:
    prompts: List[str]
    lengths: List[int]
    k: int = 10

    def validate(self):
        if not self.prompts:
            raise ValidationError('script needs at least one segment')
        if len(self.prompts) != len(self.lengths):
            raise ValidationError('every prompt needs a length')
        if self.k < 1:
            raise ValidationError('overlap k must be >= 1')
        for i, length in enumerate(self.lengths):
            if self.k >= length:
                raise ValidationError(f'segment {i}: k={self.k} must be shorter than its length {length}')
        return self

    @property
    def total_length(self):
        return sum(self.lengths) - (len(self.lengths) - 1) * self.k

    @classmethod
    def from_json(cls, path, k=10, default_length=100):
        """脚本文件: [{"text": ..., "length": ...}, ...]"""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                items = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f'cannot read script {path}: {e}') from e
        if not isinstance(items, list):
            raise ValidationError('script must be a JSON list')
        prompts = [str(item['text']) for item in items]
        lengths = [int(item.get('length', default_length)) for item in items]
        return cls(prompts=prompts, lengths=lengths, k=k).validate()


@dataclass
class ComposedTimeline:
    human: np.ndarray            # T x D_h
    objects: np.ndarray          # T x (N_o * 9)
    prompts: List[str]
    segment_bounds: List[tuple]  # 每段在时间线上的 [start, end)
    boundaries: List[int]        # 第 n (n>=1) 段新帧的起点
    k: int
    transition_jerk: List[float] = field(default_factory=list)

    @property
    def num_frames(self):
        return self.human.shape[0]

    def to_sequence(self, seq_id, num_joints, geometries, fps=30):
        human = HumanMotion.from_flat(self.human.astype(np.float32), num_joints, fps)
        n_o = len(geometries)
        feats = self.objects.reshape(self.num_frames, n_o, -1).astype(np.float32)
        objects = [ObjectTrack.from_flat(feats[:, i], geometries[i]) for i in range(n_o)]
        segments = []
        cursor = 0
        for (_, end), prompt in zip(self.segment_bounds, self.prompts):
            segments.append(Segment(cursor, end, prompt))
            cursor = end
        text = ', then '.join(self.prompts)
        return HoiSequence(seq_id=seq_id, human=human, objects=objects, text=text, segments=segments,
                           object_names=[g.name for g in geometries])


class SegmentGenerator:
    """把模型、词表、归一化统计和场景几何绑在一起，按提示与过去帧生成一段"""

    def __init__(self, denoiser, schedule, vocab, stats, geometry, max_text_len=15, guidance_scale=2.5,
                 mode='joint'):
        self.denoiser = denoiser
        self.schedule = schedule
        self.vocab = vocab
        self.stats = stats
        self.geometry = torch.as_tensor(geometry, dtype=torch.float32)
        if self.geometry.dim() == 3:
            self.geometry = self.geometry[None]
        self.max_text_len = max_text_len
        self.guidance_scale = guidance_scale
        self.mode = mode
        self.sampler = get_sampler(mode)

    @property
    def human_dim(self):
        return self.denoiser.config.human_dim

    def generate(self, prompt, past, length, seed):
        """past: k x (D_h + N_o*9)，原始尺度；返回 length x 同宽度"""
        if not isinstance(prompt, str) or not tokenize(prompt):
            raise ValidationError(f'prompt {prompt!r} has no tokens')
        past = torch.as_tensor(past, dtype=torch.float32)
        if past.dim() == 1:
            past = past[None]
        k = past.shape[0]
        if k >= length:
            raise ValidationError(f'k={k} past frames leave nothing to generate in a {length}-frame clip')
        tokens = self.vocab.encode_batch([prompt], self.max_text_len)
        condition = ConditionPack(text_tokens=tokens, human_init=past[None, :, :self.human_dim],
                                  object_init=past[None, :, self.human_dim:], geometry=self.geometry,
                                  num_frames=length)
        human, objects = self.sampler(self.denoiser, condition, self.schedule, seed=seed,
                                      guidance_scale=self.guidance_scale, stats=self.stats)
        return torch.cat([human[0], objects[0]], dim=-1)


def generate_segment(generator, prompt, past, length, seed=0):
    return generator.generate(prompt, past, length, seed)


def compose_timeline(generator, script, initial_state, seed=0):
    """
    initial_state: 首段条件帧 (通常 1 帧)
    第 n 段的种子为 seed + n
    """
    script.validate()
    d_h = generator.human_dim
    timeline, bounds, boundaries = None, [], []
    past = torch.as_tensor(initial_state, dtype=torch.float32)
    if past.dim() == 1:
        past = past[None]
    for n, (prompt, length) in enumerate(zip(script.prompts, script.lengths)):
        try:
            clip = generator.generate(prompt, past, length, seed + n)
        except HoiError as e:
            partial = None if timeline is None else _finish(timeline, d_h, script, bounds, boundaries)
            raise SegmentFailure(f'segment {n} failed: {e}', partial=partial, segment_index=n) from e
        if timeline is None:
            timeline = clip
            bounds.append((0, clip.shape[0]))
        else:
            start = timeline.shape[0]
            boundaries.append(start)
            timeline = torch.cat([timeline, clip[script.k:]], dim=0)
            bounds.append((start, timeline.shape[0]))
        past = clip[-script.k:]
        logger.info('segment %d/%d: %d frames, timeline at %d', n + 1, len(script.prompts), length,
                    timeline.shape[0])
    return _finish(timeline, d_h, script, bounds, boundaries)


def _finish(timeline, d_h, script, bounds, boundaries):
    data = timeline.numpy()
    result = ComposedTimeline(human=data[:, :d_h], objects=data[:, d_h:], prompts=list(script.prompts[:len(bounds)]),
                              segment_bounds=list(bounds), boundaries=list(boundaries), k=script.k)
    num_joints = (d_h - 3) // 9
    result.transition_jerk = transition_jerk(result, num_joints)
    return result


def transition_jerk(timeline, num_joints, window=JERK_WINDOW):
    """
    每个接缝处 ±window 帧内关节位置二阶差分的最大模长 (米/帧^2)
    接缝位置为后一段第一帧新帧
    """
    positions = np.asarray(timeline.human)[:, :3 * num_joints].reshape(-1, num_joints, 3).astype(np.float64)
    values = []
    for b in timeline.boundaries:
        lo, hi = max(b - window, 0), min(b + window, len(positions) - 1)
        clip = positions[lo:hi + 1]
        if len(clip) < 3:
            values.append(0.0)
            continue
        accel = clip[2:] - 2 * clip[1:-1] + clip[:-2]
        values.append(float(np.linalg.norm(accel, axis=-1).max()))
    return values


def compare_overlaps(generator, scripts, initial_states, ks=(1, 10), seed=0):
    """同一批脚本在不同 k 下的平均接缝 jerk"""
    result = {}
    for k in ks:
        jerks = []
        for i, (script, init) in enumerate(zip(scripts, initial_states)):
            timeline = compose_timeline(generator, TimelineScript(script.prompts, script.lengths, k), init, seed + i)
            jerks.extend(timeline.transition_jerk)
        result[k] = float(np.mean(jerks)) if jerks else 0.0
    return result


# ---------------------------------------------------------------------------
# 从 checkpoint 出发 (CLI 和服务共用)
# ---------------------------------------------------------------------------

@dataclass
class LoadedRun:
    model: object
    config: object
    vocab: object
    stats: object
    schedule: object
    checkpoint: str

    def generator(self, geometries, guidance_scale=None, max_text_len=None, mode=None):
        bps = np.stack([g.bps_code for g in geometries]).astype(np.float32)
        text_len = max_text_len or (self.config.max_text_len if self.config.train_mode == 'gen'
                                    else self.config.max_seg_text_len)
        scale = self.config.guidance_scale if guidance_scale is None else guidance_scale
        return SegmentGenerator(self.model, self.schedule, self.vocab, self.stats, bps, text_len, scale,
                                mode or self.config.generation)


def load_run(checkpoint, overrides=None):
    """读 denoiser checkpoint，还原训练时的配置、词表与归一化统计"""
    model, meta = load_denoiser(checkpoint)
    if 'run_config' not in meta:
        raise ConfigError(f'{checkpoint} has no run_config, not a training checkpoint')
    cfg = config_from_dict(meta['run_config'])
    if overrides:
        cfg = cfg.replace(**overrides)
    schedule = make_schedule(cfg.schedule, cfg.diffusion_steps)
    return LoadedRun(model=model, config=cfg, vocab=Vocabulary(meta['vocab']),
                     stats=NormStats.from_dict(meta['stats']), schedule=schedule, checkpoint=checkpoint)


def scene_for(cfg, objects=None, data=None, seq_id=None, frames=1, seed=0):
    """
    首段条件帧和物体几何
    data 给出时取语料里一条序列的前 frames 帧 (默认 test 划分第一条)，否则用 objects 摆一个静止场景
    """
    if data:
        manifest = CorpusManifest.load(data)
        seq_id = seq_id or manifest.ids_for('test')[0]
        if seq_id not in manifest.ids:
            raise ValidationError(f'{seq_id} is not in corpus {data}')
        seq = read_archive(manifest.path_of(seq_id))
        features = np.concatenate([seq.human.flatten(), seq.object_features()], axis=-1)[:frames]
        return features.astype(np.float32), [obj.geometry for obj in seq.objects]
    names = list(objects or sorted(OBJECT_VOCAB)[:cfg.num_objects])
    return initial_scene(cfg, names, seed)


def sample_sequence(run, prompt, frames, init, geometries, seed=0, guidance_scale=None, seq_id='sample', mode=None):
    """单段文本生成完整序列；mode 为 None 时按训练配置的 generation"""
    generator = run.generator(geometries, guidance_scale, mode=mode)
    clip = generator.generate(prompt, init, frames, seed).numpy()
    d_h = generator.human_dim
    timeline = ComposedTimeline(human=clip[:, :d_h], objects=clip[:, d_h:], prompts=[prompt],
                                segment_bounds=[(0, frames)], boundaries=[], k=len(init))
    return timeline.to_sequence(seq_id, run.config.num_joints, geometries, run.config.fps)
