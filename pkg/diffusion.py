# -*- coding: utf-8 -*-
"""
扩散过程: 噪声表、前向加噪、祖先采样、带掩码的条件帧
网络直接预测干净信号 x0
"""

import logging
import math
import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch

from errors import SamplingError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class DiffusionSchedule:
    kind: str
    steps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    posterior_variance: torch.Tensor
    posterior_coef_x0: torch.Tensor
    posterior_coef_xt: torch.Tensor

    def check_timestep(self, t):
        t = torch.as_tensor(t)
        if t.numel() and (t.min() < 0 or t.max() >= self.steps):
            raise ValidationError(f'timestep out of range [0, {self.steps})')
        return t.long()


def _cosine_betas(steps, s=0.008, max_beta=0.999):
    def f(u):
        return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    betas = [min(1 - f((i + 1) / steps) / f(i / steps), max_beta) for i in range(steps)]
    return torch.tensor(betas, dtype=torch.float64)


def make_schedule(kind='cosine', steps=1000, beta_start=1e-4, beta_end=2e-2):
    if steps < 2:
        raise ValidationError('diffusion needs at least 2 steps')
    if kind == 'cosine':
        betas = _cosine_betas(steps)
    elif kind == 'linear':
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    else:
        raise ValidationError(f'unknown schedule kind: {kind}')
    betas = betas.clamp(1e-8, 0.999)

    alphas = 1.0 - betas
    alpha_bar = torch.cumprod(alphas, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    return DiffusionSchedule(
        kind=kind,
        steps=steps,
        betas=betas,
        alphas=alphas,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_variance=betas * (1 - alpha_bar_prev) / (1 - alpha_bar),
        posterior_coef_x0=betas * alpha_bar_prev.sqrt() / (1 - alpha_bar),
        posterior_coef_xt=(1 - alpha_bar_prev) * alphas.sqrt() / (1 - alpha_bar),
    )


def _extract(values, t, like):
    out = values.to(like.device)[t].to(like.dtype)
    return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def q_sample(x0, t, noise, schedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise，t 为标量或与 batch 对齐"""
    t = schedule.check_timestep(t)
    if t.dim() == 0:
        t = t.expand(x0.shape[0]) if x0.dim() > 1 else t
    a = _extract(schedule.alpha_bar, t, x0)
    return a.sqrt() * x0 + (1 - a).sqrt() * noise


def training_batch(x0, schedule, generator=None):
    """为一个 batch 抽取时间步与噪声"""
    b = x0.shape[0]
    t = torch.randint(0, schedule.steps, (b,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return t, noise, q_sample(x0, t, noise, schedule)


def build_condition_mask(seq_len, k, init_frames):
    """
    前 k 行放条件帧，其余补零；最后一列是指示通道(条件行为 1)
    返回 T x (D + 1)
    """
    init_frames = torch.as_tensor(init_frames)
    if k > seq_len:
        raise ValidationError(f'k={k} exceeds sequence length {seq_len}')
    if k < 1 or init_frames.shape[0] < k:
        raise ValidationError('need k >= 1 condition frames')
    d = init_frames.shape[-1]
    out = init_frames.new_zeros(seq_len, d + 1)
    out[:k, :d] = init_frames[:k]
    out[:k, d] = 1
    return out


@dataclass
class ConditionPack:
    """
    批量条件: 文本 token、前 k 帧的人体与物体状态、物体几何编码
    object_track 给出时整段物体运动都作为条件 (先物体后人体的两阶段生成)
    """
    text_tokens: torch.Tensor          # B x L
    human_init: torch.Tensor           # B x k x D_h
    object_init: torch.Tensor          # B x k x (N_o * D_o)
    geometry: torch.Tensor             # B x N_o x S x 3
    num_frames: int
    text_mask: Optional[torch.Tensor] = None
    object_track: Optional[torch.Tensor] = None  # B x T x (N_o * D_o)

    @property
    def k(self):
        return self.human_init.shape[1]

    @property
    def batch_size(self):
        return self.human_init.shape[0]

    @property
    def num_objects(self):
        return self.geometry.shape[1]

    def validate(self):
        if self.k < 1 or self.k > self.num_frames:
            raise ValidationError(f'condition frames k={self.k} must be in [1, {self.num_frames}]')
        if self.object_init.shape[1] != self.k:
            raise ValidationError('human and object condition frames differ in length')
        if self.object_track is not None:
            expected = (self.batch_size, self.num_frames, self.object_init.shape[-1])
            if tuple(self.object_track.shape) != expected:
                raise ValidationError(f'object track has shape {tuple(self.object_track.shape)}, expected {expected}')
        return self

    def with_object_track(self, objects):
        return dataclasses.replace(self, object_track=objects)

    def masked_rows(self):
        """返回 (人体条件行, 物体条件行, 人体指示通道, 物体指示通道)，都是 B x T x ·"""
        self.validate()
        b, t, k = self.batch_size, self.num_frames, self.k
        cond_h = self.human_init.new_zeros(b, t, self.human_init.shape[-1])
        cond_o = self.object_init.new_zeros(b, t, self.object_init.shape[-1])
        indicator = self.human_init.new_zeros(b, t, 1)
        cond_h[:, :k] = self.human_init
        cond_o[:, :k] = self.object_init
        indicator[:, :k] = 1
        object_indicator = indicator
        if self.object_track is not None:
            cond_o = self.object_track.to(cond_o.dtype)
            object_indicator = torch.ones_like(indicator)
        return cond_h, cond_o, indicator, object_indicator

    def normalized(self, stats):
        if stats is None:
            return self
        return ConditionPack(
            text_tokens=self.text_tokens,
            human_init=stats.normalize_human(self.human_init),
            object_init=stats.normalize_objects(self.object_init),
            geometry=self.geometry,
            num_frames=self.num_frames,
            text_mask=self.text_mask,
            object_track=None if self.object_track is None else stats.normalize_objects(self.object_track),
        )


def _check_compat(denoiser, condition):
    cfg = denoiser.config
    if condition.num_objects != cfg.num_objects:
        raise SamplingError(f'condition has {condition.num_objects} objects, model expects {cfg.num_objects}')
    if condition.human_init.shape[-1] != cfg.human_dim:
        raise SamplingError(f'human width {condition.human_init.shape[-1]} != {cfg.human_dim}')
    if condition.object_init.shape[-1] != cfg.num_objects * cfg.object_dim:
        raise SamplingError('object condition width does not match the model')


@torch.no_grad()
def sample(denoiser, condition, schedule, seed=0, guidance_scale=1.0, stats=None):
    """
    祖先采样，从纯噪声开始，每步网络给出 x0 估计
    guidance_scale != 1 时启用无分类器引导 (每步两次网络调用)
    结束后前 k 帧被条件帧原样覆盖
    返回 (人体特征 B x T x D_h, 物体特征 B x T x N_o*D_o)，原始(未归一化)尺度
    """
    _check_compat(denoiser, condition)
    condition.validate()
    was_training = denoiser.training
    denoiser.eval()

    generator = torch.Generator().manual_seed(int(seed))
    dtype = next(denoiser.parameters()).dtype
    b, t_len, k = condition.batch_size, condition.num_frames, condition.k
    cfg = denoiser.config
    x_h = torch.randn(b, t_len, cfg.human_dim, generator=generator, dtype=dtype)
    x_o = torch.randn(b, t_len, cfg.num_objects * cfg.object_dim, generator=generator, dtype=dtype)
    norm_cond = condition.normalized(stats)
    guided = guidance_scale != 1.0

    for step in reversed(range(schedule.steps)):
        t = torch.full((b,), step, dtype=torch.long)
        x0_h, x0_o = denoiser(x_h, x_o, norm_cond, t)
        if guided:
            u_h, u_o = denoiser(x_h, x_o, norm_cond, t, drop_text=True)
            x0_h = u_h + guidance_scale * (x0_h - u_h)
            x0_o = u_o + guidance_scale * (x0_o - u_o)
        c0 = _extract(schedule.posterior_coef_x0, t, x_h)
        ct = _extract(schedule.posterior_coef_xt, t, x_h)
        mean_h = c0 * x0_h + ct * x_h
        mean_o = c0 * x0_o + ct * x_o
        if step > 0:
            sigma = _extract(schedule.posterior_variance, t, x_h).sqrt()
            x_h = mean_h + sigma * torch.randn(x_h.shape, generator=generator, dtype=dtype)
            x_o = mean_o + sigma * torch.randn(x_o.shape, generator=generator, dtype=dtype)
        else:
            x_h, x_o = mean_h, mean_o

    if stats is not None:
        x_h = stats.denormalize_human(x_h)
        x_o = stats.denormalize_objects(x_o)
    human = x_h.to(condition.human_init.dtype).clone()
    objects = x_o.to(condition.object_init.dtype).clone()
    human[:, :k] = condition.human_init
    objects[:, :k] = condition.object_init
    if condition.object_track is not None:
        objects[:] = condition.object_track

    denoiser.train(was_training)
    if not (torch.isfinite(human).all() and torch.isfinite(objects).all()):
        raise SamplingError('sampling produced non-finite values')
    return human, objects


def sample_consecutive(denoiser, condition, schedule, seed=0, guidance_scale=1.0, stats=None):
    """
    先物体后人体：第一遍正常采样只取物体运动，
    第二遍把它作为整段物体条件再采样人体 (种子 seed + 1)
    """
    _, objects = sample(denoiser, condition, schedule, seed, guidance_scale, stats)
    human, _ = sample(denoiser, condition.with_object_track(objects), schedule, seed + 1, guidance_scale, stats)
    return human, objects


SAMPLERS = {'joint': sample, 'consecutive': sample_consecutive}


def get_sampler(mode):
    if mode not in SAMPLERS:
        raise ValidationError(f'unknown generation mode {mode!r}, expected one of {sorted(SAMPLERS)}')
    return SAMPLERS[mode]


def split_object_features(objects, num_objects, object_dim=9):
    """... x (N_o * D_o) → ... x N_o x D_o"""
    return objects.reshape(objects.shape[:-1] + (num_objects, object_dim))
