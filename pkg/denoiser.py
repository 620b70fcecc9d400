# -*- coding: utf-8 -*-
"""
双分支去噪网络
人体分支与物体分支各自自注意力，然后通过互注意力交换信息:
  人体的 query 对物体分支本层输入的 key/value，反之亦然，缩放 1/sqrt(C)
每个子层都是 pre-LN + 残差
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from archive import load_checkpoint, save_checkpoint
from diffusion import ConditionPack, split_object_features
from errors import ValidationError
from motion_repr import OBJECT_FEATURE_DIM

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'denoiser'
OPTIM_PREFIX = 'optim.'


@dataclass
class DenoiserConfig:
    num_objects: int
    human_dim: int
    object_dim: int = OBJECT_FEATURE_DIM
    layers: int = 8
    heads: int = 4
    width: int = 512
    ff_mult: int = 4
    dropout: float = 0.1
    geometry_width: int = 256
    bps_points: int = 1024
    text_width: int = 512
    vocab_size: int = 2
    text_encoder: str = 'token'
    embedding_dim: int = 0
    interaction: str = 'mutual'
    cond_dropout: float = 0.1

    def validate(self):
        if self.width % self.heads:
            raise ValidationError(f'width {self.width} is not divisible by {self.heads} heads')
        if self.layers < 1:
            raise ValidationError('denoiser needs at least one block')
        if self.interaction not in ('mutual', 'none'):
            raise ValidationError(f'unknown interaction mode {self.interaction}')
        if self.text_encoder not in ('token', 'embedding'):
            raise ValidationError(f'unknown text encoder {self.text_encoder}')
        return self

    @classmethod
    def from_run_config(cls, cfg, human_dim, vocab_size, embedding_dim=0):
        return cls(
            num_objects=cfg.num_objects, human_dim=human_dim, layers=cfg.layers, heads=cfg.heads,
            width=cfg.width, ff_mult=cfg.ff_mult, dropout=cfg.dropout, geometry_width=cfg.geometry_width,
            bps_points=cfg.bps_points, text_width=cfg.text_width, vocab_size=vocab_size,
            text_encoder='embedding' if cfg.text_embedding_file else cfg.text_encoder,
            embedding_dim=embedding_dim, interaction=cfg.interaction, cond_dropout=cfg.cond_dropout,
        ).validate()


def sinusoid(positions, width):
    """固定正弦编码，positions 为任意形状的整数/浮点张量"""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64)[..., None] * freqs
    out = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if width % 2:
        out = F.pad(out, (0, 1))
    return out


# ---------------------------------------------------------------------------
# 注意力
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    """多头注意力；scale 缺省为 1/sqrt(每头宽度)"""

    def __init__(self, width, heads=1, dropout=0.0, scale=None):
        super().__init__()
        if width % heads:
            raise ValidationError(f'width {width} is not divisible by {heads} heads')
        self.width = width
        self.heads = heads
        self.scale = scale if scale is not None else 1.0 / math.sqrt(width // heads)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.width // self.heads).transpose(1, 2)

    def forward(self, query, context, key_mask=None, return_weights=False):
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        scores = (q @ k.transpose(-1, -2)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :].bool(), float('-inf'))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        b, _, n, _ = out.shape
        out = self.out(out.transpose(1, 2).reshape(b, n, self.width))
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Sequential):
    def __init__(self, width, mult=4, dropout=0.0):
        super().__init__(nn.Linear(width, width * mult), nn.GELU(), nn.Dropout(dropout),
                         nn.Linear(width * mult, width))


class TransformerBlock(nn.Module):
    """单分支的自注意力块，也是去掉互注意力时的对照"""

    def __init__(self, width, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, dropout)
        self.norm2 = nn.LayerNorm(width)
        self.ff = FeedForward(width, ff_mult, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        y = self.norm1(x)
        x = x + self.drop(self.attn(y, y, key_mask))
        return x + self.drop(self.ff(self.norm2(x)))


class BranchLayer(nn.Module):
    """互注意力块里一个分支的三段子层"""

    def __init__(self, width, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = Attention(width, heads, dropout)
        self.norm_query = nn.LayerNorm(width)
        self.norm_context = nn.LayerNorm(width)
        self.cross_attn = Attention(width, 1, dropout, scale=1.0 / math.sqrt(width))
        self.norm_ff = nn.LayerNorm(width)
        self.ff = FeedForward(width, ff_mult, dropout)
        self.drop = nn.Dropout(dropout)

    def self_part(self, x, key_mask=None):
        y = self.norm_self(x)
        return x + self.drop(self.self_attn(y, y, key_mask))

    def cross_part(self, e, other, key_mask=None):
        return e + self.drop(self.cross_attn(self.norm_query(e), self.norm_context(other), key_mask))

    def ff_part(self, x):
        return x + self.drop(self.ff(self.norm_ff(x)))


class MutualBlock(nn.Module):
    def __init__(self, width, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.human = BranchLayer(width, heads, ff_mult, dropout)
        self.object = BranchLayer(width, heads, ff_mult, dropout)

    def forward(self, h, o, key_mask=None):
        if h.shape != o.shape:
            raise ValidationError(f'branch streams differ: human {tuple(h.shape)} vs object {tuple(o.shape)}')
        e_h = self.human.self_part(h, key_mask)
        e_o = self.object.self_part(o, key_mask)
        # key/value 取另一分支的块输入
        c_h = self.human.cross_part(e_h, o, key_mask)
        c_o = self.object.cross_part(e_o, h, key_mask)
        return self.human.ff_part(c_h), self.object.ff_part(c_o)


class SeparateBlock(nn.Module):
    """不交互的两条自注意力栈 (消融用)"""

    def __init__(self, width, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.human = TransformerBlock(width, heads, ff_mult, dropout)
        self.object = TransformerBlock(width, heads, ff_mult, dropout)

    def forward(self, h, o, key_mask=None):
        return self.human(h, key_mask), self.object(o, key_mask)


# ---------------------------------------------------------------------------
# 文本编码
# ---------------------------------------------------------------------------

class TokenTextEncoder(nn.Module):
    """可训练的词向量表 + 平均池化 + MLP"""

    def __init__(self, vocab_size, width):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, width, padding_idx=0)
        self.empty = nn.Parameter(torch.zeros(width))
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def token_vectors(self, tokens):
        return self.embedding(tokens)

    def forward(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValidationError(f'token id outside vocabulary of size {self.vocab_size}')
        mask = (tokens != 0).unsqueeze(-1)
        vectors = self.token_vectors(tokens)
        count = mask.sum(1)
        pooled = (vectors * mask).sum(1) / count.clamp_min(1)
        pooled = torch.where(count > 0, pooled, self.empty.to(pooled.dtype).expand_as(pooled))
        return self.mlp(pooled)


class FrozenEmbeddingTextEncoder(TokenTextEncoder):
    """外部导出的词向量 (冻结)，再投影到文本宽度"""

    def __init__(self, vectors, width):
        vectors = torch.as_tensor(vectors, dtype=torch.float32)
        super().__init__(vectors.shape[0], width)
        del self.embedding
        self.register_buffer('vectors', vectors)
        self.project = nn.Linear(vectors.shape[1], width)

    def token_vectors(self, tokens):
        return self.project(self.vectors.to(self.project.weight.dtype)[tokens])


def load_embedding_file(path, vocab):
    """
    读取 "词 v1 v2 ..." 格式的文本词向量
    词表里没有向量的词 (包括 pad) 为零向量
    """
    table = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            parts = line.rstrip().split(' ')
            if len(parts) < 2:
                continue
            table[parts[0]] = np.asarray([float(x) for x in parts[1:]], dtype=np.float32)
    if not table:
        raise ValidationError(f'no vectors in {path}')
    dim = len(next(iter(table.values())))
    vectors = np.zeros((len(vocab), dim), dtype=np.float32)
    hits = 0
    for i, token in enumerate(vocab.tokens):
        if token in table and i != vocab.pad_id:
            vectors[i] = table[token]
            hits += 1
    logger.info('loaded %d/%d token vectors from %s', hits, len(vocab), path)
    return vectors


# ---------------------------------------------------------------------------
# 去噪网络
# ---------------------------------------------------------------------------

class HoiDenoiser(nn.Module):
    def __init__(self, config, embedding_vectors=None):
        super().__init__()
        self.config = config.validate()
        c = config.width
        d_h, n_o, d_o = config.human_dim, config.num_objects, config.object_dim

        if config.text_encoder == 'embedding':
            if embedding_vectors is None:
                embedding_vectors = np.zeros((config.vocab_size, config.embedding_dim), dtype=np.float32)
            self.text_encoder = FrozenEmbeddingTextEncoder(embedding_vectors, config.text_width)
        else:
            self.text_encoder = TokenTextEncoder(config.vocab_size, config.text_width)
        self.null_text = nn.Parameter(torch.zeros(config.text_width))
        self.time_mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        self.cond_proj = nn.Linear(c + config.text_width, c)

        self.geometry_proj = nn.Linear(config.bps_points * 3, config.geometry_width)
        self.human_in = nn.Linear(2 * d_h + 1, c)
        self.object_in = nn.Linear(2 * n_o * d_o + 1 + n_o * config.geometry_width, c)
        block = MutualBlock if config.interaction == 'mutual' else SeparateBlock
        self.blocks = nn.ModuleList([block(c, config.heads, config.ff_mult, config.dropout)
                                     for _ in range(config.layers)])
        self.human_norm = nn.LayerNorm(c)
        self.object_norm = nn.LayerNorm(c)
        self.human_out = nn.Linear(c, d_h)
        self.object_out = nn.Linear(c, n_o * d_o)

    def encode_text(self, tokens):
        return self.text_encoder(tokens)

    def embed_conditions(self, text_emb, t, drop_text=None):
        """时间步正弦编码 → 两层 MLP，与文本向量拼接后线性映射成条件 token"""
        t = torch.as_tensor(t, dtype=torch.long)
        b = text_emb.shape[0]
        if t.dim() == 0:
            t = t.expand(b)
        dtype = self.cond_proj.weight.dtype
        text_emb = text_emb.to(dtype)
        drop = self._drop_mask(drop_text, b, text_emb.device)
        if drop is not None:
            text_emb = torch.where(drop[:, None], self.null_text.to(dtype).expand_as(text_emb), text_emb)
        time_emb = self.time_mlp(sinusoid(t.to(text_emb.device), self.config.width).to(dtype))
        return self.cond_proj(torch.cat([time_emb, text_emb], dim=-1))

    def _drop_mask(self, drop_text, batch, device):
        if drop_text is None:
            if not self.training or self.config.cond_dropout <= 0:
                return None
            return torch.rand(batch, device=device) < self.config.cond_dropout
        if isinstance(drop_text, bool):
            return torch.full((batch,), drop_text, dtype=torch.bool, device=device)
        return torch.as_tensor(drop_text, dtype=torch.bool, device=device)

    def embed_geometry(self, geometry):
        b, n_o = geometry.shape[:2]
        return self.geometry_proj(geometry.reshape(b, n_o, -1).to(self.geometry_proj.weight.dtype))

    def _check_shapes(self, x_h, x_o, condition):
        cfg = self.config
        if x_h.dim() != 3 or x_h.shape[-1] != cfg.human_dim:
            raise ValidationError(f'human stream has shape {tuple(x_h.shape)}, expected B x T x {cfg.human_dim}')
        width = cfg.num_objects * cfg.object_dim
        if x_o.dim() != 3 or x_o.shape[-1] != width or x_o.shape[:2] != x_h.shape[:2]:
            raise ValidationError(f'object stream has shape {tuple(x_o.shape)}, '
                                  f'expected {tuple(x_h.shape[:2]) + (width,)}')
        if condition.num_frames != x_h.shape[1]:
            raise ValidationError(f'condition covers {condition.num_frames} frames, streams have {x_h.shape[1]}')
        geo = condition.geometry
        if geo.dim() != 4 or geo.shape[1] != cfg.num_objects or geo.shape[2] * geo.shape[3] != cfg.bps_points * 3:
            raise ValidationError(f'geometry stream has shape {tuple(geo.shape)}, '
                                  f'expected B x {cfg.num_objects} x {cfg.bps_points} x 3')

    def forward(self, x_h, x_o, condition, t, frame_mask=None, drop_text=None):
        self._check_shapes(x_h, x_o, condition)
        dtype = self.human_in.weight.dtype
        b, t_len = x_h.shape[:2]
        cond_h, cond_o, ind_h, ind_o = (row.to(dtype) for row in condition.masked_rows())

        token = self.embed_conditions(self.encode_text(condition.text_tokens), t, drop_text)[:, None]
        geo = self.embed_geometry(condition.geometry).reshape(b, 1, -1).expand(b, t_len, -1)
        pos = sinusoid(torch.arange(t_len), self.config.width).to(dtype)

        h = self.human_in(torch.cat([x_h.to(dtype), cond_h, ind_h], dim=-1)) + pos
        o = self.object_in(torch.cat([x_o.to(dtype), cond_o, ind_o, geo], dim=-1)) + pos
        h = torch.cat([token, h], dim=1)
        o = torch.cat([token, o], dim=1)

        key_mask = None
        if frame_mask is not None:
            key_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=frame_mask.device),
                                  frame_mask.bool()], dim=1)
        for block in self.blocks:
            h, o = block(h, o, key_mask)
        return self.human_out(self.human_norm(h[:, 1:])), self.object_out(self.object_norm(o[:, 1:]))

    def branch_parameters(self, branch):
        """某一分支在所有块里的参数名"""
        return [name for name, _ in self.named_parameters() if f'.{branch}.' in name and name.startswith('blocks.')]


def build_denoiser(config, embedding_vectors=None):
    model = HoiDenoiser(config, embedding_vectors)
    n = sum(p.numel() for p in model.parameters())
    logger.info('denoiser: %d blocks (%s), width %d, %.2fM parameters',
                config.layers, config.interaction, config.width, n / 1e6)
    return model


def permute_objects(x_o, condition, perm, object_dim=OBJECT_FEATURE_DIM):
    """按 perm 重排物体槽位，返回 (物体特征, 条件)"""
    n_o = len(perm)

    def reorder(x):
        return split_object_features(x, n_o, object_dim)[..., perm, :].reshape(x.shape)

    cond = ConditionPack(text_tokens=condition.text_tokens, human_init=condition.human_init,
                         object_init=reorder(condition.object_init), geometry=condition.geometry[:, perm],
                         num_frames=condition.num_frames, text_mask=condition.text_mask,
                         object_track=None if condition.object_track is None else reorder(condition.object_track))
    return reorder(x_o), cond


@torch.no_grad()
def object_permutation_gap(model, x_h, x_o, condition, t, perm):
    """
    置换物体顺序后输出与原输出置换的最大差
    槽位靠增强学到顺序不变性，所以只能近似为 0
    """
    was_training = model.training
    model.eval()
    _, x0_o = model(x_h, x_o, condition, t, drop_text=False)
    px_o, pcond = permute_objects(x_o, condition, perm, model.config.object_dim)
    _, px0_o = model(x_h, px_o, pcond, t, drop_text=False)
    model.train(was_training)
    expected, _ = permute_objects(x0_o, condition, perm, model.config.object_dim)
    return float((px0_o - expected).abs().max())


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save_denoiser(model, directory, extra_meta=None, extra_tensors=None):
    """extra_tensors 的名字必须带 OPTIM_PREFIX 前缀 (训练状态)"""
    tensors = {name: value.detach().cpu().numpy() for name, value in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    meta = {'kind': CHECKPOINT_KIND, 'config': asdict(model.config)}
    meta.update(extra_meta or {})
    return save_checkpoint(directory, tensors, meta)


def load_denoiser(directory):
    """返回 (model, meta)，模型处于 eval 模式"""
    tensors, meta = load_checkpoint(directory, kind=CHECKPOINT_KIND)
    config = DenoiserConfig(**meta['config'])
    vectors = tensors.get('text_encoder.vectors')
    model = HoiDenoiser(config, embedding_vectors=vectors)
    state = {name: torch.from_numpy(value) for name, value in tensors.items() if not name.startswith(OPTIM_PREFIX)}
    model.load_state_dict(state)
    model.eval()
    return model, meta
