# -*- coding: utf-8 -*-
"""
训练损失
L = λ_vel L_vel + λ_pos L_pos + λ_pen L_pen + λ_dis L_dis (+ λ_rec L_rec)
穿透项用骨骼胶囊体拼成的人体 SDF，体素网格上三线性插值
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch

from errors import DegenerateGeometryError, ValidationError
from motion_repr import OBJECT_FEATURE_DIM, rot6d_to_matrix

logger = logging.getLogger(__name__)


def _frame_mask(mask, like):
    """mask 为 None 时全部有效；返回与 like 前置维度一致的浮点 mask"""
    if mask is None:
        return torch.ones(like.shape[:-2], dtype=like.dtype, device=like.device)
    mask = torch.as_tensor(mask, dtype=like.dtype, device=like.device)
    if mask.shape != like.shape[:-2]:
        raise ValidationError(f'mask shape {tuple(mask.shape)} does not match frames {tuple(like.shape[:-2])}')
    return mask


def loss_pos(pred_joints, gt_joints, mask=None):
    """每帧关节误差平方和，再对有效帧取平均；输入 ... x N x J x 3"""
    if pred_joints.shape != gt_joints.shape:
        raise ValidationError(f'joint shapes differ: {tuple(pred_joints.shape)} vs {tuple(gt_joints.shape)}')
    m = _frame_mask(mask, pred_joints)
    per_frame = ((pred_joints - gt_joints) ** 2).sum(dim=(-1, -2))
    return (per_frame * m).sum() / m.sum().clamp_min(1)


def loss_vel(pred_joints, gt_joints, mask=None):
    if pred_joints.shape != gt_joints.shape:
        raise ValidationError(f'joint shapes differ: {tuple(pred_joints.shape)} vs {tuple(gt_joints.shape)}')
    if pred_joints.shape[-3] < 2:
        logger.warning('loss_vel needs at least 2 frames, returning 0')
        return pred_joints.new_zeros(())
    m = _frame_mask(mask, pred_joints)
    pair = m[..., 1:] * m[..., :-1]
    dv = (pred_joints[..., 1:, :, :] - pred_joints[..., :-1, :, :]) - \
         (gt_joints[..., 1:, :, :] - gt_joints[..., :-1, :, :])
    per_pair = (dv ** 2).sum(dim=(-1, -2))
    return (per_pair * pair).sum() / pair.sum().clamp_min(1)


def loss_rec(pred, target, mask=None):
    """特征空间的 x0 重建误差 (逐元素平方，对有效帧与通道平均)"""
    if pred.shape != target.shape:
        raise ValidationError(f'feature shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}')
    if mask is None:
        return ((pred - target) ** 2).mean()
    m = torch.as_tensor(mask, dtype=pred.dtype, device=pred.device)[..., None]
    return (((pred - target) ** 2) * m).sum() / (m.sum() * pred.shape[-1]).clamp_min(1)


# ---------------------------------------------------------------------------
# 人体 SDF
# ---------------------------------------------------------------------------

@dataclass
class SdfGrid:
    values: torch.Tensor   # F x N x N x N，穿透深度 φ >= 0
    origin: torch.Tensor   # F x 3，第 0 个体素中心
    cell: torch.Tensor     # F，体素边长
    frames: Optional[torch.Tensor] = None

    @property
    def resolution(self):
        return self.values.shape[-1]

    def __len__(self):
        return self.values.shape[0]


def capsule_sdf(points, starts, ends, radii):
    """
    points: ... x P x 3；starts/ends: ... x K x 3；radii: K
    返回每个点到所有胶囊的有符号距离 ... x P x K
    """
    seg = ends - starts
    length2 = (seg ** 2).sum(-1).clamp_min(1e-12)
    rel = points[..., :, None, :] - starts[..., None, :, :]
    h = ((rel * seg[..., None, :, :]).sum(-1) / length2[..., None, :]).clamp(0.0, 1.0)
    closest = rel - h[..., None] * seg[..., None, :, :]
    return closest.norm(dim=-1) - radii


def body_sdf_grids(joints, bones, radii, resolution=32, padding=0.1, chunk=4):
    """
    逐帧构建 φ = -min(SDF, 0)，网格为覆盖人体包围盒(外扩 padding)的立方体
    joints: F x J x 3；bones: [(parent, child)]；radii: 每根骨头的半径
    """
    joints = torch.as_tensor(joints)
    if joints.dim() == 2:
        joints = joints[None]
    bones = torch.as_tensor(bones, dtype=torch.long)
    radii = torch.as_tensor(radii, dtype=joints.dtype, device=joints.device)
    starts, ends = joints[:, bones[:, 0]], joints[:, bones[:, 1]]
    lengths = (ends - starts).norm(dim=-1)
    if (lengths.max(dim=-1).values <= 1e-9).any():
        raise DegenerateGeometryError('skeleton has only zero-length bones')

    with torch.no_grad():
        lo = joints.min(dim=1).values - radii.max() - padding
        hi = joints.max(dim=1).values + radii.max() + padding
        side = (hi - lo).max(dim=-1).values
        center = 0.5 * (lo + hi)
        origin = center - 0.5 * side[:, None]
        cell = side / (resolution - 1)
        axis = torch.arange(resolution, dtype=joints.dtype, device=joints.device)
        idx = torch.stack(torch.meshgrid(axis, axis, axis, indexing='ij'), dim=-1).reshape(-1, 3)

        values = []
        for start in range(0, joints.shape[0], chunk):
            sl = slice(start, start + chunk)
            points = origin[sl, None, :] + idx[None] * cell[sl, None, None]
            sdf = capsule_sdf(points, starts[sl], ends[sl], radii).min(dim=-1).values
            values.append((-sdf).clamp_min(0.0).reshape(-1, resolution, resolution, resolution))
    return SdfGrid(values=torch.cat(values), origin=origin, cell=cell)


def body_sdf_grid(joints, bones, radii, resolution=32, padding=0.1, frame=0):
    """单帧版本"""
    grid = body_sdf_grids(joints, bones, radii, resolution, padding)
    grid.frames = torch.tensor([frame])
    return grid


def trilinear_sample(grid, points):
    """
    points: F x S x 3 (或 S x 3 对应单帧网格)
    超出体素中心范围的点取 0；对点坐标可微
    """
    single = points.dim() == 2
    if single:
        points = points[None]
    if points.shape[0] != len(grid):
        raise ValidationError(f'{points.shape[0]} point frames but {len(grid)} grids')
    n = grid.resolution
    values = grid.values.to(points.dtype)
    u = (points - grid.origin.to(points.dtype)[:, None, :]) / grid.cell.to(points.dtype)[:, None, None]
    inside = ((u >= 0) & (u <= n - 1)).all(dim=-1)
    base = u.detach().floor().clamp(0, n - 2)
    frac = u - base
    base = base.long()

    flat = values.reshape(values.shape[0], -1)
    out = points.new_zeros(points.shape[:-1])
    for dx in (0, 1):
        wx = frac[..., 0] if dx else 1 - frac[..., 0]
        for dy in (0, 1):
            wy = frac[..., 1] if dy else 1 - frac[..., 1]
            for dz in (0, 1):
                wz = frac[..., 2] if dz else 1 - frac[..., 2]
                index = ((base[..., 0] + dx) * n + (base[..., 1] + dy)) * n + (base[..., 2] + dz)
                out = out + wx * wy * wz * flat.gather(1, index)
    out = torch.where(inside, out, torch.zeros_like(out))
    return out[0] if single else out


def object_world_points(object_features, samples, check=False):
    """
    object_features: ... x N_o x 9 (6D 旋转 + 平移)；samples: N_o x S x 3 或 ... x N_o x S x 3
    返回 ... x N_o x S x 3
    """
    rot = rot6d_to_matrix(object_features[..., :6], check=check)
    trans = object_features[..., 6:9]
    samples = samples.to(object_features.dtype)
    return torch.einsum('...ij,...sj->...si', rot, samples) + trans[..., None, :]


def loss_pen(object_features, samples, grids):
    """
    object_features: F x N_o x 9；samples: N_o x S x 3 或 F x N_o x S x 3；grids: F 帧 SdfGrid
    对样本、物体求和，对帧平均；梯度只流向物体位姿
    """
    f = object_features.shape[0]
    if len(grids) != f:
        raise ValidationError(f'{f} frames but {len(grids)} SDF grids')
    points = object_world_points(object_features, samples)
    n_o, s = points.shape[-3], points.shape[-2]
    phi = trilinear_sample(grids, points.reshape(f, n_o * s, 3))
    return phi.sum(dim=-1).mean()


def loss_dis(pred_features, gt_features, samples, mask=None):
    """
    相对距离一致性: 同一采样编号在物体 i, j 之间的平方距离
    loss = mean over (i<j, 帧, 采样点) (d_pred^2 - d_gt^2)^2
    pred/gt_features: ... x N x N_o x 9；samples: N_o x S x 3 (或带 batch)
    """
    if isinstance(samples, (list, tuple)):
        if len({s.shape[0] for s in samples}) != 1:
            raise ValidationError('objects must share the sample count (resample first)')
        samples = torch.stack([torch.as_tensor(s) for s in samples])
    n_o = pred_features.shape[-2]
    if n_o < 2:
        raise ValidationError('relative distance loss needs at least 2 objects')
    if pred_features.shape != gt_features.shape:
        raise ValidationError('pred and gt object features differ in shape')
    if samples.dim() == 4:
        samples = samples[:, None]
    pred = object_world_points(pred_features, samples)
    gt = object_world_points(gt_features, samples)
    i, j = torch.triu_indices(n_o, n_o, offset=1)
    d_pred = ((pred[..., i, :, :] - pred[..., j, :, :]) ** 2).sum(-1)
    d_gt = ((gt[..., i, :, :] - gt[..., j, :, :]) ** 2).sum(-1)
    err = ((d_pred - d_gt) ** 2).mean(dim=(-1, -2))
    if mask is None:
        return err.mean()
    m = torch.as_tensor(mask, dtype=err.dtype, device=err.device)
    return (err * m).sum() / m.sum().clamp_min(1)


# ---------------------------------------------------------------------------
# 组合
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    vel: float = 1.0
    pos: float = 1.0
    pen: float = 1.0
    dis: float = 0.1
    rec: float = 1.0

    def __post_init__(self):
        for name in ('vel', 'pos', 'pen', 'dis', 'rec'):
            if getattr(self, name) < 0:
                raise ValidationError(f'loss weight {name} must be non-negative')

    @classmethod
    def from_config(cls, cfg):
        return cls(vel=cfg.lambda_vel, pos=cfg.lambda_pos, pen=cfg.lambda_pen, dis=cfg.lambda_dis,
                   rec=cfg.lambda_rec)


def total_loss(parts, weights=LossWeights()):
    """parts 需含 vel/pos/pen/dis；rec 可选"""
    total = weights.vel * parts['vel'] + weights.pos * parts['pos'] + \
        weights.pen * parts['pen'] + weights.dis * parts['dis']
    if 'rec' in parts:
        total = total + weights.rec * parts['rec']
    return total


def joints_from_features(human, num_joints):
    """人体特征前 3J 维即关节位置"""
    return human[..., :3 * num_joints].reshape(human.shape[:-1] + (num_joints, 3))


def hoi_losses(pred_h, pred_o, gt_h, gt_o, mask, samples, body_model, cfg, weights=None):
    """
    训练一步的全部损失，输入为原始尺度特征
    pred_h/gt_h: B x T x D_h；pred_o/gt_o: B x T x (N_o*9)；mask: B x T；samples: B x N_o x S x 3
    返回 (total, parts: dict[str, tensor])
    """
    weights = weights or LossWeights.from_config(cfg)
    b, t = pred_h.shape[:2]
    j = body_model.num_joints
    n_o = pred_o.shape[-1] // OBJECT_FEATURE_DIM
    pj, gj = joints_from_features(pred_h, j), joints_from_features(gt_h, j)
    po = pred_o.reshape(b, t, n_o, OBJECT_FEATURE_DIM)
    go = gt_o.reshape(b, t, n_o, OBJECT_FEATURE_DIM)

    parts = {'pos': loss_pos(pj, gj, mask), 'vel': loss_vel(pj, gj, mask)}

    if weights.dis > 0 and n_o >= 2:
        sub = samples[:, :, :cfg.dis_samples]
        parts['dis'] = loss_dis(po, go, sub, mask)
    else:
        parts['dis'] = pred_h.new_zeros(())

    if weights.pen > 0:
        stride = max(cfg.pen_frame_stride, 1)
        bi, ti = torch.nonzero(mask[:, ::stride] > 0, as_tuple=True)
        ti = ti * stride
        if len(bi):
            grids = body_sdf_grids(pj[bi, ti].detach(), body_model.bones(), body_model.capsule_radii()[1:],
                                   cfg.sdf_resolution, cfg.sdf_padding)
            parts['pen'] = loss_pen(po[bi, ti], samples[bi, :, :cfg.pen_samples], grids)
        else:
            parts['pen'] = pred_h.new_zeros(())
    else:
        parts['pen'] = pred_h.new_zeros(())
    return total_loss(parts, weights), parts
