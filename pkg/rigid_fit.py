# -*- coding: utf-8 -*-
"""
MoCap 后处理
1. 刚体: 由标记点恢复位姿 (正交 Procrustes / SVD)，并做质心偏差校准
2. 人体: 最小化 E = alpha*E_j + lambda*E_s + gamma*E_r 拟合人体参数
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from archive import read_tensors, write_tensors
from body_model import BodyParams, load_body_model, shape_from_stature
from errors import DegenerateGeometryError, FitError, ValidationError
from motion_repr import canonicalize_axis_angle, matrix_to_rot6d

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# 刚体标记点
# ---------------------------------------------------------------------------

@dataclass
class MarkerSet:
    positions: np.ndarray    # N x M x 3
    assignment: np.ndarray   # M，-1 表示人体关节标记，k>=0 表示第 k 个刚体

    def rigid_body_ids(self):
        return sorted(int(k) for k in np.unique(self.assignment) if k >= 0)

    def body_markers(self):
        return self.positions[:, self.assignment < 0]

    def rigid_markers(self, body_id):
        markers = self.positions[:, self.assignment == body_id]
        if markers.shape[1] < 3:
            raise ValidationError(f'rigid body {body_id} needs at least 3 markers')
        return markers


def rigid_pose_from_markers(rest_markers, observed):
    """返回 (R, t, rms)，使 sum ||R @ rest_i + t - obs_i||^2 最小，det(R)=+1"""
    rest = np.asarray(rest_markers, dtype=np.float64)
    obs = np.asarray(observed, dtype=np.float64)
    if rest.shape != obs.shape or rest.ndim != 2 or rest.shape[1] != 3:
        raise ValidationError('marker arrays must both be M x 3')
    if rest.shape[0] < 3:
        raise DegenerateGeometryError('need at least 3 markers')

    centroid_rest = rest.mean(axis=0)
    centroid_obs = obs.mean(axis=0)
    a = rest - centroid_rest
    b = obs - centroid_obs
    spread = np.linalg.svd(a, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateGeometryError('rest markers are collinear or coincident')

    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    trans = centroid_obs - rot @ centroid_rest
    residual = float(np.sqrt(np.mean(np.sum((rest @ rot.T + trans - obs) ** 2, axis=-1))))
    return rot, trans, residual


def calibrate_centroid_bias(marker_rest, object_centroid):
    """标记点中心与物体质心的偏差，表达在静止(输入)坐标系下"""
    return np.asarray(object_centroid, dtype=np.float64) - np.asarray(marker_rest, dtype=np.float64).mean(axis=0)


def track_object(marker_frames, rest_markers=None, object_centroid=None):
    """
    逐帧恢复刚体位姿
    返回 (相对首帧的旋转 N x 3 x 3, 物体质心平移 N x 3, 每帧残差 N)
    """
    frames = np.asarray(marker_frames, dtype=np.float64)
    rest = frames[0] if rest_markers is None else np.asarray(rest_markers, dtype=np.float64)
    bias = np.zeros(3) if object_centroid is None else calibrate_centroid_bias(rest, object_centroid)

    rotations, translations, residuals = [], [], []
    for observed in frames:
        rot, _, res = rigid_pose_from_markers(rest, observed)
        rotations.append(rot)
        translations.append(observed.mean(axis=0) + rot @ bias)
        residuals.append(res)
    rotations = np.stack(rotations)
    relative = rotations @ rotations[0].T
    return relative, np.stack(translations), np.asarray(residuals)


# ---------------------------------------------------------------------------
# 人体拟合能量
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitWeights:
    alpha: float = 1.0
    lam: float = 0.1
    gamma: float = 0.01


@dataclass
class FitOptions:
    lr: float = 0.05
    final_lr: float = 5e-4
    max_iters: int = 500
    tol: float = 1e-7
    patience: int = 10
    height: float = 1.7
    weight: float = 70.0
    shape: Optional[np.ndarray] = None
    progress: bool = False

    @classmethod
    def from_config(cls, config):
        return cls(lr=config.fit_lr, max_iters=config.fit_max_iters, tol=config.fit_tol,
                   patience=config.fit_patience, height=config.subject_height,
                   weight=config.subject_weight)


@dataclass
class FitResult:
    params: BodyParams
    energy: float
    terms: dict
    iterations: int
    converged: bool
    mean_joint_error: float
    history: list = field(default_factory=list)


def _check_targets(body_model, params, targets):
    targets = torch.as_tensor(targets)
    expected = (params.num_frames, body_model.num_joints, 3)
    if tuple(targets.shape) != expected:
        raise ValidationError(f'targets have shape {tuple(targets.shape)}, expected {expected}')
    if not torch.isfinite(targets).all():
        raise ValidationError('targets must be finite')
    return targets


def joint_energy(body_model, params, targets, joints=None):
    targets = _check_targets(body_model, params, targets)
    joints = body_model.forward(params) if joints is None else joints
    return ((joints - targets.to(joints.dtype)) ** 2).sum()


def smooth_energy(body_model, params, joints=None):
    """帧数 < 2 时约定为 0"""
    joints = body_model.forward(params) if joints is None else joints
    if joints.shape[0] < 2:
        return joints.new_zeros(())
    return ((joints[1:] - joints[:-1]) ** 2).sum()


def reg_energy(params):
    return (params.body_pose ** 2).sum() + (params.hand_pose ** 2).sum()


def total_energy(body_model, params, targets, weights=FitWeights()):
    joints = body_model.forward(params)
    terms = {
        'joint': joint_energy(body_model, params, targets, joints=joints),
        'smooth': smooth_energy(body_model, params, joints=joints),
        'reg': reg_energy(params),
    }
    energy = weights.alpha * terms['joint'] + weights.lam * terms['smooth'] + weights.gamma * terms['reg']
    return energy, terms


def fit_body(targets, body_model, weights=FitWeights(), options=None, init=None):
    """
    一阶自适应梯度下降 (Adam)，beta 初始化后固定
    超过最大迭代仍未收敛时返回目前最好的结果并标记 converged=False
    能量出现 NaN / inf 时抛 FitError
    """
    options = options or FitOptions()
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.float64)
    n = targets.shape[0]

    if init is None:
        params = BodyParams.zeros(n)
        params.translation = targets[:, 0].clone()
        shape = options.shape if options.shape is not None else \
            shape_from_stature(options.height, options.weight, body_model)
        params.shape = torch.as_tensor(np.asarray(shape), dtype=torch.float64)
    else:
        params = init.detach()
    _check_targets(body_model, params, targets)

    free = [params.global_orient, params.body_pose, params.hand_pose, params.translation]
    for t in free:
        t.requires_grad_(True)
    optimizer = torch.optim.Adam(free, lr=options.lr)
    gamma = (options.final_lr / options.lr) ** (1.0 / max(options.max_iters, 1))
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=gamma)

    best_energy, best_params, best_terms = float('inf'), params.detach(), {}
    history = []
    converged = False
    iterations = 0
    for it in tqdm(range(options.max_iters), disable=not options.progress, desc='fit'):
        optimizer.zero_grad()
        energy, terms = total_energy(body_model, params, targets, weights)
        value = float(energy.detach())
        if not np.isfinite(value):
            raise FitError(f'fit energy became {value} at iteration {it}', iteration=it,
                           best_energy=best_energy if np.isfinite(best_energy) else None)
        energy.backward()
        if value < best_energy:
            best_energy = value
            best_params = params.detach()
            best_terms = {k: float(v.detach()) for k, v in terms.items()}
        # 记录最优值序列，震荡不会被误判为收敛
        history.append(best_energy)
        iterations = it + 1
        if len(history) > options.patience:
            prev = history[-options.patience - 1]
            if prev > 0 and (prev - best_energy) / prev < options.tol:
                converged = True
                break
        optimizer.step()
        scheduler.step()

    if not converged:
        logger.warning('fit_body stopped after %d iterations without converging (E=%.6g)',
                       iterations, best_energy)

    # 轴角折回 [0, π)
    for name in ('global_orient', 'body_pose', 'hand_pose'):
        value = getattr(best_params, name).numpy()
        setattr(best_params, name, torch.from_numpy(canonicalize_axis_angle(value)))

    with torch.no_grad():
        err = (body_model.forward(best_params) - targets).norm(dim=-1).mean().item()
    logger.info('fit_body: %d iterations, energy %.6g, mean joint error %.3f mm',
                iterations, best_energy, err * 1000)
    return FitResult(params=best_params, energy=best_energy, terms=best_terms, iterations=iterations,
                     converged=converged, mean_joint_error=err, history=history)


# ---------------------------------------------------------------------------
# 文件入口
# ---------------------------------------------------------------------------

def _read_capture(path, num_joints):
    """
    采集文件: tensors.bin 容器 (markers.positions N x M x 3, markers.assignment M,
    可选 markers.centroids K x 3 与 joints N x J x 3)，或同名键的 .json / .npz
    没有 joints 时人体标记 (assignment = -1) 按顺序就是关节目标
    """
    if not os.path.exists(path):
        raise ValidationError(f'capture file not found: {path}')
    try:
        if path.endswith('.npz'):
            with np.load(path) as data:
                raw = {k: data[k] for k in data.files}
        elif path.endswith('.json'):
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        else:
            raw = read_tensors(path)
    except (OSError, ValueError) as e:
        raise ValidationError(f'cannot read capture {path}: {e}') from e

    markers = None
    if 'markers.positions' in raw:
        if 'markers.assignment' not in raw:
            raise ValidationError('markers.positions needs markers.assignment')
        markers = MarkerSet(positions=np.asarray(raw['markers.positions'], dtype=np.float64),
                            assignment=np.asarray(raw['markers.assignment'], dtype=np.int64))
        if markers.assignment.shape != (markers.positions.shape[1],):
            raise ValidationError('markers.assignment must have one entry per marker')
    if 'joints' in raw:
        joints = np.asarray(raw['joints'], dtype=np.float64)
    elif markers is not None:
        joints = markers.body_markers()
        if joints.shape[1] != num_joints:
            raise ValidationError(f'{joints.shape[1]} body markers, body model has {num_joints} joints')
    else:
        raise ValidationError(f'{path} has neither joints nor markers')
    centroids = raw.get('markers.centroids')
    return joints, markers, None if centroids is None else np.asarray(centroids, dtype=np.float64)


def fit_markers_file(path, config, out_path=None, progress=False):
    """
    拟合一段采集: 刚体位姿 + 人体参数
    给 out_path 时写出 tensors.bin 容器 (params.* / obj{k}.rotation / obj{k}.translation) 和同名 .json 摘要
    """
    body_model = load_body_model(config.body_model)
    joints, markers, centroids = _read_capture(path, body_model.num_joints)
    options = FitOptions.from_config(config)
    options.progress = progress
    weights = FitWeights(alpha=config.fit_alpha, lam=config.fit_lambda, gamma=config.fit_gamma)
    result = fit_body(joints, body_model, weights, options)

    tensors = {f'params.{k}': v.astype(np.float32) for k, v in result.params.to_numpy().items()}
    objects = []
    if markers is not None:
        for k in markers.rigid_body_ids():
            centroid = None if centroids is None else centroids[k]
            rot, trans, residuals = track_object(markers.rigid_markers(k), object_centroid=centroid)
            tensors[f'obj{k}.rotation'] = matrix_to_rot6d(torch.as_tensor(rot)).numpy().astype(np.float32)
            tensors[f'obj{k}.translation'] = trans.astype(np.float32)
            objects.append({'id': k, 'max_residual': float(residuals.max())})

    summary = {
        'frames': int(result.params.num_frames),
        'energy': result.energy,
        'terms': result.terms,
        'iterations': result.iterations,
        'converged': result.converged,
        'mean_joint_error': result.mean_joint_error,
        'objects': objects,
        'config': config.fingerprint(),
    }
    if out_path:
        parent = os.path.dirname(os.path.abspath(out_path))
        os.makedirs(parent, exist_ok=True)
        write_tensors(out_path, tensors)
        with open(os.path.splitext(out_path)[0] + '.json', 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        summary['out'] = out_path
    return result, summary
