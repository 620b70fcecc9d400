# -*- coding: utf-8 -*-
"""
运动与几何的基础表示
- 6D 旋转 <-> 旋转矩阵 (列优先，Gram-Schmidt 解码)
- 人体运动 / 物体轨迹 / 物体几何 / HOI 序列的数据结构
- 表面采样与 BPS 编码
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from errors import DegenerateGeometryError, DegenerateRotationError, ValidationError

HUMAN_ROT_DIM = 6
OBJECT_FEATURE_DIM = 9
DEFAULT_SAMPLES = 1024


def human_feature_width(num_joints):
    return 3 * num_joints + 6 * num_joints + 3


# ---------------------------------------------------------------------------
# 旋转
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6d, check=True, eps=1e-9):
    """6D → 3x3，列1归一化，列2对列1正交化，列3为叉积。支持任意前置维度"""
    r6d = torch.as_tensor(r6d)
    a1, a2 = r6d[..., :3], r6d[..., 3:6]
    n1 = a1.norm(dim=-1, keepdim=True)
    if check:
        if not torch.isfinite(r6d).all():
            raise DegenerateRotationError('non-finite 6D rotation')
        if (n1 <= eps).any():
            raise DegenerateRotationError('first 6D column has near-zero norm')
    b1 = a1 / n1.clamp_min(eps)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = b2.norm(dim=-1, keepdim=True)
    if check and (n2 <= eps).any():
        raise DegenerateRotationError('6D columns are parallel or second column is zero')
    b2 = b2 / n2.clamp_min(eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack((b1, b2, b3), dim=-1)


def matrix_to_rot6d(matrix, tol=1e-4):
    matrix = torch.as_tensor(matrix)
    if matrix.shape[-2:] != (3, 3):
        raise ValidationError(f'expected (...,3,3) rotation, got {tuple(matrix.shape)}')
    eye = torch.eye(3, dtype=matrix.dtype, device=matrix.device)
    gram = matrix.transpose(-1, -2) @ matrix
    if (gram - eye).abs().max() > tol or (torch.linalg.det(matrix) - 1).abs().max() > tol:
        raise ValidationError('matrix is not a proper rotation within tolerance')
    return torch.cat((matrix[..., :, 0], matrix[..., :, 1]), dim=-1)


def axis_angle_to_matrix(aa):
    """Rodrigues 公式，小角度时用泰勒展开保证梯度有限"""
    aa = torch.as_tensor(aa)
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = theta2_safe.sqrt()
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / theta2_safe)

    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack((zero, -z, y, z, zero, -x, -y, x, zero), dim=-1).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


def canonicalize_axis_angle(aa):
    """把轴角的模长折回 [0, π)"""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(angle > 0, angle, 1.0)
    axis = aa / safe
    wrapped = np.mod(angle, 2 * np.pi)
    flip = wrapped >= np.pi
    wrapped = np.where(flip, 2 * np.pi - wrapped, wrapped)
    axis = np.where(flip, -axis, axis)
    return np.where(angle > 0, axis * wrapped, 0.0)


def random_rotations(count, rng):
    """随机轴角构造的旋转矩阵 (numpy, float64)"""
    axis = rng.normal(size=(count, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = rng.uniform(0, np.pi, size=(count, 1))
    return axis_angle_to_matrix(torch.from_numpy(axis * angle)).numpy()


# ---------------------------------------------------------------------------
# 数据结构
# ---------------------------------------------------------------------------

class Segment(NamedTuple):
    start: int
    end: int
    text: str


@dataclass
class HumanMotion:
    positions: np.ndarray        # T x J x 3
    rotations: np.ndarray        # T x J x 6
    root_translation: np.ndarray  # T x 3
    fps: int = 30

    @property
    def num_frames(self):
        return self.positions.shape[0]

    @property
    def num_joints(self):
        return self.positions.shape[1]

    @property
    def feature_width(self):
        return human_feature_width(self.num_joints)

    def validate(self):
        t, j = self.positions.shape[:2]
        if t < 1:
            raise ValidationError('human motion needs at least one frame')
        if self.positions.shape != (t, j, 3) or self.rotations.shape != (t, j, 6) \
                or self.root_translation.shape != (t, 3):
            raise ValidationError('inconsistent human motion shapes')
        for name in ('positions', 'rotations', 'root_translation'):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f'human {name} contains non-finite values')
        return self

    def flatten(self):
        t = self.num_frames
        return np.concatenate([
            self.positions.reshape(t, -1),
            self.rotations.reshape(t, -1),
            self.root_translation,
        ], axis=-1)

    @classmethod
    def from_flat(cls, features, num_joints, fps=30):
        features = np.asarray(features)
        width = human_feature_width(num_joints)
        if features.shape[-1] != width:
            raise ValidationError(f'human feature width {features.shape[-1]} != {width}')
        t = features.shape[0]
        p = features[:, :3 * num_joints].reshape(t, num_joints, 3)
        r = features[:, 3 * num_joints:9 * num_joints].reshape(t, num_joints, 6)
        return cls(positions=p, rotations=r, root_translation=features[:, 9 * num_joints:], fps=fps)

    def slice(self, start, end):
        return HumanMotion(self.positions[start:end], self.rotations[start:end],
                           self.root_translation[start:end], self.fps)


@dataclass
class ObjectGeometry:
    name: str
    mesh_vertices: np.ndarray      # V x 3，物体局部坐标(质心在原点)
    mesh_faces: np.ndarray         # F x 3
    surface_samples: np.ndarray    # S x 3
    bps_code: np.ndarray           # S x 3
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0


@dataclass
class ObjectTrack:
    rotation: np.ndarray     # T x 6，相对输入帧的旋转
    translation: np.ndarray  # T x 3
    geometry: ObjectGeometry

    @property
    def num_frames(self):
        return self.rotation.shape[0]

    def flatten(self):
        return np.concatenate([self.rotation, self.translation], axis=-1)

    @classmethod
    def from_flat(cls, features, geometry):
        features = np.asarray(features)
        if features.shape[-1] != OBJECT_FEATURE_DIM:
            raise ValidationError(f'object feature width {features.shape[-1]} != {OBJECT_FEATURE_DIM}')
        return cls(rotation=features[:, :6], translation=features[:, 6:], geometry=geometry)

    def validate(self, atol=1e-6):
        first = rot6d_to_matrix(torch.as_tensor(self.rotation[0], dtype=torch.float64))
        if (first - torch.eye(3, dtype=torch.float64)).abs().max() > atol:
            raise ValidationError('object rotation at frame 0 must be identity')
        return self

    def world_points(self, points=None):
        """按轨迹变换采样点: T x S x 3"""
        pts = self.geometry.surface_samples if points is None else points
        rot = rot6d_to_matrix(torch.as_tensor(self.rotation, dtype=torch.float64)).numpy()
        return np.einsum('tij,sj->tsi', rot, pts) + self.translation[:, None, :]

    def slice(self, start, end):
        return ObjectTrack(self.rotation[start:end], self.translation[start:end], self.geometry)


@dataclass
class HoiSequence:
    seq_id: str
    human: HumanMotion
    objects: List[ObjectTrack]
    text: str
    segments: List[Segment]
    object_names: Optional[List[str]] = None
    contacts: list = field(default_factory=list)  # [{object, joint, start, end}] 抓取区间

    @property
    def num_frames(self):
        return self.human.num_frames

    @property
    def fps(self):
        return self.human.fps

    def validate(self):
        self.human.validate()
        t = self.num_frames
        if any(obj.num_frames != t for obj in self.objects):
            raise ValidationError('all tracks must share the frame count')
        for obj in self.objects:
            obj.validate()
        check_segment_tiling(self.segments, t)
        return self

    def object_features(self):
        """T x (N_o * 9)"""
        return np.concatenate([obj.flatten() for obj in self.objects], axis=-1)


def check_segment_tiling(segments, num_frames):
    if not segments:
        raise ValidationError('sequence needs at least one segment')
    cursor = 0
    for seg in segments:
        if seg.start != cursor or seg.end <= seg.start:
            raise ValidationError(f'segments must tile [0, {num_frames}) contiguously')
        cursor = seg.end
    if cursor != num_frames:
        raise ValidationError(f'segments end at {cursor}, expected {num_frames}')


# ---------------------------------------------------------------------------
# 表面采样 / BPS
# ---------------------------------------------------------------------------

def face_areas(vertices, faces):
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)


def sample_surface_points(vertices, faces, count=DEFAULT_SAMPLES, seed=0, return_index=False):
    """按面积加权的均匀表面采样，给定 seed 结果确定"""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[0] == 0:
        raise DegenerateGeometryError('mesh has no faces')
    areas = face_areas(vertices, faces)
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateGeometryError('mesh has zero surface area')

    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(faces), size=count, p=areas / total)
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    bary = np.stack([1 - u - v, u, v], axis=-1)
    tri = vertices[faces[face_idx]]
    points = np.einsum('sk,skd->sd', bary, tri)
    if return_index:
        return points, face_idx, bary
    return points


def make_basis(count=DEFAULT_SAMPLES, seed=20240):
    """单位球内均匀分布的基点，整个语料共用一套"""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    radius = rng.random(count) ** (1.0 / 3.0)
    return direction * radius[:, None]


def normalize_points(points):
    """平移到包围盒中心并缩放进单位球，返回 (points, center, scale)"""
    points = np.asarray(points, dtype=np.float64)
    center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    scale = float(np.linalg.norm(points - center, axis=-1).max())
    if scale <= 0:
        raise DegenerateGeometryError('cannot normalize a point set with zero extent')
    return (points - center) / scale, center, scale


def nearest_basis_index(samples, basis, chunk=4096):
    """暴力最近邻，距离相同取编号最小的基点"""
    samples = np.asarray(samples, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    out = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), chunk):
        block = samples[start:start + chunk]
        d2 = ((block[:, None, :] - basis[None, :, :]) ** 2).sum(-1)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


def bps_encode(samples, basis):
    samples = np.asarray(samples, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1 or basis.ndim != 2 or basis.shape[0] < 1:
        raise ValidationError('bps_encode needs non-empty S x 3 samples and B x 3 basis')
    if not (np.isfinite(samples).all() and np.isfinite(basis).all()):
        raise ValidationError('bps_encode inputs must be finite')
    return samples - basis[nearest_basis_index(samples, basis)]


def encode_geometry(name, vertices, faces, basis, count=DEFAULT_SAMPLES, seed=0):
    """采样表面点并计算 BPS 编码，采样点保留在物体局部坐标系"""
    vertices = np.asarray(vertices, dtype=np.float64)
    samples = sample_surface_points(vertices, faces, count, seed)
    normalized, center, scale = normalize_points(samples)
    return ObjectGeometry(
        name=name,
        mesh_vertices=vertices,
        mesh_faces=np.asarray(faces, dtype=np.int64),
        surface_samples=samples,
        bps_code=bps_encode(normalized, basis),
        center=center,
        scale=scale,
    )
