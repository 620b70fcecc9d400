# -*- coding: utf-8 -*-
"""
正向运动学人体模型
BodyModel 是抽象接口；内置两个玩具骨架:
  toy    24 关节 = 骨盆 + 21 个身体关节 + 左右手尖
  toy52  52 关节 = 骨盆 + 21 个身体关节 + 左右手各 15 个手指关节
形状参数 beta(10 维) 线性地调节每根骨头的长度
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch

from errors import ValidationError
from motion_repr import axis_angle_to_matrix

NUM_BODY_JOINTS = 21
NUM_HAND_JOINTS = 30
NUM_BETAS = 10

# 骨盆 + 21 个身体关节，父节点与静止偏移(米，y 轴向上，x 轴指向身体左侧)
BODY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
BODY_OFFSETS = [
    (0.0, 0.0, 0.0),
    (0.09, -0.09, 0.0), (-0.09, -0.09, 0.0), (0.0, 0.11, 0.0),
    (0.0, -0.38, 0.0), (0.0, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, 0.0), (0.0, -0.40, 0.0), (0.0, 0.05, 0.0),
    (0.0, -0.06, 0.12), (0.0, -0.06, 0.12), (0.0, 0.21, 0.0),
    (0.07, 0.12, 0.0), (-0.07, 0.12, 0.0), (0.0, 0.09, 0.03),
    (0.11, 0.03, 0.0), (-0.11, 0.03, 0.0), (0.26, 0.0, 0.0),
    (-0.26, 0.0, 0.0), (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0),
]
BODY_RADII = [0.0, 0.08, 0.08, 0.11, 0.06, 0.06, 0.11, 0.05, 0.05, 0.11, 0.04, 0.04,
              0.05, 0.05, 0.05, 0.09, 0.05, 0.05, 0.045, 0.045, 0.035, 0.035]
LEFT_WRIST, RIGHT_WRIST = 20, 21
LEG_JOINTS = (1, 2, 4, 5, 7, 8, 10, 11)
ARM_JOINTS = (16, 17, 18, 19, 20, 21)
TORSO_JOINTS = (3, 6, 9, 12, 13, 14, 15)

FINGER_BASES = [(0.03, -0.01, 0.03), (0.09, 0.0, 0.025), (0.095, 0.0, 0.005),
                (0.09, 0.0, -0.015), (0.08, 0.0, -0.035)]
FINGER_STEP = (0.03, 0.0, 0.0)


@dataclass
class BodyParams:
    """一段序列的参数，前置维度 N 为帧数；shape 整段共享"""
    global_orient: torch.Tensor   # N x 3
    body_pose: torch.Tensor       # N x 21 x 3
    hand_pose: torch.Tensor       # N x 30 x 3
    translation: torch.Tensor     # N x 3
    shape: torch.Tensor           # 10

    @classmethod
    def zeros(cls, num_frames, dtype=torch.float64):
        return cls(
            global_orient=torch.zeros(num_frames, 3, dtype=dtype),
            body_pose=torch.zeros(num_frames, NUM_BODY_JOINTS, 3, dtype=dtype),
            hand_pose=torch.zeros(num_frames, NUM_HAND_JOINTS, 3, dtype=dtype),
            translation=torch.zeros(num_frames, 3, dtype=dtype),
            shape=torch.zeros(NUM_BETAS, dtype=dtype),
        )

    @property
    def num_frames(self):
        return self.global_orient.shape[0]

    def tensors(self):
        return [self.global_orient, self.body_pose, self.hand_pose, self.translation, self.shape]

    def detach(self):
        return BodyParams(*[t.detach().clone() for t in self.tensors()])

    def validate(self):
        for t in self.tensors():
            if not torch.isfinite(t).all():
                raise ValidationError('body params must be finite')
        return self

    def to_numpy(self):
        return {
            'global_orient': self.global_orient.detach().cpu().numpy(),
            'body_pose': self.body_pose.detach().cpu().numpy(),
            'hand_pose': self.hand_pose.detach().cpu().numpy(),
            'translation': self.translation.detach().cpu().numpy(),
            'shape': self.shape.detach().cpu().numpy(),
        }


class BodyModel(ABC):
    parents = []

    @property
    def num_joints(self):
        return len(self.parents)

    @abstractmethod
    def bone_offsets(self, shape):
        """shape (10,) → J x 3 偏移"""

    @abstractmethod
    def local_rotations(self, params):
        """params → N x J x 3 x 3 局部旋转"""

    @abstractmethod
    def capsule_radii(self):
        """每个关节与其父关节之间骨头的半径，根关节为 0"""

    def forward(self, params, return_rotations=False):
        offsets = self.bone_offsets(params.shape)
        local = self.local_rotations(params)
        n = params.num_frames
        positions = [params.translation]
        rotations = [local[:, 0]]
        for j in range(1, self.num_joints):
            p = self.parents[j]
            rotations.append(rotations[p] @ local[:, j])
            positions.append(positions[p] + (rotations[p] @ offsets[j].expand(n, 3)[..., None])[..., 0])
        joints = torch.stack(positions, dim=1)
        if return_rotations:
            return joints, torch.stack(rotations, dim=1)
        return joints

    def rest_joints(self, dtype=torch.float64):
        return self.forward(BodyParams.zeros(1, dtype=dtype))[0]

    def bones(self):
        return [(self.parents[j], j) for j in range(1, self.num_joints)]


class ToyBodyModel(BodyModel):
    def __init__(self, with_fingers=False):
        self.with_fingers = with_fingers
        parents = list(BODY_PARENTS)
        offsets = [list(o) for o in BODY_OFFSETS]
        radii = list(BODY_RADII)
        self.hand_slots = []
        if with_fingers:
            for wrist, sign in ((LEFT_WRIST, 1.0), (RIGHT_WRIST, -1.0)):
                for base in FINGER_BASES:
                    parent = wrist
                    for s in range(3):
                        step = base if s == 0 else FINGER_STEP
                        parents.append(parent)
                        offsets.append([sign * step[0], step[1], step[2]])
                        radii.append(0.01)
                        parent = len(parents) - 1
            self.hand_slots = list(range(len(BODY_PARENTS), len(parents)))
        else:
            for wrist, sign in ((LEFT_WRIST, 1.0), (RIGHT_WRIST, -1.0)):
                parents.append(wrist)
                offsets.append([sign * 0.09, 0.0, 0.0])
                radii.append(0.03)
        self.parents = parents
        self.rest_offsets = np.asarray(offsets, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)
        self.shape_dirs = self._make_shape_dirs()

    def _make_shape_dirs(self):
        j = len(self.parents)
        dirs = np.zeros((j, NUM_BETAS))
        dirs[:, 0] = 0.05
        dirs[list(LEG_JOINTS), 1] = 0.05
        dirs[list(ARM_JOINTS), 2] = 0.05
        dirs[list(TORSO_JOINTS), 3] = 0.05
        rng = np.random.default_rng(0)
        dirs[:, 4:] = rng.uniform(-0.01, 0.01, size=(j, NUM_BETAS - 4))
        dirs[0] = 0.0
        return dirs

    def bone_offsets(self, shape):
        base = torch.as_tensor(self.rest_offsets, dtype=shape.dtype, device=shape.device)
        dirs = torch.as_tensor(self.shape_dirs, dtype=shape.dtype, device=shape.device)
        return base * (1.0 + dirs @ shape)[:, None]

    def local_rotations(self, params):
        n = params.num_frames
        pose = [params.global_orient[:, None], params.body_pose]
        extra = self.num_joints - 1 - NUM_BODY_JOINTS
        if self.with_fingers:
            pose.append(params.hand_pose)
        else:
            pose.append(torch.zeros(n, extra, 3, dtype=params.global_orient.dtype,
                                    device=params.global_orient.device))
        return axis_angle_to_matrix(torch.cat(pose, dim=1))

    def capsule_radii(self):
        return self.radii.copy()


def load_body_model(name):
    if name == 'toy':
        return ToyBodyModel(with_fingers=False)
    if name == 'toy52':
        return ToyBodyModel(with_fingers=True)
    raise ValidationError(f'unknown body model: {name}')


def shape_from_stature(height, weight, body_model):
    """根据身高体重给出 beta 初值: beta0 控制整体比例，beta3 随 BMI 调节躯干"""
    rest = body_model.rest_joints().numpy()
    # 头顶在头关节之上约 0.1m
    rest_height = rest[:, 1].max() - rest[:, 1].min() + 0.1
    beta = np.zeros(NUM_BETAS)
    beta[0] = (height / rest_height - 1.0) / 0.05
    bmi = weight / max(height, 1e-6) ** 2
    beta[3] = float(np.clip((bmi - 22.0) / 10.0, -1.0, 1.0))
    return beta
