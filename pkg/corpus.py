# -*- coding: utf-8 -*-
"""
合成 HOI 语料
- 用玩具人体模型 + 基本几何体脚本化生成 "伸手 → 抓取锁定 → 搬运 → 放下" 的交互
- 数据集划分、归一化统计、分词、批量读取
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch
import trimesh
from scipy.spatial.transform import Rotation

from archive import read_archive, write_archive
from body_model import (LEFT_WRIST, RIGHT_WRIST, BodyParams, load_body_model)
from config import SCHEMA_VERSION
from diffusion import ConditionPack
from errors import ValidationError
from motion_repr import (OBJECT_FEATURE_DIM, HoiSequence, HumanMotion, ObjectTrack, Segment,
                         encode_geometry, human_feature_width, make_basis, matrix_to_rot6d)

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
STATS_FILE = 'stats.json'
VOCAB_FILE = 'vocab.json'
SPLITS = ('train', 'test', 'val')
MIN_SEGMENT_FRAMES = 15
PAD, UNK = '<pad>', '<unk>'

# 名称: (基本形状, 尺寸)，尺寸单位为米
OBJECT_VOCAB = {
    'cube-m': ('box', (0.08, 0.08, 0.08)),
    'cube-l': ('box', (0.12, 0.12, 0.12)),
    'cylinder-m': ('cylinder', (0.04, 0.12)),
    'cylinder-l': ('cylinder', (0.05, 0.18)),
    'pyramid-m': ('cone', (0.06, 0.09)),
    'apple': ('sphere', (0.04,)),
    'lemon': ('sphere', (0.035,)),
    'teacup': ('cylinder', (0.04, 0.07)),
    'mug': ('cylinder', (0.045, 0.10)),
    'bottle': ('cylinder', (0.035, 0.22)),
    'bowl': ('cylinder', (0.08, 0.05)),
    'plate': ('cylinder', (0.10, 0.02)),
    'pan': ('cylinder', (0.12, 0.04)),
}
CONTAINERS = ('bowl', 'plate', 'pan')

SEGMENT_TEMPLATES = {
    'put': 'pick up the {a} with the {hand} hand and put it into the {b}',
    'place': 'place the {a} on the {b} with the {hand} hand',
    'stack': 'stack the {a} on top of the {b} with the {hand} hand',
    'move': 'move the {a} to the {side} of the table with the {hand} hand',
}


# ---------------------------------------------------------------------------
# 分词
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


@dataclass
class TokenizedText:
    ids: List[int]
    length: int
    max_len: int


class Vocabulary:
    def __init__(self, tokens):
        self.tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, texts):
        return cls(sorted({tok for text in texts for tok in tokenize(text)}))

    def encode(self, text, max_len):
        ids = [self.index.get(tok, self.unk_id) for tok in tokenize(text)][:max_len]
        length = len(ids)
        return TokenizedText(ids=ids + [self.pad_id] * (max_len - length), length=length, max_len=max_len)

    def encode_batch(self, texts, max_len):
        return torch.tensor([self.encode(t, max_len).ids for t in texts], dtype=torch.long)

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'tokens': self.tokens}, f, ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls(json.load(f)['tokens'])


# ---------------------------------------------------------------------------
# 归一化统计
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    human_mean: np.ndarray
    human_std: np.ndarray
    object_mean: np.ndarray
    object_std: np.ndarray
    min_std: float = 1e-6

    @classmethod
    def compute(cls, sequences, min_std=1e-6):
        human = np.concatenate([s.human.flatten().astype(np.float64) for s in sequences])
        objects = np.concatenate([obj.flatten().astype(np.float64) for s in sequences for obj in s.objects])
        return cls(human_mean=human.mean(0), human_std=np.maximum(human.std(0), min_std),
                   object_mean=objects.mean(0), object_std=np.maximum(objects.std(0), min_std),
                   min_std=min_std)

    def _cast(self, x, value):
        if isinstance(x, torch.Tensor):
            return torch.as_tensor(value, dtype=x.dtype, device=x.device)
        return value

    def _tile(self, x, value):
        n = x.shape[-1] // OBJECT_FEATURE_DIM
        return self._cast(x, np.tile(value, n))

    def normalize_human(self, x):
        return (x - self._cast(x, self.human_mean)) / self._cast(x, self.human_std)

    def denormalize_human(self, x):
        return x * self._cast(x, self.human_std) + self._cast(x, self.human_mean)

    def normalize_objects(self, x):
        return (x - self._tile(x, self.object_mean)) / self._tile(x, self.object_std)

    def denormalize_objects(self, x):
        return x * self._tile(x, self.object_std) + self._tile(x, self.object_mean)

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ('human_mean', 'human_std', 'object_mean', 'object_std')} | {'min_std': self.min_std}

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: np.asarray(v, dtype=np.float64) if isinstance(v, list) else v for k, v in data.items()})

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# 清单与划分
# ---------------------------------------------------------------------------

@dataclass
class CorpusManifest:
    root: str
    ids: List[str]
    splits: Dict[str, str] = field(default_factory=dict)
    object_vocab: List[str] = field(default_factory=list)
    fps: int = 30
    num_objects: int = 2
    num_joints: int = 24
    body_model: str = 'toy'
    schema_version: int = SCHEMA_VERSION
    config: dict = field(default_factory=dict)

    def ids_for(self, split):
        if split not in SPLITS:
            raise ValidationError(f'unknown split: {split}')
        return [i for i in self.ids if self.splits.get(i) == split]

    def path_of(self, seq_id):
        return os.path.join(self.root, seq_id)

    def save(self):
        data = {k: getattr(self, k) for k in ('ids', 'splits', 'object_vocab', 'fps', 'num_objects',
                                              'num_joints', 'body_model', 'schema_version', 'config')}
        with open(os.path.join(self.root, MANIFEST_FILE), 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def load(cls, root):
        path = os.path.join(root, MANIFEST_FILE)
        if not os.path.exists(path):
            raise ValidationError(f'no corpus manifest at {path}')
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        if data.get('schema_version') != SCHEMA_VERSION:
            from errors import SchemaMismatchError
            raise SchemaMismatchError(f'corpus schema {data.get("schema_version")} != {SCHEMA_VERSION}')
        return cls(root=root, **data)

    def load_stats(self):
        return NormStats.load(os.path.join(self.root, STATS_FILE))

    def load_vocab(self):
        return Vocabulary.load(os.path.join(self.root, VOCAB_FILE))


def split_counts(n, ratios):
    """先取整，保证每份至少一个，剩余按 train, test, val 的顺序补足"""
    counts = [int(np.floor(n * r + 1e-9)) for r in ratios]
    counts = [max(c, 1) for c in counts]
    order = list(range(len(ratios)))
    while sum(counts) < n:
        for i in order:
            if sum(counts) == n:
                break
            counts[i] += 1
    while sum(counts) > n:
        counts[int(np.argmax(counts))] -= 1
    return counts


def split_dataset(manifest, ratios=(0.8, 0.15, 0.05), seed=0):
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError('split ratios must sum to 1')
    n = len(manifest.ids)
    if n < len(SPLITS):
        raise ValidationError(f'{n} sequences cannot fill {len(SPLITS)} splits')
    counts = split_counts(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    splits, cursor = {}, 0
    for name, count in zip(SPLITS, counts):
        for idx in perm[cursor:cursor + count]:
            splits[manifest.ids[idx]] = name
        cursor += count
    manifest.splits = splits
    return manifest


# ---------------------------------------------------------------------------
# 网格
# ---------------------------------------------------------------------------

def make_primitive(name):
    kind, dims = OBJECT_VOCAB[name]
    if kind == 'box':
        mesh = trimesh.creation.box(extents=dims)
    elif kind == 'sphere':
        mesh = trimesh.creation.icosphere(subdivisions=2, radius=dims[0])
    elif kind == 'cylinder':
        mesh = trimesh.creation.cylinder(radius=dims[0], height=dims[1], sections=16)
    elif kind == 'cone':
        mesh = trimesh.creation.cone(radius=dims[0], height=dims[1], sections=4)
    else:
        raise ValidationError(f'unknown primitive kind {kind}')
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    if kind in ('cylinder', 'cone'):
        # trimesh 的轴向是 z，这里换成 y 轴向上
        vertices = vertices @ Rotation.from_euler('x', -90, degrees=True).as_matrix().T
    vertices -= 0.5 * (vertices.min(0) + vertices.max(0))
    return vertices, np.asarray(mesh.faces, dtype=np.int64)


def read_obj(path):
    """只支持 v / f 行的 OBJ 子集，多边形按扇形三角化"""
    vertices, faces = [], []
    with open(path, 'r', encoding='utf-8', errors='ignore') as f:
        for line in f:
            parts = line.strip().split()
            if not parts or parts[0].startswith('#'):
                continue
            if parts[0] == 'v' and len(parts) >= 4:
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == 'f' and len(parts) >= 4:
                idx = [int(p.split('/')[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], a, b])
    if not vertices or not faces:
        raise ValidationError(f'{path} has no triangles')
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


# ---------------------------------------------------------------------------
# 合成动作
# ---------------------------------------------------------------------------

def min_jerk(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


def _rotation_between(a, b):
    """逐帧把单位向量 a 转到 b 的最小旋转，N x 3 x 3"""
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis, axis=-1, keepdims=True)
    cos = np.sum(a * b, axis=-1, keepdims=True)
    angle = np.arctan2(sin, cos)
    axis = axis / np.where(sin > 1e-12, sin, 1.0)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def _two_bone_ik(shoulder, target, l1, l2, pole):
    d = target - shoulder
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    u = d / np.maximum(dist, 1e-9)
    dist = np.clip(dist, abs(l1 - l2) + 1e-4, l1 + l2 - 1e-4)
    a = (l1 ** 2 - l2 ** 2 + dist ** 2) / (2 * dist)
    h = np.sqrt(np.maximum(l1 ** 2 - a ** 2, 0.0))
    v = pole - np.sum(pole * u, axis=-1, keepdims=True) * u
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-9)
    elbow = shoulder + a * u + h * v
    return elbow, shoulder + dist * u


@dataclass
class _Plan:
    obj: int
    target: np.ndarray
    hand: str
    text: str


class SceneScripter:
    """
    生成一条序列: 站立的人依次把物体搬到目标位置
    被抓住的物体刚性焊接在手腕关节上
    """

    SHOULDERS = {'left': (13, 16, 18), 'right': (14, 17, 19)}
    WRISTS = {'left': LEFT_WRIST, 'right': RIGHT_WRIST}

    def __init__(self, config, body_model, basis):
        self.config = config
        self.body_model = body_model
        self.basis = basis

    def _forward(self, params):
        with torch.no_grad():
            joints, rots = self.body_model.forward(params, return_rotations=True)
        return joints.numpy(), rots.numpy()

    def generate(self, seq_id, rng):
        cfg = self.config
        n_obj = cfg.num_objects
        frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        max_m = min(cfg.max_segments, frames // MIN_SEGMENT_FRAMES)
        m = int(rng.integers(cfg.min_segments, max_m + 1))
        spare = frames - m * MIN_SEGMENT_FRAMES
        lengths = MIN_SEGMENT_FRAMES + rng.multinomial(spare, np.ones(m) / m)
        bounds = np.concatenate([[0], np.cumsum(lengths)])

        names = self._pick_objects(rng, n_obj)
        geometries = []
        for k, name in enumerate(names):
            vertices, faces = make_primitive(name)
            geometries.append(encode_geometry(name, vertices, faces, self.basis,
                                              count=cfg.surface_samples, seed=int(rng.integers(2 ** 31))))
        half_heights = [0.5 * np.ptp(g.mesh_vertices[:, 1]) for g in geometries]

        shape = np.zeros(10)
        shape[0] = rng.uniform(-1.0, 1.0)
        rest_params = BodyParams.zeros(1)
        rest_params.shape = torch.as_tensor(shape)
        rest = self._forward(rest_params)[0][0]
        pelvis_h = -rest[:, 1].min() + 0.02
        table_y = pelvis_h - 0.02

        slots = rng.permutation(np.linspace(-0.22, 0.22, n_obj))
        positions = [np.array([x, table_y + hh, rng.uniform(0.24, 0.32)]) for x, hh in zip(slots, half_heights)]

        # 逐帧参数
        t_idx = np.arange(frames)
        params = BodyParams.zeros(frames)
        params.shape = torch.as_tensor(shape)
        sway = 2 * np.pi * t_idx / (cfg.fps * 4.0)
        root = np.stack([0.02 * np.sin(sway), np.full(frames, pelvis_h), 0.01 * np.sin(0.5 * sway)], axis=-1)
        params.translation = torch.as_tensor(root)
        params.global_orient = torch.as_tensor(np.stack([np.zeros(frames), 0.05 * np.sin(0.5 * sway),
                                                         np.zeros(frames)], -1))

        base_joints, _ = self._forward(params)
        hang = {side: base_joints[:, self.SHOULDERS[side][1]] + np.array([s * 0.05, -0.47, 0.08])
                for side, s in (('left', 1.0), ('right', -1.0))}
        hand_targets = {side: hang[side].copy() for side in hang}
        bend = np.zeros(frames)
        curl = {'left': np.zeros(frames), 'right': np.zeros(frames)}

        plans, contacts = [], []
        current = [p.copy() for p in positions]
        for s in range(m):
            plan = self._plan_segment(rng, names, current, half_heights, table_y)
            plans.append(plan)
            a, b = bounds[s], bounds[s + 1]
            length = b - a
            g = a + int(round(0.35 * length))
            h = a + int(round(0.45 * length))
            r = a + int(round(0.80 * length))
            grasp_offset = np.array([0.0, half_heights[plan.obj] + 0.04, 0.0])
            start_hand = hang[plan.hand][a]
            grasp_point = current[plan.obj] + grasp_offset
            drop_point = plan.target + grasp_offset
            end_hand = hang[plan.hand][b - 1]

            side = hand_targets[plan.hand]
            for lo, hi, p0, p1 in ((a, g, start_hand, grasp_point), (g, h, grasp_point, grasp_point),
                                   (h, r, grasp_point, drop_point), (r, b, drop_point, end_hand)):
                span = np.arange(lo, hi)
                w = min_jerk((span - lo) / max(hi - lo - 1, 1))[:, None]
                side[lo:hi] = p0 + w * (p1 - p0)
            ramp = np.zeros(length)
            ramp[:g - a] = min_jerk(np.arange(g - a) / max(g - a - 1, 1))
            ramp[g - a:r - a] = 1.0
            ramp[r - a:] = 1.0 - min_jerk(np.arange(b - r) / max(b - r - 1, 1))
            bend[a:b] = np.maximum(bend[a:b], 0.25 * ramp)
            curl[plan.hand][a:b] = ramp
            contacts.append({'object': plan.obj, 'joint': self.WRISTS[plan.hand], 'start': int(g), 'end': int(r)})
            current[plan.obj] = plan.target.copy()

        body_pose = np.zeros((frames, 21, 3))
        for j in (3, 6, 9):
            body_pose[:, j - 1, 0] = bend / 3.0
        params.body_pose = torch.as_tensor(body_pose)
        spine_joints, spine_rots = self._forward(params)

        for side, (collar, shoulder, elbow) in self.SHOULDERS.items():
            sign = 1.0 if side == 'left' else -1.0
            offsets = self.body_model.bone_offsets(params.shape).numpy()
            l1 = np.linalg.norm(offsets[elbow])
            l2 = np.linalg.norm(offsets[self.WRISTS[side]])
            pole = np.tile(np.array([sign * 0.3, -1.0, -0.4]), (frames, 1))
            s_pos = spine_joints[:, shoulder]
            e_pos, w_pos = _two_bone_ik(s_pos, hand_targets[side], l1, l2, pole)
            g_collar = spine_rots[:, collar]
            rest_dir = np.array([sign, 0.0, 0.0])
            g_shoulder = _rotation_between(g_collar @ rest_dir, e_pos - s_pos) @ g_collar
            g_elbow = _rotation_between(g_shoulder @ rest_dir, w_pos - e_pos) @ g_shoulder
            local_s = np.swapaxes(g_collar, -1, -2) @ g_shoulder
            local_e = np.swapaxes(g_shoulder, -1, -2) @ g_elbow
            body_pose[:, shoulder - 1] = Rotation.from_matrix(local_s).as_rotvec()
            body_pose[:, elbow - 1] = Rotation.from_matrix(local_e).as_rotvec()

        hand_pose = np.zeros((frames, 30, 3))
        hand_pose[:, :15, 2] = -0.5 * curl['left'][:, None]
        hand_pose[:, 15:, 2] = 0.5 * curl['right'][:, None]
        params.body_pose = torch.as_tensor(body_pose)
        params.hand_pose = torch.as_tensor(hand_pose)
        joints, rots = self._forward(params)

        tracks = self._object_tracks(frames, positions, contacts, joints, rots, geometries)
        human = HumanMotion(
            positions=joints.astype(np.float32),
            rotations=matrix_to_rot6d(torch.as_tensor(rots)).numpy().astype(np.float32),
            root_translation=root.astype(np.float32),
            fps=cfg.fps,
        )
        segments = [Segment(int(bounds[i]), int(bounds[i + 1]), plans[i].text) for i in range(m)]
        seq = HoiSequence(seq_id=seq_id, human=human, objects=tracks, text=compose_text([p.text for p in plans]),
                          segments=segments, object_names=names, contacts=contacts)
        return seq.validate()

    def _pick_objects(self, rng, n_obj):
        vocab = sorted(OBJECT_VOCAB)
        while True:
            names = [vocab[i] for i in rng.choice(len(vocab), size=n_obj, replace=False)]
            if any(n not in CONTAINERS for n in names):
                return names

    def _plan_segment(self, rng, names, current, half_heights, table_y):
        movable = [i for i, n in enumerate(names) if n not in CONTAINERS]
        obj = int(rng.choice(movable))
        others = [i for i in range(len(names)) if i != obj]
        containers = [i for i in others if names[i] in CONTAINERS]
        action = str(rng.choice(['put', 'place', 'move'])) if containers else str(rng.choice(['place', 'move']))
        if action == 'put':
            dest = int(rng.choice(containers))
        elif action == 'place':
            dest = int(rng.choice(others))
            if OBJECT_VOCAB[names[dest]][0] == 'box':
                action = 'stack'
        else:
            dest = None

        if dest is None:
            x = rng.uniform(-0.25, 0.25)
            target = np.array([x, table_y + half_heights[obj], rng.uniform(0.24, 0.32)])
            side = 'left side' if x > 0 else 'right side'
        else:
            target = current[dest] + np.array([0.0, half_heights[dest] + half_heights[obj], 0.0])
            side = ''
        hand = 'left' if current[obj][0] > 0 else 'right'
        text = SEGMENT_TEMPLATES[action].format(a=names[obj], b=names[dest] if dest is not None else '',
                                                hand=hand, side=side)
        return _Plan(obj=obj, target=target, hand=hand, text=text)

    def _object_tracks(self, frames, positions, contacts, joints, rots, geometries):
        n_obj = len(positions)
        rot = np.tile(np.eye(3), (n_obj, frames, 1, 1))
        trans = np.tile(np.stack(positions)[:, None, :], (1, frames, 1))
        for c in sorted(contacts, key=lambda c: c['start']):
            k, j, g, r = c['object'], c['joint'], c['start'], c['end']
            # 抓取前保持上一个状态
            rot[k, g:] = rot[k, g - 1] if g > 0 else rot[k, 0]
            trans[k, g:] = trans[k, g - 1] if g > 0 else trans[k, 0]
            wrist_rot_g = rots[g, j]
            rel = np.swapaxes(wrist_rot_g, -1, -2)
            offset = rel @ (trans[k, g] - joints[g, j])
            local = rel @ rot[k, g]
            span = slice(g, r + 1)
            rot[k, span] = rots[span, j] @ local
            trans[k, span] = joints[span, j] + np.einsum('tij,j->ti', rots[span, j], offset)
            rot[k, r + 1:] = rot[k, r]
            trans[k, r + 1:] = trans[k, r]
        tracks = []
        for k in range(n_obj):
            geo = geometries[k]
            geo.mesh_vertices = geo.mesh_vertices.astype(np.float32)
            geo.surface_samples = geo.surface_samples.astype(np.float32)
            geo.bps_code = geo.bps_code.astype(np.float32)
            geo.center = np.asarray(geo.center, dtype=np.float32)
            tracks.append(ObjectTrack(
                rotation=matrix_to_rot6d(torch.as_tensor(rot[k])).numpy().astype(np.float32),
                translation=trans[k].astype(np.float32),
                geometry=geo,
            ))
        return tracks


def compose_text(parts):
    if len(parts) == 1:
        return parts[0] + '.'
    pieces = [f'first, {parts[0]}']
    pieces += [f'then {p}' for p in parts[1:-1]]
    pieces.append(f'finally {parts[-1]}')
    text = ', '.join(pieces) + '.'
    return text[0].upper() + text[1:]


def generate_synthetic_corpus(config, out_dir, seed=None):
    """生成语料并写盘，给定 seed 时两次运行的文件逐字节一致"""
    seed = config.seed if seed is None else seed
    min_total = config.min_segments * MIN_SEGMENT_FRAMES
    if config.min_frames > config.max_frames:
        raise ValidationError('min_frames exceeds max_frames')
    if config.min_frames < min_total:
        raise ValidationError(f'{config.min_frames} frames cannot hold {config.min_segments} segments '
                              f'of at least {MIN_SEGMENT_FRAMES} frames')
    if config.num_objects not in (2, 3):
        raise ValidationError('num_objects must be 2 or 3')
    if config.num_sequences < len(SPLITS):
        raise ValidationError('need at least one sequence per split')

    body_model = load_body_model(config.body_model)
    if body_model.num_joints != config.num_joints:
        raise ValidationError(f'body model {config.body_model} has {body_model.num_joints} joints, '
                              f'config says {config.num_joints}')
    basis = make_basis(config.bps_points, config.bps_seed)
    scripter = SceneScripter(config, body_model, basis)
    os.makedirs(out_dir, exist_ok=True)

    ids, sequences = [], []
    for i in range(config.num_sequences):
        seq_id = f'seq_{i:04d}'
        rng = np.random.default_rng([seed, i])
        seq = scripter.generate(seq_id, rng)
        write_archive(seq, os.path.join(out_dir, seq_id))
        ids.append(seq_id)
        sequences.append(seq)
        logger.debug('generated %s: %d frames, %d segments', seq_id, seq.num_frames, len(seq.segments))

    manifest = CorpusManifest(root=out_dir, ids=ids, object_vocab=sorted(OBJECT_VOCAB), fps=config.fps,
                              num_objects=config.num_objects, num_joints=config.num_joints,
                              body_model=config.body_model, config=config.to_dict())
    split_dataset(manifest, config.split_ratios, seed)
    manifest.save()

    train = [s for s in sequences if manifest.splits[s.seq_id] == 'train']
    NormStats.compute(train).save(os.path.join(out_dir, STATS_FILE))
    texts = [s.text for s in sequences] + [seg.text for s in sequences for seg in s.segments]
    Vocabulary.build(texts).save(os.path.join(out_dir, VOCAB_FILE))
    logger.info('corpus with %d sequences written to %s', len(ids), out_dir)
    return manifest


# ---------------------------------------------------------------------------
# 读取
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    seq_id: str
    text: str
    human: np.ndarray      # T x D_h (原始尺度)
    objects: np.ndarray    # T x N_o x 9
    bps: np.ndarray        # N_o x S x 3
    samples: np.ndarray    # N_o x S x 3
    names: List[str]


@dataclass
class Batch:
    ids: List[str]
    texts: List[str]
    human: torch.Tensor        # B x T x D_h，已归一化
    objects: torch.Tensor      # B x T x (N_o*9)，已归一化
    mask: torch.Tensor         # B x T
    text_tokens: torch.Tensor  # B x L
    geometry: torch.Tensor     # B x N_o x S x 3 (BPS)
    samples: torch.Tensor      # B x N_o x S x 3 (物体局部表面点)
    object_order: torch.Tensor  # B x N_o
    lengths: torch.Tensor      # B

    @property
    def num_frames(self):
        return self.human.shape[1]

    def condition(self, k, stats=None, with_objects=False):
        """
        前 k 帧作为条件；给 stats 时还原到原始尺度 (sample() 需要原始尺度)
        with_objects 时整段物体运动也作为条件
        """
        human, objects = self.human[:, :k], self.objects
        if stats is not None:
            human, objects = stats.denormalize_human(human), stats.denormalize_objects(objects)
        return ConditionPack(text_tokens=self.text_tokens, human_init=human, object_init=objects[:, :k],
                             geometry=self.geometry, num_frames=self.num_frames,
                             object_track=objects if with_objects else None)

    def raw(self, stats):
        """整段反归一化: (人体, 物体)"""
        return stats.denormalize_human(self.human), stats.denormalize_objects(self.objects)


class HoiDataset:
    """
    一个划分的全部样本放在内存里
    level='sequence' 整段序列；level='segment' 每个时间片段一个样本(含前 context 帧)
    """

    def __init__(self, manifest, split, level='sequence', max_len=None, max_text_len=None, context=10):
        ids = manifest.ids_for(split)
        if not ids:
            raise ValidationError(f'split {split!r} is empty')
        cfg = manifest.config
        self.manifest = manifest
        self.split = split
        self.level = level
        self.stats = manifest.load_stats()
        self.vocab = manifest.load_vocab()
        if level == 'sequence':
            self.max_len = max_len or cfg.get('max_motion_len', 300)
            self.max_text_len = max_text_len or cfg.get('max_text_len', 40)
        elif level == 'segment':
            self.max_len = max_len or cfg.get('max_seg_len', 100)
            self.max_text_len = max_text_len or cfg.get('max_seg_text_len', 15)
        else:
            raise ValidationError(f'unknown dataset level {level}')
        self.sequences = [read_archive(manifest.path_of(i)) for i in ids]
        self.items = []
        for seq in self.sequences:
            if level == 'sequence':
                self.items.append(self._make_sample(seq, 0, seq.num_frames, seq.text))
            else:
                for seg in seq.segments:
                    self.items.append(self._make_sample(seq, max(0, seg.start - context), seg.end, seg.text))

    def _make_sample(self, seq, start, end, text):
        human = seq.human.flatten()[start:end]
        objects = np.stack([obj.flatten()[start:end] for obj in seq.objects], axis=1)
        return Sample(seq_id=seq.seq_id, text=text, human=human, objects=objects,
                      bps=np.stack([o.geometry.bps_code for o in seq.objects]),
                      samples=np.stack([o.geometry.surface_samples for o in seq.objects]),
                      names=list(seq.object_names))

    def __len__(self):
        return len(self.items)

    def collate(self, items, rng, shuffle_objects=True):
        b, t = len(items), self.max_len
        n_obj = items[0].objects.shape[1]
        d_h = items[0].human.shape[-1]
        human = np.zeros((b, t, d_h), dtype=np.float32)
        objects = np.zeros((b, t, n_obj * OBJECT_FEATURE_DIM), dtype=np.float32)
        mask = np.zeros((b, t), dtype=np.float32)
        order = np.zeros((b, n_obj), dtype=np.int64)
        bps, samples = [], []
        for i, item in enumerate(items):
            perm = rng.permutation(n_obj) if shuffle_objects else np.arange(n_obj)
            length = min(len(item.human), t)
            h = self.stats.normalize_human(item.human[:length].astype(np.float64))
            o = item.objects[:length, perm].reshape(length, -1).astype(np.float64)
            human[i, :length] = h
            objects[i, :length] = self.stats.normalize_objects(o)
            mask[i, :length] = 1.0
            order[i] = perm
            bps.append(item.bps[perm])
            samples.append(item.samples[perm])
        tokens = self.vocab.encode_batch([it.text for it in items], self.max_text_len)
        return Batch(ids=[it.seq_id for it in items], texts=[it.text for it in items],
                     human=torch.from_numpy(human), objects=torch.from_numpy(objects),
                     mask=torch.from_numpy(mask), text_tokens=tokens,
                     geometry=torch.from_numpy(np.stack(bps).astype(np.float32)),
                     samples=torch.from_numpy(np.stack(samples).astype(np.float32)),
                     object_order=torch.from_numpy(order), lengths=torch.from_numpy(mask.sum(1).astype(np.int64)))

    def batches(self, batch_size, seed=0, epoch=0, shuffle=True, shuffle_objects=True):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(self.items)) if shuffle else np.arange(len(self.items))
        for start in range(0, len(order), batch_size):
            yield self.collate([self.items[i] for i in order[start:start + batch_size]], rng, shuffle_objects)


def load_batch(manifest, split, batch_size, seed=0, level='sequence'):
    """取一个 batch: 给定 seed 决定样本选择与物体顺序"""
    if split not in SPLITS:
        raise ValidationError(f'unknown split: {split}')
    dataset = HoiDataset(manifest, split, level=level)
    return next(dataset.batches(batch_size, seed=seed))


def human_dim_of(manifest):
    return human_feature_width(manifest.num_joints)


def initial_scene(config, names, seed=0):
    """
    没有真实数据时的首段条件: 静止站立的人 + 桌上的物体
    返回 (1 x (D_h + N_o*9) 原始尺度特征, 几何列表)
    """
    unknown = [n for n in names if n not in OBJECT_VOCAB]
    if unknown:
        raise ValidationError(f'unknown objects: {", ".join(unknown)}')
    if len(names) != config.num_objects:
        raise ValidationError(f'scene needs {config.num_objects} objects, got {len(names)}')
    body_model = load_body_model(config.body_model)
    basis = make_basis(config.bps_points, config.bps_seed)
    geometries = []
    for i, name in enumerate(names):
        vertices, faces = make_primitive(name)
        geometries.append(encode_geometry(name, vertices, faces, basis, count=config.surface_samples, seed=seed + i))

    params = BodyParams.zeros(1)
    with torch.no_grad():
        rest = body_model.forward(params)[0]
    pelvis_h = float(-rest[:, 1].min()) + 0.02
    params.translation = torch.tensor([[0.0, pelvis_h, 0.0]], dtype=torch.float64)
    with torch.no_grad():
        joints, rots = body_model.forward(params, return_rotations=True)
    human = HumanMotion(positions=joints.numpy().astype(np.float32),
                        rotations=matrix_to_rot6d(rots).numpy().astype(np.float32),
                        root_translation=params.translation.numpy().astype(np.float32), fps=config.fps)

    slots = np.linspace(-0.22, 0.22, len(names))
    objects = []
    for x, geo in zip(slots, geometries):
        half = 0.5 * np.ptp(geo.mesh_vertices[:, 1])
        track = ObjectTrack(rotation=matrix_to_rot6d(torch.eye(3)[None]).numpy().astype(np.float32),
                            translation=np.array([[x, pelvis_h - 0.02 + half, 0.28]], dtype=np.float32),
                            geometry=geo)
        objects.append(track.flatten())
    features = np.concatenate([human.flatten()] + objects, axis=-1).astype(np.float32)
    return features, geometries
