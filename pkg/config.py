# -*- coding: utf-8 -*-
"""
运行配置
默认值对应完整规模的训练设置，desk profile 用于桌面机几分钟内跑通全流程。
覆盖顺序: 默认值 → profile → 配置文件(JSON) → 环境变量 HOI_* → 命令行 --set
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields

from dotenv import load_dotenv

from errors import ConfigError

SCHEMA_VERSION = 1
ENV_PREFIX = 'HOI_'


@dataclass(frozen=True)
class RunConfig:
    # 数据
    num_sequences: int = 256
    num_objects: int = 2
    min_frames: int = 120
    max_frames: int = 300
    min_segments: int = 2
    max_segments: int = 4
    fps: int = 30
    max_motion_len: int = 300
    max_seg_len: int = 100
    max_text_len: int = 40
    max_seg_text_len: int = 15
    split_ratios: tuple = (0.8, 0.15, 0.05)
    surface_samples: int = 1024
    bps_points: int = 1024
    bps_seed: int = 20240
    body_model: str = 'toy52'
    num_joints: int = 52

    # 扩散
    diffusion_steps: int = 1000
    schedule: str = 'cosine'
    guidance_scale: float = 2.5
    cond_dropout: float = 0.1
    generation: str = 'joint'          # joint | consecutive (先物体后人体)
    object_track_prob: float = 0.5

    # 去噪网络
    layers: int = 8
    heads: int = 4
    width: int = 512
    ff_mult: int = 4
    dropout: float = 0.1
    geometry_width: int = 256
    text_width: int = 512
    interaction: str = 'mutual'
    text_encoder: str = 'token'
    text_embedding_file: str = ''

    # 损失
    lambda_vel: float = 1.0
    lambda_pos: float = 1.0
    lambda_pen: float = 1.0
    lambda_dis: float = 0.1
    lambda_rec: float = 1.0
    sdf_resolution: int = 32
    sdf_padding: float = 0.1
    pen_frame_stride: int = 4
    pen_samples: int = 256
    dis_samples: int = 128

    # 训练
    lr: float = 1e-4
    lr_decay: float = 0.99
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 100
    save_every: int = 10
    max_steps: int = 0
    overfit: bool = False
    train_mode: str = 'gen'
    cond_frames: int = 1
    k_max: int = 20
    seed: int = 7

    # 人体拟合
    fit_alpha: float = 1.0
    fit_lambda: float = 0.1
    fit_gamma: float = 0.01
    fit_lr: float = 0.05
    fit_max_iters: int = 500
    fit_tol: float = 1e-7
    fit_patience: int = 10
    subject_height: float = 1.7
    subject_weight: float = 70.0

    # 评估
    feature_width: int = 256
    eval_temperature: float = 0.07
    extractor_epochs: int = 60
    extractor_lr: float = 1e-3
    pool_size: int = 32
    top_k: int = 3
    repetitions: int = 20
    diversity_subset: int = 50
    mm_samples: int = 10
    mm_texts: int = 10

    # 组合生成
    overlap_frames: int = 10
    segment_length: int = 100

    def replace(self, **changes):
        unknown = set(changes) - set(field_names())
        if unknown:
            raise ConfigError(f'unknown config keys: {sorted(unknown)}')
        coerced = {k: coerce_value(k, v) for k, v in changes.items()}
        return validate(dataclasses.replace(self, **coerced))

    def to_dict(self):
        data = dataclasses.asdict(self)
        data['split_ratios'] = list(self.split_ratios)
        return data

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')
        return hashlib.sha1(blob).hexdigest()[:12]


PROFILES = {
    'fidelity': {},
    'desk': {
        'num_sequences': 64,
        'min_frames': 60,
        'max_frames': 90,
        'max_motion_len': 90,
        'max_seg_len': 40,
        'body_model': 'toy',
        'num_joints': 24,
        'diffusion_steps': 50,
        'layers': 2,
        'width': 128,
        'geometry_width': 64,
        'text_width': 128,
        'batch_size': 16,
        'epochs': 20,
        'save_every': 5,
        'pen_samples': 64,
        'dis_samples': 64,
        'feature_width': 64,
        'extractor_epochs': 40,
        'pool_size': 8,
        'repetitions': 5,
        'diversity_subset': 4,
        'mm_samples': 3,
        'mm_texts': 3,
        'segment_length': 40,
        'overlap_frames': 10,
    },
}


def field_names():
    return [f.name for f in fields(RunConfig)]


def _field_type(name):
    for f in fields(RunConfig):
        if f.name == name:
            return type(f.default)
    raise ConfigError(f'unknown config key: {name}')


def coerce_value(name, value):
    """把字符串/JSON 值转换成字段声明的类型"""
    kind = _field_type(name)
    try:
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(' ', '').split(',') if v]
            return tuple(float(v) for v in value)
        if kind is bool:
            if isinstance(value, str):
                return value.strip().lower() in ('1', 'true', 'yes', 'on')
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'bad value for {name}: {value!r}') from e


def validate(config):
    if config.width % config.heads:
        raise ConfigError('width must be divisible by heads')
    if config.layers < 1:
        raise ConfigError('layers must be >= 1')
    if config.num_objects not in (2, 3):
        raise ConfigError('num_objects must be 2 or 3')
    if abs(sum(config.split_ratios) - 1.0) > 1e-9 or len(config.split_ratios) != 3:
        raise ConfigError('split_ratios must be three values summing to 1')
    if config.interaction not in ('mutual', 'none'):
        raise ConfigError(f'unknown interaction mode: {config.interaction}')
    if config.train_mode not in ('gen', 'seg'):
        raise ConfigError(f'unknown train_mode: {config.train_mode}')
    if config.generation not in ('joint', 'consecutive'):
        raise ConfigError(f'unknown generation mode: {config.generation}')
    if not 0.0 <= config.object_track_prob <= 1.0:
        raise ConfigError('object_track_prob must be in [0, 1]')
    for name in ('lambda_vel', 'lambda_pos', 'lambda_pen', 'lambda_dis', 'lambda_rec'):
        if getattr(config, name) < 0:
            raise ConfigError(f'{name} must be non-negative')
    return config


def from_dict(data):
    """严格解析：未知 key 直接报错"""
    return RunConfig().replace(**data)


def load_config(profile=None, path=None, overrides=None, env=None):
    load_dotenv()
    env = os.environ if env is None else env

    config = RunConfig()
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f'unknown profile: {profile}')
        config = config.replace(**PROFILES[profile])

    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read config file {path}: {e}') from e
        if not isinstance(data, dict):
            raise ConfigError('config file must hold a flat JSON object')
        config = config.replace(**data)

    from_env = {}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in field_names():
            from_env[name] = value
    if from_env:
        config = config.replace(**from_env)

    if overrides:
        config = config.replace(**overrides)
    return config


def parse_overrides(pairs):
    """--set key=value 列表 → dict"""
    result = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f'expected key=value, got {pair!r}')
        key, value = pair.split('=', 1)
        result[key.strip()] = value.strip()
    return result
