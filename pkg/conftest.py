# -*- coding: utf-8 -*-
"""测试共用的小规模配置与语料"""

import pytest

from config import load_config
from corpus import generate_synthetic_corpus
from trainer import train

TINY = {
    'num_sequences': 6,
    'min_frames': 45,
    'max_frames': 60,
    'max_motion_len': 60,
    'max_seg_len': 40,
    'surface_samples': 64,
    'bps_points': 64,
    'diffusion_steps': 8,
    'layers': 1,
    'heads': 2,
    'width': 32,
    'geometry_width': 16,
    'text_width': 32,
    'batch_size': 4,
    'epochs': 2,
    'save_every': 1,
    'pen_samples': 16,
    'dis_samples': 16,
    'sdf_resolution': 8,
    'pen_frame_stride': 8,
    'feature_width': 16,
    'extractor_epochs': 2,
    'pool_size': 2,
    'top_k': 2,
    'repetitions': 2,
    'diversity_subset': 2,
    'mm_samples': 2,
    'mm_texts': 2,
    'segment_length': 30,
    'overlap_frames': 5,
    'k_max': 5,
}


@pytest.fixture(scope='session')
def tiny_config():
    return load_config(profile='desk', overrides=TINY, env={})


@pytest.fixture(scope='session')
def corpus(tiny_config, tmp_path_factory):
    root = str(tmp_path_factory.mktemp('corpus'))
    return generate_synthetic_corpus(tiny_config, root)


@pytest.fixture(scope='session')
def trained(tiny_config, corpus, tmp_path_factory):
    """只训练两步，供加载与采样的测试使用"""
    out = str(tmp_path_factory.mktemp('run'))
    return train(tiny_config.replace(epochs=1, max_steps=2), corpus, out)
