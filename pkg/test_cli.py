# -*- coding: utf-8 -*-
"""命令行：每个子命令走一遍，检查 JSON 摘要与退出码"""

import json
import os

import numpy as np
import pytest

from archive import read_archive, read_meta, read_tensors, write_tensors
from body_model import BodyParams, load_body_model
from cli import main
from conftest import TINY

# 测试划分要装得下检索池
WORKSPACE = dict(TINY, num_sequences=14)


def _run(capsys, argv):
    code = main(argv)
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return code, json.loads(lines[-1])


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    config = root / 'tiny.json'
    config.write_text(json.dumps(WORKSPACE), encoding='utf-8')
    return root


def _common(workspace):
    return ['--profile', 'desk', '--config', str(workspace / 'tiny.json'), '--log-level', 'WARNING']


def test_gen_data_and_train(capsys, workspace):
    data = str(workspace / 'data')
    code, out = _run(capsys, ['gen-data', '--out', data] + _common(workspace))
    assert code == 0 and out['ok'] is True
    assert out['sequences'] == WORKSPACE['num_sequences']
    assert out['splits'] == {'train': 11, 'val': 1, 'test': 2}

    code, out = _run(capsys, ['train', '--data', data, '--out', str(workspace / 'run'), '--epochs', '1',
                              '--steps', '2'] + _common(workspace))
    assert code == 0
    assert out['command'] == 'train'
    assert os.path.isdir(out['last'])


def test_sample(capsys, workspace):
    out_dir = str(workspace / 'sample')
    code, out = _run(capsys, ['sample', '--ckpt', str(workspace / 'run' / 'last'), '--text', 'pick up the apple',
                              '--frames', '12', '--data', str(workspace / 'data'), '--out', out_dir,
                              '--seed', '3', '--log-level', 'WARNING'])
    assert code == 0
    assert out['frames'] == 12
    seq = read_archive(out_dir)
    assert seq.num_frames == 12
    assert seq.text == 'pick up the apple'

    again = str(workspace / 'sample_again')
    _run(capsys, ['sample', '--ckpt', str(workspace / 'run' / 'last'), '--text', 'pick up the apple',
                  '--frames', '12', '--data', str(workspace / 'data'), '--out', again, '--seed', '3'])
    with open(os.path.join(out_dir, 'tensors.bin'), 'rb') as a, open(os.path.join(again, 'tensors.bin'), 'rb') as b:
        assert a.read() == b.read()


def test_sample_consecutive_mode(capsys, workspace):
    out_dir = str(workspace / 'sample_consecutive')
    code, out = _run(capsys, ['sample', '--ckpt', str(workspace / 'run' / 'last'), '--text', 'pick up the apple',
                              '--frames', '12', '--data', str(workspace / 'data'), '--out', out_dir,
                              '--mode', 'consecutive'])
    assert code == 0
    assert out['mode'] == 'consecutive'
    seq = read_archive(out_dir)
    assert seq.num_frames == 12
    assert read_meta(out_dir)['generation'] == 'consecutive'


def test_sample_without_corpus(capsys, workspace):
    out_dir = str(workspace / 'sample_scene')
    code, out = _run(capsys, ['sample', '--ckpt', str(workspace / 'run' / 'last'), '--text', 'lift the mug',
                              '--frames', '10', '--objects', 'mug,plate', '--out', out_dir])
    assert code == 0
    assert out['objects'] == ['mug', 'plate']


def test_compose(capsys, workspace):
    script = workspace / 'script.json'
    script.write_text(json.dumps([{'text': 'pick up the apple', 'length': 12},
                                  {'text': 'put the apple on the plate', 'length': 12}]), encoding='utf-8')
    out_dir = str(workspace / 'timeline')
    code, out = _run(capsys, ['compose', '--ckpt', str(workspace / 'run' / 'last'), '--script', str(script),
                              '--k', '3', '--data', str(workspace / 'data'), '--out', out_dir])
    assert code == 0
    assert out['frames'] == 21
    assert out['segments'] == 2 and out['k'] == 3
    assert len(out['transition_jerk']) == 1
    assert len(read_archive(out_dir).segments) == 2


def test_eval(capsys, workspace):
    report = str(workspace / 'eval' / 'report.json')
    code, out = _run(capsys, ['eval', '--data', str(workspace / 'data'), '--split', 'train', '--reps', '1',
                              '--out', report] + _common(workspace))
    assert code == 0
    assert out['metrics']['fid'] == pytest.approx(0.0, abs=1e-5)
    assert os.path.isdir(workspace / 'eval' / 'extractors')
    with open(report, 'r', encoding='utf-8') as f:
        assert 'r_precision_top1' in json.load(f)

    code, out = _run(capsys, ['eval', '--data', str(workspace / 'data'), '--ckpt', str(workspace / 'run' / 'last'),
                              '--extractors', str(workspace / 'eval' / 'extractors'), '--split', 'train',
                              '--reps', '1', '--out', str(workspace / 'eval' / 'model.json')])
    assert code == 0
    assert np.isfinite(out['metrics']['fid'])


def test_eval_on_test_split(capsys, workspace):
    report = str(workspace / 'eval' / 'test_split.json')
    code, out = _run(capsys, ['eval', '--data', str(workspace / 'data'), '--ckpt', str(workspace / 'run' / 'last'),
                              '--extractors', str(workspace / 'eval' / 'extractors'), '--reps', '1',
                              '--out', report, '--log-level', 'WARNING'])
    assert code == 0 and out['ok'] is True
    assert out['split'] == 'test'
    assert np.isfinite(out['metrics']['fid'])
    with open(report, 'r', encoding='utf-8') as f:
        assert 'multimodality' in json.load(f)


def test_fit(capsys, tmp_path):
    body_model = load_body_model('toy')
    joints = body_model.forward(BodyParams.zeros(2)).detach().numpy()
    capture = str(tmp_path / 'capture.bin')
    write_tensors(capture, {'markers.positions': joints.astype(np.float32),
                            'markers.assignment': np.full(body_model.num_joints, -1, dtype=np.int64)})
    out_file = str(tmp_path / 'fit.bin')
    code, out = _run(capsys, ['fit', '--markers', capture, '--model', 'toy', '--out', out_file,
                              '--profile', 'desk', '--set', 'fit_max_iters=20'])
    assert code == 0
    assert out['frames'] == 2
    assert 'params.translation' in read_tensors(out_file)


def test_errors_exit_with_code_two(capsys, tmp_path):
    code, out = _run(capsys, ['gen-data', '--out', str(tmp_path / 'x'), '--set', 'no_such_key=1'])
    assert code == 2
    assert out['error']['code'] == 'config'

    code, out = _run(capsys, ['sample', '--ckpt', str(tmp_path / 'missing'), '--text', 'hi',
                              '--out', str(tmp_path / 'o')])
    assert code == 2
    assert out['ok'] is False


if __name__ == '__main__':
    pytest.main([__file__])
