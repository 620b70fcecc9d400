# -*- coding: utf-8 -*-
"""HTTP 服务：参数校验、任务轮询、下载与清理"""

import os
import time

import pytest

import app as service


@pytest.fixture
def client(trained, tmp_path, monkeypatch):
    monkeypatch.setitem(service.app.config, 'HOI_CKPT', trained.last_checkpoint)
    monkeypatch.setitem(service.app.config, 'HOI_OUT_DIR', str(tmp_path / 'out'))
    service.app.config['TESTING'] = True
    with service.app.test_client() as c:
        yield c


def _wait(client, task_id, timeout=300):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f'/api/status/{task_id}').get_json()
        if body['status'] not in ('pending', 'processing'):
            return body
        time.sleep(0.2)
    raise AssertionError(f'task {task_id} did not finish')


def test_index_and_health(client):
    assert client.get('/').status_code == 200
    body = client.get('/api/health').get_json()
    assert body['status'] == 'healthy'
    assert body['checkpoint'].endswith('last')
    assert body['memory_mb'] > 0


@pytest.mark.parametrize('payload, message', [
    ({'frames': 10}, 'text is required'),
    ({'text': '   '}, 'text is required'),
    ({'text': 'pick up the apple', 'frames': 100000}, 'frames must be'),
    ({'text': 'pick up the apple', 'frames': 'ten'}, 'frames must be'),
    ({'text': 'pick up the apple', 'objects': 'apple'}, 'objects must be'),
    ({'text': 'pick up the apple', 'seed': 1.5}, 'seed must be'),
    ({'text': 'pick up the apple', 'mode': 'staged'}, 'mode must be'),
])
def test_sample_validation(client, payload, message):
    response = client.post('/api/sample', json=payload)
    assert response.status_code == 400
    assert message in response.get_json()['error']


def test_compose_validation(client):
    assert client.post('/api/compose', json={'script': []}).status_code == 400
    assert client.post('/api/compose', json={'script': [{'length': 10}]}).status_code == 400
    assert client.post('/api/compose', json={'script': [{'text': 'a', 'length': 10000}]}).status_code == 400
    assert client.post('/api/compose', data='not json', content_type='application/json').status_code == 400


def test_missing_checkpoint(client, monkeypatch):
    monkeypatch.setitem(service.app.config, 'HOI_CKPT', '')
    response = client.post('/api/sample', json={'text': 'pick up the apple'})
    assert response.status_code == 400
    assert 'HOI_CKPT' in response.get_json()['error']


def test_options_preflight(client):
    assert client.options('/api/sample').status_code == 200
    assert client.options('/api/compose').status_code == 200


def test_sample_task_round_trip(client):
    response = client.post('/api/sample', json={'text': 'pick up the apple', 'frames': 12, 'seed': 4,
                                                'objects': ['apple', 'bowl']})
    assert response.status_code == 200
    task_id = response.get_json()['task_id']
    body = _wait(client, task_id)
    assert body['status'] == 'completed', body['error']
    assert body['summary']['frames'] == 12
    assert body['summary']['objects'] == ['apple', 'bowl']
    assert body['summary']['mode'] == 'joint'

    download = client.get(body['files']['archive']['download_url'])
    assert download.status_code == 200
    assert download.data[:2] == b'PK'
    meta = client.get(body['files']['meta']['download_url'])
    assert meta.get_json()['seed'] == 4


def test_sample_task_consecutive_mode(client):
    response = client.post('/api/sample', json={'text': 'pick up the apple', 'frames': 12, 'mode': 'consecutive'})
    assert response.status_code == 200
    body = _wait(client, response.get_json()['task_id'])
    assert body['status'] == 'completed', body['error']
    assert body['summary']['mode'] == 'consecutive'


def test_compose_task(client):
    script = [{'text': 'pick up the apple', 'length': 10}, {'text': 'put the apple down', 'length': 10}]
    task_id = client.post('/api/compose', json={'script': script, 'k': 2}).get_json()['task_id']
    body = _wait(client, task_id)
    assert body['status'] == 'completed', body['error']
    assert body['summary']['frames'] == 18
    assert len(body['summary']['transition_jerk']) == 1


def test_failed_task_reports_structured_error(client):
    task_id = client.post('/api/sample', json={'text': 'pick up the apple', 'frames': 12,
                                               'objects': ['apple', 'spaceship']}).get_json()['task_id']
    body = _wait(client, task_id)
    assert body['status'] == 'error'
    assert body['error']['code'] == 'validation'


def test_unknown_task(client):
    assert client.get('/api/status/nope').status_code == 404
    assert client.get('/api/download/nope/archive').status_code == 404


def test_cleanup_old_files(client, tmp_path):
    root = service.out_dir()
    stale = os.path.join(root, 'stale-task')
    os.makedirs(stale)
    old = time.time() - 10000
    os.utime(stale, (old, old))
    fresh = os.path.join(root, 'fresh-task')
    os.makedirs(fresh)
    assert service.cleanup_old_files(max_age=3600) == 1
    assert not os.path.exists(stale)
    assert os.path.exists(fresh)


if __name__ == '__main__':
    pytest.main([__file__])
