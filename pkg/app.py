# -*- coding: utf-8 -*-
"""
HTTP 任务服务
生成请求在后台线程里跑，客户端轮询 /api/status/<task_id>，完成后从 /api/download 取结果
环境变量: PORT, HOI_CKPT (默认 checkpoint), HOI_OUT_DIR (输出目录)
"""

import hashlib
import logging
import os
import shutil
import threading
import time
from datetime import datetime

import psutil
from dotenv import load_dotenv
from flask import Flask, abort, jsonify, request, send_file
from flask_cors import CORS

from archive import META_FILE, write_archive
from composer import TimelineScript, compose_timeline, load_run, sample_sequence, scene_for
from diffusion import SAMPLERS
from errors import HoiError, SegmentFailure

load_dotenv()
logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)

# 配置
app.config['HOI_CKPT'] = os.environ.get('HOI_CKPT', '')
app.config['HOI_OUT_DIR'] = os.environ.get('HOI_OUT_DIR', os.path.join(os.getcwd(), 'temp_files'))
MAX_FILE_AGE = int(os.environ.get('HOI_MAX_FILE_AGE', 7200))    # 2小时
CLEANUP_INTERVAL = int(os.environ.get('HOI_CLEANUP_INTERVAL', 3600))
MAX_FRAMES = 600

# 任务存储
tasks = {}
_runs = {}
_runs_lock = threading.Lock()


class Task:
    def __init__(self, task_id, kind, request_data):
        self.task_id = task_id
        self.kind = kind
        self.request = request_data
        self.status = 'pending'
        self.progress = 0
        self.summary = None
        self.files = {}
        self.error = None
        self.created_at = datetime.now()


def out_dir():
    path = app.config['HOI_OUT_DIR']
    os.makedirs(path, exist_ok=True)
    return path


def get_run(checkpoint):
    """同一个 checkpoint 只加载一次"""
    with _runs_lock:
        if checkpoint not in _runs:
            _runs[checkpoint] = load_run(checkpoint)
        return _runs[checkpoint]


@app.route('/')
def index():
    return '''
    <!DOCTYPE html>
    <html>
    <head><title>HOI Synthesis Service</title></head>
    <body>
        <h1>人物-多物体交互生成</h1>
        <ul>
            <li><a href="/api/health">/api/health</a> - 健康检查</li>
            <li>POST /api/sample - 单段文本生成</li>
            <li>POST /api/compose - 分段组合生成</li>
        </ul>
    </body>
    </html>
    '''


@app.route('/api/health', methods=['GET'])
def health_check():
    process = psutil.Process(os.getpid())
    return jsonify({
        'status': 'healthy',
        'timestamp': datetime.now().isoformat(),
        'active_tasks': len([t for t in tasks.values() if t.status in ('pending', 'processing')]),
        'total_tasks': len(tasks),
        'checkpoint': app.config['HOI_CKPT'] or None,
        'memory_mb': round(process.memory_info().rss / (1024 * 1024), 1),
    })


def _submit(kind, data):
    task_id = hashlib.md5(f"{kind}_{data}_{datetime.now().isoformat()}_{len(tasks)}".encode()).hexdigest()
    task = Task(task_id, kind, data)
    tasks[task_id] = task
    threading.Thread(target=perform_task, args=(task_id,), daemon=True).start()
    return jsonify({'success': True, 'task_id': task_id})


def _check_common(data):
    if not app.config['HOI_CKPT']:
        return 'no checkpoint configured (set HOI_CKPT)'
    objects = data.get('objects')
    if objects is not None and (not isinstance(objects, list) or not all(isinstance(o, str) for o in objects)):
        return 'objects must be a list of names'
    if 'seed' in data and not isinstance(data['seed'], int):
        return 'seed must be an integer'
    return None


@app.route('/api/sample', methods=['POST', 'OPTIONS'])
def start_sample():
    if request.method == 'OPTIONS':
        return jsonify({'status': 'ok'})

    data = request.get_json(silent=True)
    if not data:
        return jsonify({'error': 'Invalid JSON data'}), 400
    text = data.get('text', '')
    if not isinstance(text, str) or not text.strip():
        return jsonify({'error': 'text is required'}), 400
    frames = data.get('frames')
    if frames is not None and (not isinstance(frames, int) or not 1 < frames <= MAX_FRAMES):
        return jsonify({'error': f'frames must be an integer in (1, {MAX_FRAMES}]'}), 400
    mode = data.get('mode')
    if mode is not None and (not isinstance(mode, str) or mode not in SAMPLERS):
        return jsonify({'error': f'mode must be one of {sorted(SAMPLERS)}'}), 400
    problem = _check_common(data)
    if problem:
        return jsonify({'error': problem}), 400
    return _submit('sample', data)


@app.route('/api/compose', methods=['POST', 'OPTIONS'])
def start_compose():
    if request.method == 'OPTIONS':
        return jsonify({'status': 'ok'})

    data = request.get_json(silent=True)
    if not data:
        return jsonify({'error': 'Invalid JSON data'}), 400
    script = data.get('script')
    if not isinstance(script, list) or not script:
        return jsonify({'error': 'script must be a non-empty list of {text, length}'}), 400
    for item in script:
        if not isinstance(item, dict) or not isinstance(item.get('text'), str):
            return jsonify({'error': 'every script item needs a text'}), 400
        length = item.get('length')
        if length is not None and (not isinstance(length, int) or length > MAX_FRAMES):
            return jsonify({'error': f'segment length must be an integer <= {MAX_FRAMES}'}), 400
    problem = _check_common(data)
    if problem:
        return jsonify({'error': problem}), 400
    return _submit('compose', data)


def perform_task(task_id):
    """后台执行生成任务"""
    task = tasks[task_id]
    try:
        task.status = 'processing'
        task.progress = 10
        run = get_run(app.config['HOI_CKPT'])
        cfg = run.config
        seed = task.request.get('seed', cfg.seed)
        task.progress = 30
        directory = os.path.join(out_dir(), task_id, task.kind)
        meta = {'run_config': cfg.to_dict(), 'fingerprint': cfg.fingerprint(), 'seed': seed}

        if task.kind == 'sample':
            frames = task.request.get('frames') or cfg.segment_length
            init, geometries = scene_for(cfg, task.request.get('objects'), frames=cfg.cond_frames, seed=seed)
            seq = sample_sequence(run, task.request['text'], frames, init, geometries, seed=seed,
                                  guidance_scale=task.request.get('guidance'), seq_id=task_id,
                                  mode=task.request.get('mode'))
            task.summary = {'frames': seq.num_frames, 'objects': seq.object_names,
                            'mode': task.request.get('mode') or cfg.generation}
        else:
            k = task.request.get('k', cfg.overlap_frames)
            script = TimelineScript(prompts=[item['text'] for item in task.request['script']],
                                    lengths=[item.get('length', cfg.segment_length) for item in task.request['script']],
                                    k=k).validate()
            init, geometries = scene_for(cfg, task.request.get('objects'), frames=1, seed=seed)
            generator = run.generator(geometries, task.request.get('guidance'), cfg.max_seg_text_len)
            try:
                timeline = compose_timeline(generator, script, init, seed=seed)
            except SegmentFailure as e:
                if e.partial is None:
                    raise
                # 已完成的片段照样给出
                timeline = e.partial
                task.error = e.to_dict()
            seq = timeline.to_sequence(task_id, cfg.num_joints, geometries, cfg.fps)
            meta.update({'k': script.k, 'boundaries': timeline.boundaries,
                         'transition_jerk': timeline.transition_jerk})
            task.summary = {'frames': timeline.num_frames, 'segments': len(timeline.prompts),
                            'transition_jerk': timeline.transition_jerk}

        task.progress = 80
        write_archive(seq, directory, meta)
        register_files(task, directory)
        task.status = 'completed' if task.error is None else 'partial'
        task.progress = 100
        logger.info('task %s (%s) finished: %s', task_id, task.kind, task.summary)

    except HoiError as e:
        task.status = 'error'
        task.error = e.to_dict()
        logger.warning('task %s failed: %s', task_id, e)
    except Exception as e:
        task.status = 'error'
        task.error = {'code': 'internal', 'message': str(e)}
        logger.exception('task %s crashed', task_id)


def register_files(task, directory):
    zip_path = shutil.make_archive(directory, 'zip', root_dir=directory)
    for name, path in (('archive', zip_path), ('meta', os.path.join(directory, META_FILE))):
        task.files[name] = {
            'path': path,
            'filename': f'{task.task_id}_{os.path.basename(path)}',
            'size': os.path.getsize(path),
            'download_url': f'/api/download/{task.task_id}/{name}',
        }


@app.route('/api/status/<task_id>', methods=['GET'])
def get_task_status(task_id):
    if task_id not in tasks:
        return jsonify({'error': 'Task not found'}), 404

    task = tasks[task_id]
    response = {
        'task_id': task_id,
        'kind': task.kind,
        'status': task.status,
        'progress': task.progress,
        'summary': task.summary,
        'error': task.error,
    }
    if task.status in ('completed', 'partial') and task.files:
        response['files'] = {
            name: {'filename': info['filename'], 'size': info['size'], 'download_url': info['download_url']}
            for name, info in task.files.items()
        }
    return jsonify(response)


@app.route('/api/download/<task_id>/<name>', methods=['GET', 'OPTIONS'])
def download_file(task_id, name):
    if request.method == 'OPTIONS':
        return jsonify({'status': 'ok'})

    task = tasks.get(task_id)
    if task is None or name not in task.files:
        abort(404)
    info = task.files[name]
    if not os.path.exists(info['path']):
        logger.warning('file for task %s is gone: %s', task_id, info['path'])
        abort(404)
    mimetype = 'application/zip' if name == 'archive' else 'application/json'
    return send_file(info['path'], as_attachment=True, download_name=info['filename'], mimetype=mimetype)


# 清理旧文件
def cleanup_old_files(max_age=None):
    max_age = MAX_FILE_AGE if max_age is None else max_age
    removed = 0
    try:
        current_time = time.time()
        root = out_dir()
        for entry in os.listdir(root):
            path = os.path.join(root, entry)
            if current_time - os.path.getmtime(path) <= max_age:
                continue
            if os.path.isdir(path):
                shutil.rmtree(path, ignore_errors=True)
            else:
                os.remove(path)
            tasks.pop(entry, None)
            removed += 1
    except OSError as e:
        logger.warning('cleanup error: %s', e)
    return removed


def start_cleanup():
    def cleanup_loop():
        while True:
            time.sleep(CLEANUP_INTERVAL)
            cleanup_old_files()

    threading.Thread(target=cleanup_loop, daemon=True).start()


start_cleanup()


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)
    port = int(os.environ.get('PORT', 5000))
    print(f"HOI service on port {port}, checkpoint: {app.config['HOI_CKPT'] or '(none)'}")
    app.run(host='0.0.0.0', port=port, debug=False)
