# -*- coding: utf-8 -*-
"""
磁盘格式
一个序列 / 一个 checkpoint 对应一个目录:
  meta.json   UTF-8 JSON
  tensors.bin "HIMO" + 版本字节 0x01，小端；u32 张量个数；
              每个张量: u16 名字长度, UTF-8 名字, u8 dtype(0=float32, 1=int64),
              u8 ndim, ndim 个 u32 维度, 行优先原始数据
"""

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from config import SCHEMA_VERSION
from errors import ArchiveError, SchemaMismatchError
from motion_repr import (HoiSequence, HumanMotion, ObjectGeometry, ObjectTrack, Segment,
                         check_segment_tiling)

MAGIC = b'HIMO'
FORMAT_VERSION = 1
META_FILE = 'meta.json'
TENSOR_FILE = 'tensors.bin'

_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<i8')}
_DTYPE_CODES = {np.dtype('<f4'): 0, np.dtype('<i8'): 1}


def _dtype_code(name, array):
    """只存 float32 / int64；窄整数可以无损放宽，其余一律报错"""
    if array.dtype.kind == 'f' and array.dtype.itemsize == 4:
        return 0, array.astype('<f4', copy=False)
    if array.dtype.kind in 'iub' and np.can_cast(array.dtype, np.int64, casting='safe'):
        return 1, array.astype('<i8', copy=False)
    raise ArchiveError(f'{name}: dtype {array.dtype} cannot be stored as float32 / int64 without loss',
                       code='dtype_mismatch')


def encode_tensors(tensors):
    chunks = [MAGIC, bytes([FORMAT_VERSION]), struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(value)
        code, array = _dtype_code(name, array)
        raw_name = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack('<BB', code, array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.tobytes(order='C'))
    return b''.join(chunks)


def decode_tensors(blob):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise ArchiveError('bad magic', code='bad_magic')
    if len(blob) < 9:
        raise ArchiveError('truncated header', code='truncated')
    if blob[4] != FORMAT_VERSION:
        raise ArchiveError(f'version {blob[4]} != {FORMAT_VERSION}', code='version_mismatch')
    (count,) = struct.unpack_from('<I', blob, 5)
    offset = 9
    tensors = OrderedDict()

    def take(size):
        nonlocal offset
        if offset + size > len(blob):
            raise ArchiveError('truncated blob', code='truncated')
        start = offset
        offset += size
        return blob[start:offset]

    for _ in range(count):
        (name_len,) = struct.unpack('<H', take(2))
        try:
            name = take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise ArchiveError(f'tensor name is not UTF-8: {e}', code='format') from e
        code, ndim = struct.unpack('<BB', take(2))
        if code not in _DTYPES:
            raise ArchiveError(f'unknown dtype code {code} for {name}', code='dtype_mismatch')
        dims = struct.unpack(f'<{ndim}I', take(4 * ndim))
        dtype = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(size), dtype=dtype).reshape(dims).copy()
        tensors[name] = data
    if offset != len(blob):
        raise ArchiveError(f'{len(blob) - offset} trailing bytes after {count} tensors', code='format')
    return tensors


def write_tensors(path, tensors):
    with open(path, 'wb') as f:
        f.write(encode_tensors(tensors))


def read_tensors(path):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise ArchiveError(f'cannot read {path}: {e}', code='missing') from e
    return decode_tensors(blob)


def write_meta(directory, meta):
    meta = dict(meta)
    meta.setdefault('schema_version', SCHEMA_VERSION)
    with open(os.path.join(directory, META_FILE), 'w', encoding='utf-8') as f:
        json.dump(meta, f, ensure_ascii=False, indent=2, sort_keys=True)


def read_meta(directory):
    path = os.path.join(directory, META_FILE)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except OSError as e:
        raise ArchiveError(f'cannot read {path}: {e}', code='missing') from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ArchiveError(f'bad JSON in {path}: {e}', code='format') from e
    version = meta.get('schema_version')
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(f'{path}: schema_version {version} != {SCHEMA_VERSION}')
    return meta


# ---------------------------------------------------------------------------
# HOI 序列
# ---------------------------------------------------------------------------

def _f32(value):
    return np.asarray(value, dtype=np.float32)


def sequence_tensors(seq):
    """序列的存储精度固定为 float32，在这里显式转换"""
    tensors = OrderedDict()
    tensors['human.positions'] = _f32(seq.human.positions)
    tensors['human.rotations'] = _f32(seq.human.rotations)
    tensors['human.root'] = _f32(seq.human.root_translation)
    for k, obj in enumerate(seq.objects):
        geo = obj.geometry
        tensors[f'obj{k}.rotation'] = _f32(obj.rotation)
        tensors[f'obj{k}.translation'] = _f32(obj.translation)
        tensors[f'obj{k}.bps'] = _f32(geo.bps_code)
        tensors[f'obj{k}.samples'] = _f32(geo.surface_samples)
        tensors[f'obj{k}.vertices'] = _f32(geo.mesh_vertices)
        tensors[f'obj{k}.faces'] = np.asarray(geo.mesh_faces, dtype=np.int64)
        tensors[f'obj{k}.center'] = _f32(geo.center)
        tensors[f'obj{k}.scale'] = _f32([geo.scale])
    return tensors


def write_archive(seq, directory, extra_meta=None):
    """单写者约定：同一目录不要并发写"""
    os.makedirs(directory, exist_ok=True)
    meta = {
        'id': seq.seq_id,
        'fps': seq.fps,
        'text': seq.text,
        'segments': [{'start': int(s.start), 'end': int(s.end), 'text': s.text} for s in seq.segments],
        'objects': list(seq.object_names or [obj.geometry.name for obj in seq.objects]),
        'schema_version': SCHEMA_VERSION,
    }
    if seq.contacts:
        meta['contacts'] = list(seq.contacts)
    if extra_meta:
        meta.update(extra_meta)
    write_tensors(os.path.join(directory, TENSOR_FILE), sequence_tensors(seq))
    write_meta(directory, meta)
    return directory


def _require(tensors, name):
    if name not in tensors:
        raise ArchiveError(f'missing tensor {name}', code='format')
    return tensors[name]


def _require_float(tensors, name, shape=None):
    value = _require(tensors, name)
    if value.dtype != np.float32:
        raise ArchiveError(f'{name} must be float32', code='dtype_mismatch')
    if shape is not None and value.shape != tuple(shape):
        raise ArchiveError(f'{name} has shape {value.shape}, expected {tuple(shape)}', code='shape_mismatch')
    return value


def read_archive(directory):
    meta = read_meta(directory)
    tensors = read_tensors(os.path.join(directory, TENSOR_FILE))

    positions = _require_float(tensors, 'human.positions')
    if positions.ndim != 3 or positions.shape[-1] != 3:
        raise ArchiveError('human.positions must be T x J x 3', code='shape_mismatch')
    t, j = positions.shape[:2]
    human = HumanMotion(
        positions=positions,
        rotations=_require_float(tensors, 'human.rotations', (t, j, 6)),
        root_translation=_require_float(tensors, 'human.root', (t, 3)),
        fps=int(meta['fps']),
    )

    names = meta.get('objects', [])
    objects = []
    for k, name in enumerate(names):
        samples = _require_float(tensors, f'obj{k}.samples')
        if samples.ndim != 2 or samples.shape[1] != 3:
            raise ArchiveError(f'obj{k}.samples must be S x 3', code='shape_mismatch')
        faces = tensors.get(f'obj{k}.faces', np.zeros((0, 3), dtype=np.int64))
        if faces.dtype != np.int64:
            raise ArchiveError(f'obj{k}.faces must be int64', code='dtype_mismatch')
        geometry = ObjectGeometry(
            name=name,
            mesh_vertices=tensors.get(f'obj{k}.vertices', np.zeros((0, 3), dtype=np.float32)),
            mesh_faces=faces,
            surface_samples=samples,
            bps_code=_require_float(tensors, f'obj{k}.bps'),
            center=tensors.get(f'obj{k}.center', np.zeros(3, dtype=np.float32)),
            scale=float(tensors.get(f'obj{k}.scale', np.ones(1, dtype=np.float32))[0]),
        )
        objects.append(ObjectTrack(
            rotation=_require_float(tensors, f'obj{k}.rotation', (t, 6)),
            translation=_require_float(tensors, f'obj{k}.translation', (t, 3)),
            geometry=geometry,
        ))

    segments = [Segment(int(s['start']), int(s['end']), s['text']) for s in meta['segments']]
    check_segment_tiling(segments, t)
    return HoiSequence(seq_id=meta['id'], human=human, objects=objects, text=meta['text'],
                       segments=segments, object_names=list(names), contacts=meta.get('contacts', []))


# ---------------------------------------------------------------------------
# checkpoint: 同样的目录格式，meta.json 里放配置
# ---------------------------------------------------------------------------

def save_checkpoint(directory, tensors, meta):
    os.makedirs(directory, exist_ok=True)
    write_tensors(os.path.join(directory, TENSOR_FILE), tensors)
    write_meta(directory, meta)
    return directory


def load_checkpoint(directory, kind=None):
    meta = read_meta(directory)
    if kind is not None and meta.get('kind') != kind:
        raise SchemaMismatchError(f'{directory} holds a {meta.get("kind")!r} checkpoint, expected {kind!r}')
    return read_tensors(os.path.join(directory, TENSOR_FILE)), meta
