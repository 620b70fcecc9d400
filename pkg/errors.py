# -*- coding: utf-8 -*-
"""
统一的异常定义
每个异常带一个稳定的 code，CLI 和 HTTP 服务都用它输出结构化错误
"""


class HoiError(Exception):
    code = 'error'

    def __init__(self, message, code=None, **details):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    def to_dict(self):
        payload = {'code': self.code, 'message': str(self)}
        if self.details:
            payload['details'] = self.details
        return payload


class ConfigError(HoiError):
    code = 'config'


class ValidationError(HoiError):
    code = 'validation'


class DegenerateRotationError(ValidationError):
    code = 'degenerate_rotation'


class DegenerateGeometryError(ValidationError):
    code = 'degenerate_geometry'


class ArchiveError(HoiError):
    """tensors.bin / meta.json 读写错误，code 区分具体原因"""
    code = 'format'


class SchemaMismatchError(HoiError):
    code = 'schema_mismatch'


class FitError(HoiError):
    code = 'fit'


class SamplingError(HoiError):
    code = 'sampling'


class SegmentFailure(HoiError):
    """组合生成中途失败，partial 保存已经完成的片段"""
    code = 'segment_failure'

    def __init__(self, message, partial=None, segment_index=None):
        super().__init__(message, segment_index=segment_index)
        self.partial = partial


class TrainingDivergedError(HoiError):
    code = 'diverged'

    def __init__(self, message, last_checkpoint=None, **details):
        super().__init__(message, last_checkpoint=last_checkpoint, **details)
        self.last_checkpoint = last_checkpoint
