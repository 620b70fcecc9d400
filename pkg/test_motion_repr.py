# -*- coding: utf-8 -*-
"""旋转、BPS 与序列结构的测试"""

import numpy as np
import pytest
import torch

from errors import DegenerateGeometryError, DegenerateRotationError, ValidationError
from motion_repr import (HoiSequence, HumanMotion, ObjectTrack, Segment, axis_angle_to_matrix, bps_encode,
                         canonicalize_axis_angle, check_segment_tiling, encode_geometry, human_feature_width,
                         make_basis, matrix_to_rot6d, random_rotations, rot6d_to_matrix, sample_surface_points)


def _box():
    vertices = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * 0.05
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                      [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return vertices, faces


def test_identity_6d():
    r = rot6d_to_matrix(torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=torch.float64))
    assert torch.allclose(r, torch.eye(3, dtype=torch.float64))


def test_6d_gram_schmidt_orthogonalizes():
    r = rot6d_to_matrix(torch.tensor([2.0, 0, 0, 1, 1, 0], dtype=torch.float64))
    assert torch.allclose(r[:, 1], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
    assert torch.allclose(r[:, 2], torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))


def test_matrix_to_6d_inverse_on_random_rotations():
    rots = torch.from_numpy(random_rotations(200, np.random.default_rng(0)))
    back = rot6d_to_matrix(matrix_to_rot6d(rots))
    assert (back - rots).abs().max() < 1e-12
    assert torch.allclose(torch.linalg.det(back), torch.ones(200, dtype=torch.float64))


@pytest.mark.parametrize('bad', [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [float('nan'), 0, 0, 0, 1, 0]])
def test_degenerate_6d(bad):
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(torch.tensor(bad, dtype=torch.float64))


def test_matrix_to_6d_rejects_reflection():
    with pytest.raises(ValidationError):
        matrix_to_rot6d(torch.diag(torch.tensor([1.0, 1.0, -1.0])))


def test_axis_angle_small_angle_and_canonical():
    assert torch.allclose(axis_angle_to_matrix(torch.zeros(3, dtype=torch.float64)), torch.eye(3, dtype=torch.float64))
    aa = np.array([0.0, 0.0, 1.5 * np.pi])
    canon = canonicalize_axis_angle(aa)
    assert np.linalg.norm(canon) < np.pi
    assert np.allclose(axis_angle_to_matrix(torch.from_numpy(canon)).numpy(),
                       axis_angle_to_matrix(torch.from_numpy(aa)).numpy(), atol=1e-12)


def test_feature_width():
    assert human_feature_width(52) == 471
    assert human_feature_width(24) == 219


def test_bps_single_basis_point():
    samples = np.array([[0.5, 0.0, 0.0], [0.0, 0.2, 0.0]])
    code = bps_encode(samples, np.zeros((1, 3)))
    assert np.allclose(code, samples)


def test_bps_sample_on_basis_is_zero():
    basis = make_basis(64, seed=1)
    code = bps_encode(basis[:5], basis)
    assert np.allclose(code, 0.0)


def test_bps_is_invariant_to_basis_order_when_unique():
    rng = np.random.default_rng(3)
    basis = make_basis(32, seed=2)
    samples = rng.uniform(-0.5, 0.5, size=(20, 3))
    perm = rng.permutation(len(basis))
    assert np.allclose(bps_encode(samples, basis), bps_encode(samples, basis[perm]))


def test_bps_rejects_empty():
    with pytest.raises(ValidationError):
        bps_encode(np.zeros((0, 3)), np.zeros((1, 3)))


def test_surface_sampling_is_seeded_and_on_surface():
    vertices, faces = _box()
    a = sample_surface_points(vertices, faces, 300, seed=5)
    b = sample_surface_points(vertices, faces, 300, seed=5)
    assert np.array_equal(a, b)
    assert np.allclose(np.abs(a).max(axis=1), 0.05)


def test_surface_sampling_follows_face_area():
    # 三个互不相连的直角三角形，面积 0.5 / 1.5 / 3.0
    legs = [(1.0, 1.0, 0.0), (1.0, 3.0, 1.0), (2.0, 3.0, 2.0)]
    vertices = np.array([p for a, b, z in legs for p in ([0, 0, z], [a, 0, z], [0, b, z])], dtype=np.float64)
    faces = np.arange(9).reshape(3, 3)
    count = 20000
    points, face_idx, bary = sample_surface_points(vertices, faces, count, seed=11, return_index=True)
    share = np.array([0.5, 1.5, 3.0]) / 5.0
    counts = np.bincount(face_idx, minlength=3)
    sigma = np.sqrt(count * share * (1 - share))
    assert (np.abs(counts - count * share) <= 3 * sigma).all()
    assert (bary >= 0).all() and np.allclose(bary.sum(axis=-1), 1.0)
    assert np.allclose(points[:, 2], np.array([z for _, _, z in legs])[face_idx])


def test_zero_area_mesh():
    vertices = np.zeros((3, 3))
    with pytest.raises(DegenerateGeometryError):
        sample_surface_points(vertices, np.array([[0, 1, 2]]), 10)


def test_encode_geometry_shapes():
    vertices, faces = _box()
    geo = encode_geometry('cube', vertices, faces, make_basis(128), count=128)
    assert geo.surface_samples.shape == (128, 3)
    assert geo.bps_code.shape == (128, 3)
    assert geo.scale > 0


def test_human_flatten_layout():
    t, j = 4, 24
    rng = np.random.default_rng(0)
    motion = HumanMotion(positions=rng.normal(size=(t, j, 3)), rotations=rng.normal(size=(t, j, 6)),
                         root_translation=rng.normal(size=(t, 3)))
    flat = motion.flatten()
    assert flat.shape == (t, human_feature_width(j))
    back = HumanMotion.from_flat(flat, j)
    assert np.array_equal(back.rotations, motion.rotations)
    with pytest.raises(ValidationError):
        HumanMotion.from_flat(flat[:, :-1], j)


def test_object_world_points_follow_pose():
    vertices, faces = _box()
    geo = encode_geometry('cube', vertices, faces, make_basis(32), count=32)
    rot = np.tile(np.array([1.0, 0, 0, 0, 1, 0]), (2, 1))
    trans = np.array([[0.0, 0, 0], [1.0, 2.0, 3.0]])
    track = ObjectTrack(rotation=rot, translation=trans, geometry=geo)
    pts = track.world_points()
    assert np.allclose(pts[1] - pts[0], [1.0, 2.0, 3.0])
    track.validate()


def test_sequence_validation_checks_object_frame_zero():
    vertices, faces = _box()
    geo = encode_geometry('cube', vertices, faces, make_basis(16), count=16)
    human = HumanMotion(positions=np.zeros((2, 24, 3)), rotations=np.tile([1.0, 0, 0, 0, 1, 0], (2, 24, 1)),
                        root_translation=np.zeros((2, 3)))
    turned = np.tile(np.array([0.0, 1, 0, -1, 0, 0]), (2, 1))
    track = ObjectTrack(rotation=turned, translation=np.zeros((2, 3)), geometry=geo)
    seq = HoiSequence(seq_id='s', human=human, objects=[track], text='turn the cube', segments=[Segment(0, 2, 'a')])
    with pytest.raises(ValidationError):
        seq.validate()
    track.rotation = np.tile(np.array([1.0, 0, 0, 0, 1, 0]), (2, 1))
    seq.validate()


def test_segment_tiling():
    check_segment_tiling([Segment(0, 10, 'a'), Segment(10, 25, 'b')], 25)
    with pytest.raises(ValidationError):
        check_segment_tiling([Segment(0, 10, 'a'), Segment(11, 25, 'b')], 25)
    with pytest.raises(ValidationError):
        check_segment_tiling([Segment(0, 10, 'a')], 12)


if __name__ == '__main__':
    pytest.main([__file__])
