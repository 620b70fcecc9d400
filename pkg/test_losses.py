# -*- coding: utf-8 -*-
"""训练损失与人体 SDF"""

import pytest
import torch

from body_model import BodyParams, load_body_model
from corpus import HoiDataset
from errors import DegenerateGeometryError, ValidationError
from losses import (LossWeights, SdfGrid, body_sdf_grid, body_sdf_grids, capsule_sdf, hoi_losses, loss_dis, loss_pen,
                    loss_pos, loss_rec, loss_vel, total_loss, trilinear_sample)

IDENTITY_6D = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]


def _object(translation):
    return torch.tensor(IDENTITY_6D + list(translation), dtype=torch.float64)


def _linear_grid(n=4):
    axis = torch.arange(n, dtype=torch.float64)
    i, j, k = torch.meshgrid(axis, axis, axis, indexing='ij')
    return SdfGrid(values=(i + 2 * j + 3 * k)[None], origin=torch.zeros(1, 3, dtype=torch.float64),
                   cell=torch.ones(1, dtype=torch.float64))


def _rod():
    """沿 x 轴的一根胶囊，长 1 m，半径 0.1 m"""
    joints = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64)
    return joints, [(0, 1)], [0.1]


def test_pos_and_vel_losses():
    gt = torch.randn(2, 6, 4, 3, dtype=torch.float64)
    assert float(loss_pos(gt, gt)) == 0.0
    assert float(loss_vel(gt, gt)) == 0.0
    shifted = gt + torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64)
    assert float(loss_vel(shifted, gt)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_pos(shifted, gt)) == pytest.approx(4 * 0.01)


def test_masked_frames_are_ignored():
    gt = torch.zeros(1, 5, 2, 3)
    pred = gt.clone()
    pred[0, 3:] = 10.0
    mask = torch.tensor([[1.0, 1.0, 1.0, 0.0, 0.0]])
    assert float(loss_pos(pred, gt, mask)) == 0.0
    assert float(loss_vel(pred, gt, mask)) == 0.0
    assert float(loss_rec(pred.reshape(1, 5, 6), gt.reshape(1, 5, 6), mask)) == 0.0
    with pytest.raises(ValidationError):
        loss_pos(pred, gt, torch.ones(1, 4))


def test_vel_loss_single_frame():
    x = torch.randn(1, 1, 3, 3)
    assert float(loss_vel(x, x + 1)) == 0.0


def test_capsule_sdf_values():
    starts = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    ends = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    radii = torch.tensor([0.1], dtype=torch.float64)
    points = torch.tensor([[0.5, 0.0, 0.0], [0.5, 0.3, 0.0], [-0.5, 0.0, 0.0]], dtype=torch.float64)
    sdf = capsule_sdf(points, starts, ends, radii)[:, 0]
    assert torch.allclose(sdf, torch.tensor([-0.1, 0.2, 0.4], dtype=torch.float64))


def test_trilinear_reproduces_linear_field():
    grid = _linear_grid()
    points = torch.tensor([[0.5, 1.25, 2.5], [3.0, 3.0, 3.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    values = trilinear_sample(grid, points)
    assert torch.allclose(values, torch.tensor([10.5, 18.0, 0.0], dtype=torch.float64))


def test_trilinear_outside_is_zero():
    grid = _linear_grid()
    points = torch.tensor([[-0.1, 1.0, 1.0], [1.0, 3.5, 1.0]], dtype=torch.float64)
    assert (trilinear_sample(grid, points) == 0).all()
    with pytest.raises(ValidationError):
        trilinear_sample(grid, torch.zeros(2, 4, 3, dtype=torch.float64))


def test_trilinear_gradient():
    grid = _linear_grid()
    points = torch.tensor([[1.2, 0.7, 2.3]], dtype=torch.float64, requires_grad=True)
    trilinear_sample(grid, points).sum().backward()
    assert torch.allclose(points.grad, torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64))


def test_body_sdf_grid_depth():
    joints, bones, radii = _rod()
    grid = body_sdf_grid(joints, bones, radii, resolution=33, padding=0.1)
    assert grid.values.shape == (1, 33, 33, 33)
    assert (grid.values >= 0).all()
    depth = trilinear_sample(grid, torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))
    assert float(depth) == pytest.approx(0.1, abs=0.02)
    outside = trilinear_sample(grid, torch.tensor([[0.5, 0.3, 0.0]], dtype=torch.float64))
    assert float(outside) == 0.0


def test_body_sdf_rejects_collapsed_skeleton():
    joints = torch.zeros(1, 2, 3, dtype=torch.float64)
    with pytest.raises(DegenerateGeometryError):
        body_sdf_grids(joints, [(0, 1)], [0.1])


def test_pen_loss_pushes_objects_out():
    joints, bones, radii = _rod()
    grids = body_sdf_grids(joints, bones, radii, resolution=17)
    samples = torch.tensor([[[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]]], dtype=torch.float64)
    far = _object([0.5, 2.0, 0.0])[None, None]
    assert float(loss_pen(far, samples, grids)) == 0.0

    inside = _object([0.5, 0.03, 0.0])[None, None].clone().requires_grad_(True)
    loss = loss_pen(inside, samples, grids)
    assert float(loss) > 0
    loss.backward()
    # 沿 +y 移出胶囊时穿透变浅
    assert float(inside.grad[0, 0, 7]) < 0
    with pytest.raises(ValidationError):
        loss_pen(torch.cat([inside, inside]).detach(), samples, grids)


def test_dis_loss_ignores_shared_motion():
    samples = torch.randn(2, 5, 3, dtype=torch.float64)
    gt = torch.stack([_object([0.0, 0.0, 0.0]), _object([0.3, 0.0, 0.0])])[None]
    moved_together = gt.clone()
    moved_together[..., 6:] += torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    assert float(loss_dis(moved_together, gt, samples)) == pytest.approx(0.0, abs=1e-18)
    apart = gt.clone()
    apart[0, 1, 6] += 0.2
    assert float(loss_dis(apart, gt, samples)) > 0
    with pytest.raises(ValidationError):
        loss_dis(gt[:, :1], gt[:, :1], samples[:1])
    with pytest.raises(ValidationError):
        loss_dis(gt, gt, [samples[0], samples[1, :3]])


def test_loss_weights():
    weights = LossWeights()
    assert (weights.vel, weights.pos, weights.pen, weights.dis) == (1.0, 1.0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        LossWeights(pen=-1.0)
    parts = {'vel': torch.tensor(1.0), 'pos': torch.tensor(2.0), 'pen': torch.tensor(3.0), 'dis': torch.tensor(10.0)}
    assert float(total_loss(parts)) == pytest.approx(7.0)
    parts['rec'] = torch.tensor(0.5)
    assert float(total_loss(parts, LossWeights(rec=2.0))) == pytest.approx(8.0)


def test_hoi_losses_on_ground_truth(corpus, tiny_config):
    dataset = HoiDataset(corpus, 'train')
    batch = next(dataset.batches(2, seed=0, shuffle_objects=False))
    gt_h, gt_o = batch.raw(dataset.stats)
    body_model = load_body_model(tiny_config.body_model)
    total, parts = hoi_losses(gt_h, gt_o, gt_h, gt_o, batch.mask, batch.samples, body_model, tiny_config)
    assert float(parts['pos']) == pytest.approx(0.0, abs=1e-10)
    assert float(parts['vel']) == pytest.approx(0.0, abs=1e-10)
    assert float(parts['dis']) == pytest.approx(0.0, abs=1e-10)
    assert float(parts['pen']) >= 0.0
    assert float(total) == pytest.approx(float(parts['pen']) * tiny_config.lambda_pen, rel=1e-5, abs=1e-8)


def test_hoi_losses_gradient_reaches_objects(corpus, tiny_config):
    dataset = HoiDataset(corpus, 'train')
    batch = next(dataset.batches(2, seed=0))
    gt_h, gt_o = batch.raw(dataset.stats)
    pred_o = (gt_o + 0.01).requires_grad_(True)
    pred_h = (gt_h + 0.01).requires_grad_(True)
    total, _ = hoi_losses(pred_h, pred_o, gt_h, gt_o, batch.mask, batch.samples,
                          load_body_model(tiny_config.body_model), tiny_config)
    total.backward()
    assert torch.isfinite(pred_h.grad).all() and torch.isfinite(pred_o.grad).all()
    assert pred_h.grad.abs().sum() > 0


def test_rest_pose_grid_covers_body():
    body_model = load_body_model('toy')
    joints = body_model.rest_joints()[None]
    grid = body_sdf_grids(joints, body_model.bones(), body_model.capsule_radii()[1:], resolution=16)
    assert float(grid.values.max()) > 0
    assert BodyParams.zeros(1).num_frames == 1


if __name__ == '__main__':
    pytest.main([__file__])
