#!/usr/bin/env python3
"""
Activation maps, normalization, box extraction and masking against loop oracles.
"""

import numpy as np
import torch
from torch import nn

import activation_maps as cam
from dataset_manager import BBox


def random_fmap(k=8, h=7, w=7, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((k, h, w)))


def loop_class_map(fmap, weights, c):
    k, h, w = fmap.shape
    out = np.zeros((h, w))
    for a in range(h):
        for b in range(w):
            for j in range(k):
                out[a, b] += float(weights[c, j]) * float(fmap[j, a, b])
    return out


def normalized(values):
    return cam.normalize(cam.ActivationMap(torch.as_tensor(values, dtype=torch.float64), "test"))


# ---------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------
def test_zero_weights_give_zero_map():
    amap = cam.class_map(random_fmap(), torch.zeros(3, 8, dtype=torch.float64), 1)
    assert torch.count_nonzero(amap.values) == 0


def test_single_channel_unit_weight_is_identity():
    fmap = random_fmap(k=1)
    amap = cam.class_map(fmap, torch.ones(1, 1, dtype=torch.float64), 0)
    assert torch.equal(amap.values, fmap[0])


def test_class_map_matches_triple_loop():
    fmap = random_fmap(k=8, h=3, w=3, seed=1)
    weights = torch.from_numpy(np.random.default_rng(2).standard_normal((4, 8)))
    for c in range(4):
        assert np.allclose(cam.class_map(fmap, weights, c).values.numpy(), loop_class_map(fmap, weights, c),
                           atol=1e-6)


def test_class_map_is_linear():
    rng = np.random.default_rng(3)
    f1, f2 = random_fmap(seed=4), random_fmap(seed=5)
    w = torch.from_numpy(rng.standard_normal((3, 8)))
    lhs = cam.class_map(2.0 * f1 + f2, w, 0).values
    rhs = 2.0 * cam.class_map(f1, w, 0).values + cam.class_map(f2, w, 0).values
    assert torch.allclose(lhs, rhs, atol=1e-9)


def test_merged_map_sums_class_maps():
    fmap = random_fmap(seed=6)
    w = torch.from_numpy(np.random.default_rng(7).standard_normal((4, 8)))
    assert torch.allclose(cam.merged_map(fmap, w, {2}).values, cam.class_map(fmap, w, 2).values)
    pair = cam.class_map(fmap, w, 0).values + cam.class_map(fmap, w, 1).values
    assert torch.allclose(cam.merged_map(fmap, w, {0, 1}).values, pair, atol=1e-6)
    union = cam.merged_map(fmap, w, {0, 1, 3}).values
    assert torch.allclose(union, cam.merged_map(fmap, w, {0, 1}).values + cam.merged_map(fmap, w, {3}).values,
                          atol=1e-9)


def test_empty_merge_is_flagged_zero_map():
    amap = cam.merged_map(random_fmap(), torch.ones(3, 8, dtype=torch.float64), set())
    assert amap.empty
    assert torch.count_nonzero(amap.values) == 0


def test_localization_map_averages_heads():
    fmap = random_fmap(seed=8)
    w = torch.from_numpy(np.random.default_rng(9).standard_normal((3, 8)))
    v = torch.from_numpy(np.random.default_rng(10).standard_normal((3, 8)))
    assert torch.allclose(cam.localization_map(fmap, w, w, 1).values, cam.class_map(fmap, w, 1).values)
    assert torch.count_nonzero(cam.localization_map(fmap, w, -w, 1).values.abs() > 1e-12) == 0
    avg = 0.5 * (cam.class_map(fmap, w, 2).values + cam.class_map(fmap, v, 2).values)
    assert torch.allclose(cam.localization_map(fmap, w, v, 2).values, avg, atol=1e-6)


def test_bias_does_not_change_boxes():
    fmap = random_fmap(seed=11).float()
    head = nn.Linear(8, 3)
    before = cam.extract_box(cam.normalize(cam.class_map(fmap, head, 0)), 0.8)
    with torch.no_grad():
        head.bias.add_(5.0)
    after = cam.extract_box(cam.normalize(cam.class_map(fmap, head, 0)), 0.8)
    assert before.box == after.box


# ---------------------------------------------------------------------
# Normalization and boxes
# ---------------------------------------------------------------------
def test_two_point_normalization():
    assert normalized([[1.0, 3.0]]).values.tolist() == [[0.0, 1.0]]


def test_constant_map_is_degenerate():
    amap = normalized(np.full((7, 7), 4.2))
    assert amap.degenerate and torch.count_nonzero(amap.values) == 0


def test_random_map_spans_unit_range_and_renormalizes_to_itself():
    amap = normalized(np.random.default_rng(12).standard_normal((7, 7)))
    assert amap.values.min().item() == 0.0 and amap.values.max().item() == 1.0
    assert torch.allclose(cam.normalize(amap).values, amap.values)


def test_single_hot_cell_gives_unit_box():
    values = np.zeros((7, 7))
    values[2, 5] = 1.0
    region = cam.extract_box(normalized(values), 0.8)
    assert region.box == BBox(5, 2, 1, 1)


def test_opposite_corners_give_full_grid():
    values = np.zeros((7, 7))
    values[0, 0] = values[6, 6] = 1.0
    assert cam.extract_box(normalized(values), 0.8).box == BBox(0, 0, 7, 7)


def test_nothing_above_threshold_is_empty():
    region = cam.extract_box(normalized(np.full((7, 7), 2.0)), 0.8)
    assert region.empty and region.box is None


def test_box_is_sound_and_tight_on_random_maps():
    rng = np.random.default_rng(13)
    for _ in range(20):
        values = rng.random((7, 7))
        amap = normalized(values)
        box = cam.extract_box(amap, 0.8).box
        hot = np.argwhere(amap.values.numpy() > 0.8)
        assert box == BBox(hot[:, 1].min(), hot[:, 0].min(),
                           hot[:, 1].max() - hot[:, 1].min() + 1, hot[:, 0].max() - hot[:, 0].min() + 1)


# ---------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------
def test_full_grid_mask_is_a_no_op():
    fmap = random_fmap()
    mask = cam.RegionMask(BBox(0, 0, 7, 7), 0.8, 7, 7)
    assert torch.equal(cam.mask_features(fmap, mask), fmap)


def test_unit_mask_zeroes_every_other_cell():
    fmap = random_fmap() + 10.0
    masked = cam.mask_features(fmap, cam.RegionMask(BBox(3, 4, 1, 1), 0.8, 7, 7))
    assert all(int((masked[k] == 0).sum()) == 48 for k in range(fmap.shape[0]))


def test_masked_sum_equals_box_sum():
    fmap = random_fmap(seed=14)
    mask = cam.RegionMask(BBox(1, 2, 3, 4), 0.8, 7, 7)
    masked = cam.mask_features(fmap, mask)
    assert torch.allclose(masked.sum(), fmap[:, 2:6, 1:4].sum())


def test_empty_mask_keeps_full_map():
    fmap = random_fmap()
    assert torch.equal(cam.mask_features(fmap, cam.RegionMask(None, 0.8, 7, 7)), fmap)


def test_region_masks_per_image():
    fmap = torch.stack([random_fmap(seed=15), random_fmap(seed=16)]).float()
    w = torch.from_numpy(np.random.default_rng(17).standard_normal((3, 8))).float()
    masks = cam.region_masks(fmap, w, [[], [0, 2]], 0.8)
    assert torch.equal(masks[0], torch.ones(7, 7))
    expected = cam.extract_box(cam.normalize(cam.merged_map(fmap[1], w, [0, 2])), 0.8).as_tensor(fmap)
    assert torch.equal(masks[1], expected)


# ---------------------------------------------------------------------
# Image-resolution boxes
# ---------------------------------------------------------------------
def test_bright_cell_upsamples_to_its_footprint():
    values = np.zeros((7, 7))
    values[3, 3] = 1.0
    assert cam.predict_boxes(normalized(values), 0.5, 70) == [BBox(30, 30, 10, 10)]


def test_zero_map_predicts_nothing():
    assert cam.predict_boxes(normalized(np.zeros((7, 7))), 0.5, 70) == []


def test_separate_blobs_come_largest_first():
    values = np.zeros((7, 7))
    values[0:2, 0:2] = 1.0
    values[5, 5] = 1.0
    boxes = cam.predict_boxes(normalized(values), 0.5, 70)
    assert boxes == [BBox(0, 0, 20, 20), BBox(50, 50, 10, 10)]
