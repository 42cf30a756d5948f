#!/usr/bin/env python3
"""
Test candidate box generation and the box helpers
"""
import math

import numpy as np

from errors import ContractViolation
from feature_net import Frame
from proposals import (
    Box, ProposalConfig, box_iou, dilate_box, grid_count, mask_to_box, propose,
)
from tensor_core import Tensor


def _frame(pixels, index):
    return Frame(pixels=Tensor(pixels.astype(np.float32)), index=index)


def _square_frames(height=32, width=32):
    """Two frames where a 6x6 square moves from x=4 to x=14"""
    before = np.zeros((3, height, width))
    after = np.zeros((3, height, width))
    before[:, 10:16, 4:10] = 1.0
    after[:, 10:16, 14:20] = 1.0
    return _frame(before, 1), _frame(after, 2)


def test_box_validation_and_geometry():
    box = Box(2, 3, 6, 6)
    assert (box.width, box.height, box.area) == (4, 3, 12)
    assert math.isclose(box.diagonal, 5.0)
    for coords in ((2, 3, 2, 6), (2, 3, 6, 1)):
        try:
            Box(*coords)
            assert False, f"degenerate box {coords} accepted"
        except ContractViolation:
            pass
    assert Box(-4, -4, 10, 10).clip(8, 8) == Box(0, 0, 8, 8)
    assert Box(10, 10, 12, 12).clip(8, 8) is None


def test_mask_to_box_is_tight():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:5, 3:8] = True
    assert mask_to_box(mask) == Box(3, 2, 8, 5)
    assert mask_to_box(np.zeros((4, 4), dtype=bool)) is None


def test_dilate_box_grows_by_half_diagonal_margin():
    box = Box(10, 10, 16, 18)  # 6 x 8, diagonal 10
    grown = dilate_box(box, 0.2, 100, 100)
    assert grown == Box(9, 9, 17, 19)
    assert dilate_box(Box(0, 0, 6, 8), 0.2, 100, 100) == Box(0, 0, 7, 9)


def test_box_iou():
    assert box_iou(Box(0, 0, 4, 4), Box(0, 0, 4, 4)) == 1.0
    assert box_iou(Box(0, 0, 4, 4), Box(4, 0, 8, 4)) == 0.0
    assert math.isclose(box_iou(Box(0, 0, 4, 4), Box(2, 0, 6, 4)), 8 / 24)


def test_frame_diff_finds_changed_regions():
    first, second = _square_frames()
    boxes = propose(second, first, 'frame-diff')
    # the vacated and the newly covered areas are separate components
    assert sorted(b.as_tuple() for b in boxes) == [(4.0, 10.0, 10.0, 16.0), (14.0, 10.0, 20.0, 16.0)]


def test_frame_diff_without_previous_frame():
    first, _ = _square_frames()
    assert propose(first, None, 'frame-diff') == []


def test_frame_diff_identical_frames_give_nothing():
    first, _ = _square_frames()
    assert propose(first, first, 'frame-diff') == []


def test_gt_jitter_zero_scale_returns_ground_truth():
    first, _ = _square_frames()
    gt = [Box(4, 10, 10, 16)]
    cfg = ProposalConfig(mode='gt-jitter', jitter_scale=0.0)
    assert propose(first, None, 'gt-jitter', cfg, gt) == gt


def test_gt_jitter_is_seeded_and_stays_in_frame():
    _, second = _square_frames()
    gt = [Box(0, 0, 8, 8), Box(20, 20, 32, 32)]
    cfg = ProposalConfig(mode='gt-jitter', jitter_scale=0.3, seed=4)
    a = propose(second, None, 'gt-jitter', cfg, gt)
    b = propose(second, None, 'gt-jitter', cfg, gt)
    assert a == b
    assert a != gt
    for box in a:
        assert 0 <= box.x0 < box.x1 <= 32 and 0 <= box.y0 < box.y1 <= 32


def test_gt_jitter_needs_ground_truth():
    first, _ = _square_frames()
    try:
        propose(first, None, 'gt-jitter')
        assert False, "gt-jitter without boxes must fail"
    except ContractViolation:
        pass


def test_exhaustive_grid_count():
    frame = _frame(np.zeros((3, 64, 64)), 1)
    cfg = ProposalConfig(mode='exhaustive-grid', anchor_sizes=(16, 32), anchor_stride=16)
    boxes = propose(frame, None, 'exhaustive-grid', cfg)
    assert len(boxes) == grid_count(64, 64, (16, 32), 16) == 16 + 9
    assert all(b.x1 <= 64 and b.y1 <= 64 for b in boxes)


def test_unknown_mode():
    first, _ = _square_frames()
    try:
        propose(first, None, 'rpn')
        assert False, "unknown mode must fail"
    except ContractViolation:
        pass


def run_all():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"✅ {name}")
    print(f"\n✅ {len(tests)} proposal tests passed!")


if __name__ == "__main__":
    run_all()
