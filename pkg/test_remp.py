#!/usr/bin/env python3
"""
Test the recurrent propagation cell, region attention and bidirectional tracklets
"""
from dataclasses import replace
from unittest import mock

import numpy as np

from config import ModelConfig
from errors import ContractViolation
from feature_net import FeatureCache
from flow_provider import FlowProvider
from proposals import Box
from reid import StartingPoint, roi_align
from remp import (
    HiddenState, PropagationContext, attention_gate, initial_hidden, propagate_bidirectional,
    propagate_step, remp_cell, warp_roi,
)
from synthetic_data import render_synthetic, spec_from_preset
from tensor_core import Tensor, check_gradients, mul, total
from trainer import build_params

MODEL = ModelConfig(feat_width=4, feat_depth=1, roi_m=6, embed_dim=16, head_width=4, hidden_dim=4)


def _roi_tensor(seed, channels=4, m=6, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).normal(size=(channels, m, m)).astype(dtype))


def _force_output(params, bias):
    """Make N_O emit a constant logit so tests do not depend on trained weights"""
    params['remp.no3.w'].data[:] = 0.0
    params['remp.no3.b'].data[:] = bias
    return params


def _context(preset='static', bias=10.0, model=MODEL):
    seq = render_synthetic(spec_from_preset(preset))
    params = build_params(model, seed=0)
    if bias is not None:
        _force_output(params, bias)
    frames = [seq.frame(i) for i in range(1, seq.num_frames + 1)]
    ctx = PropagationContext(frames=frames, features=FeatureCache(params), flows=FlowProvider(seq),
                             params=params, model_cfg=model)
    return seq, ctx


def test_attention_is_a_distribution_that_gates_every_channel():
    params = build_params(MODEL, seed=2)
    h_warped, h_current = _roi_tensor(0), _roi_tensor(1)
    a, enhanced = attention_gate(h_warped, h_current, params)
    assert a.shape == (1, 6, 6)
    assert abs(float(np.sum(a.data, dtype=np.float64)) - 1.0) < 1e-6
    assert np.allclose(enhanced.data, h_current.data * a.data)
    try:
        attention_gate(h_warped, _roi_tensor(1, m=5), params)
        assert False, "mismatched grids must be rejected"
    except ContractViolation:
        pass


def test_attention_gate_keeps_hidden_state_metadata():
    params = build_params(MODEL, seed=2)
    box = Box(0, 0, 16, 16)
    current = HiddenState(_roi_tensor(1), identity=2, frame_index=5, box=box)
    _, enhanced = attention_gate(HiddenState(_roi_tensor(0), 2, 4, box), current, params)
    assert isinstance(enhanced, HiddenState)
    assert (enhanced.identity, enhanced.frame_index, enhanced.box) == (2, 5, box)


def test_remp_cell_shapes_and_ablation():
    params = build_params(MODEL, seed=3)
    h, a, logits = remp_cell(_roi_tensor(0), _roi_tensor(1), params)
    assert h.shape == (4, 6, 6) and a.shape == (1, 6, 6) and logits.shape == (1, 6, 6)
    _, a_off, logits_off = remp_cell(_roi_tensor(0), _roi_tensor(1), params, attention=False)
    assert a_off is None and logits_off.shape == (1, 6, 6)


def test_remp_cell_gradient():
    params = build_params(MODEL, seed=4, dtype=np.float64)
    h_warped = Tensor(_roi_tensor(0, dtype=np.float64).data, requires_grad=True)
    x = Tensor(_roi_tensor(1, dtype=np.float64).data, requires_grad=True)
    weights = Tensor(np.random.default_rng(9).normal(size=(1, 6, 6)))
    tensors = [h_warped, x] + [params[k] for k in ('remp.nr1.w', 'remp.att.w', 'remp.no1.w', 'remp.no3.b')]

    def loss():
        return total(mul(remp_cell(h_warped, x, params)[2], weights))
    assert check_gradients(loss, tensors, eps=1e-6, max_entries=12) < 1e-4
    # a shared shift of the attention logits leaves the softmax unchanged
    bias = params['remp.att.b']
    bias.grad = None
    loss().backward()
    assert np.max(np.abs(bias.grad)) < 1e-10


def _attention_params(center_tap=None):
    params = build_params(MODEL, seed=5, dtype=np.float64)
    params['remp.att.w'].data[:] = 0.0
    params['remp.att.b'].data[:] = 0.0
    if center_tap is not None:
        params['remp.att.w'].data[0, 0, 1, 1] = center_tap
    return params


def test_uniform_attention_divides_by_the_cell_count():
    params = _attention_params()
    h_warped, h_current = _roi_tensor(0, dtype=np.float64), _roi_tensor(1, dtype=np.float64)
    a, enhanced = attention_gate(h_warped, h_current, params)
    assert np.allclose(a.data, 1.0 / 36)
    assert np.allclose(enhanced.data, h_current.data / 36)


def test_peaked_attention_keeps_a_single_cell():
    params = _attention_params(center_tap=1.0)
    h_warped = Tensor(np.zeros((4, 6, 6)))
    h_warped.data[0, 2, 3] = 50.0
    h_current = _roi_tensor(1, dtype=np.float64)
    a, enhanced = attention_gate(h_warped, h_current, params)
    assert a.data[0, 2, 3] > 1.0 - 1e-12
    others = np.delete(a.data.reshape(-1), 2 * 6 + 3)
    assert np.max(others) < 1e-20
    assert np.allclose(enhanced.data[:, 2, 3], h_current.data[:, 2, 3])
    assert np.max(np.abs(np.delete(enhanced.data.reshape(4, -1), 2 * 6 + 3, axis=1))) < 1e-18


def test_uniform_attention_matches_the_ablation():
    params = _attention_params()
    h_warped, x = _roi_tensor(0, dtype=np.float64), _roi_tensor(1, dtype=np.float64)
    _, _, gated = remp_cell(h_warped, x, params)
    _, _, plain = remp_cell(h_warped, x, params, attention=False)
    assert np.allclose(gated.data, plain.data, atol=1e-9)


def test_warp_roi_identity_and_box_shift():
    h = _roi_tensor(0, dtype=np.float64)
    box = Box(8, 8, 32, 32)
    zero = np.zeros((2, 8, 8), dtype=np.float32)
    assert np.allclose(warp_roi(h, box, box, zero, 6).data, h.data, atol=1e-9)
    # the object moved 8 px right; the reverse flow points 1 feature cell left
    shifted = np.zeros((2, 8, 8), dtype=np.float32)
    shifted[0] = -1.0
    moved = warp_roi(h, box, Box(16, 8, 40, 32), shifted, 6)
    assert np.allclose(moved.data, h.data, atol=1e-9)


def test_step_aborts_when_the_mask_leaves_the_frame():
    seq, ctx = _context()
    prev = seq.instance_mask(1, 1)
    x = roi_align(ctx.feature(1), Box(20, 20, 44, 44), MODEL.roi_m).tensor
    hidden = HiddenState(initial_hidden(x, ctx.params, MODEL.hidden_dim), 1, 1, Box(20, 20, 44, 44))
    away = np.zeros((2, 64, 64), dtype=np.float32)
    away[0] = 200.0
    assert propagate_step(prev, hidden, ctx.feature(2), away, ctx.params, MODEL, int(prev.sum())) is None
    still = np.zeros((2, 64, 64), dtype=np.float32)
    # warped area far below theta_abort of a much larger starting area
    assert propagate_step(prev, hidden, ctx.feature(2), still, ctx.params, MODEL, 100 * int(prev.sum())) is None
    result = propagate_step(prev, hidden, ctx.feature(2), still, ctx.params, MODEL, int(prev.sum()))
    assert result is not None and result.mask.any()
    assert result.hidden.frame_index == 2 and result.hidden.identity == 1
    try:
        propagate_step(np.zeros_like(prev), hidden, ctx.feature(2), still, ctx.params, MODEL, 1)
        assert False, "empty previous mask must be rejected"
    except ContractViolation:
        pass


def test_step_aborts_when_the_predicted_mask_shrinks():
    seq, ctx = _context()
    model = replace(MODEL, theta_abort=0.5)
    prev = seq.instance_mask(1, 1)
    box = Box(20, 20, 44, 44)
    x = roi_align(ctx.feature(1), box, MODEL.roi_m).tensor
    hidden = HiddenState(initial_hidden(x, ctx.params, MODEL.hidden_dim), 1, 1, box)
    still = np.zeros((2, 64, 64), dtype=np.float32)
    single = np.full((1, 6, 6), -10.0, dtype=np.float32)
    single[0, 3, 3] = 10.0
    with mock.patch('remp.output_logits', return_value=Tensor(single)):
        assert propagate_step(prev, hidden, ctx.feature(2), still, ctx.params, model, int(prev.sum())) is None
    with mock.patch('remp.output_logits', return_value=Tensor(np.full((1, 6, 6), 10.0, dtype=np.float32))):
        result = propagate_step(prev, hidden, ctx.feature(2), still, ctx.params, model, int(prev.sum()))
    assert result is not None and result.mask.sum() >= prev.sum()


def test_guard_stops_a_direction():
    seq, ctx = _context()
    calls = []

    def guard(identity, frame_index, mask, feature):
        calls.append((identity, frame_index, feature.frame_index))
        return frame_index <= 2
    ctx.guard = guard
    start = StartingPoint(mask=seq.instance_mask(1, 1), frame_index=1, identity=1, similarity=1.0)
    tracklet = propagate_bidirectional(start, ctx)
    assert tracklet.frames == [1, 2]
    assert calls == [(1, 2, 2), (1, 3, 3)]


def test_bidirectional_tracklet_is_contiguous_and_attention_normalized():
    seq, ctx = _context()
    start = StartingPoint(mask=seq.instance_mask(3, 1), frame_index=3, identity=1, similarity=0.9)
    tracklet = propagate_bidirectional(start, ctx)
    assert tracklet.frames == [1, 2, 3, 4, 5]
    assert tracklet.is_contiguous()
    assert tracklet.masks[3] is start.mask
    assert len(tracklet.attention_sums) == 4
    assert all(abs(s - 1.0) < 1e-6 for s in tracklet.attention_sums)


def test_empty_output_stops_propagation():
    seq, ctx = _context(bias=-10.0)
    start = StartingPoint(mask=seq.instance_mask(2, 1), frame_index=2, identity=1, similarity=0.9)
    tracklet = propagate_bidirectional(start, ctx)
    assert tracklet.frames == [2]


def test_propagation_is_deterministic():
    seq, ctx = _context(bias=None)
    start = StartingPoint(mask=seq.instance_mask(1, 1), frame_index=1, identity=1, similarity=1.0)
    a = propagate_bidirectional(start, ctx)
    b = propagate_bidirectional(start, ctx)
    assert a.frames == b.frames
    assert all(np.array_equal(a.masks[f], b.masks[f]) for f in a.frames)


def run_all():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"✅ {name}")
    print(f"\n✅ {len(tests)} propagation tests passed!")


if __name__ == "__main__":
    run_all()
