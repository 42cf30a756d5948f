#!/usr/bin/env python3
"""
Trend-level checks on synthetic clips after toy training
These train small models for several minutes, so they only run with DYE_RUN_SLOW=1.
"""
import os
from dataclasses import replace
from functools import lru_cache

import numpy as np

from config import Config, ModelConfig
from feature_net import FeatureCache
from flow_provider import FlowProvider
from inference import InferenceConfig, run_dyenet
from metrics import evaluate, jaccard
from proposals import dilate_box, mask_to_box
from reid import MASK_THRESHOLD, StartingPoint, cell_centers, paste_mask, roi_align
from remp import PropagationContext, initial_hidden, propagate_bidirectional, remp_cell
from tensor_core import Tensor, sigmoid
from synthetic_data import render_synthetic, spec_from_preset
from trainer import TrainConfig, train

SLOW = os.getenv('DYE_RUN_SLOW') == '1'
TRAIN_PRESETS = ('static', 'translate', 'two_objects', 'occlusion', 'distractor')
REAPPEARANCE_FRAMES = range(11, 17)


def _skip(name):
    print(f"⏭️  {name} skipped (set DYE_RUN_SLOW=1)")


def _config(attention=True):
    # one drop late in the run; the default schedule spends two thirds of it at a tiny rate
    return Config.load(profile='desk', overrides={'train.iterations': 900, 'train.lr_drop_interval': 600,
                                                  'remp.attention': attention, 'train.log_every': 100})


@lru_cache(maxsize=None)
def _trained(attention=True):
    cfg = _config(attention)
    dataset = [render_synthetic(spec_from_preset(p, seed)) for p in TRAIN_PRESETS for seed in (1, 2)]
    result = train(dataset, TrainConfig.from_config(cfg), ModelConfig.from_config(cfg))
    return cfg, result.params, result.curve


def _infer(seq, reid=True, attention=True, **overrides):
    cfg, params, _ = _trained(attention)
    infer_cfg = replace(InferenceConfig.from_config(cfg), reid=reid, **overrides)
    return run_dyenet(seq, seq.first_frame_masks(), params, infer_cfg, ground_truth=seq)


def test_training_loss_goes_down():
    if not SLOW:
        return _skip('test_training_loss_goes_down')
    _, _, curve = _trained()
    losses = [row['L'] for row in curve]
    assert np.median(losses[150:200]) < np.median(losses[0:50])


def test_static_propagation_keeps_the_mask():
    if not SLOW:
        return _skip('test_static_propagation_keeps_the_mask')
    cfg, params, _ = _trained()
    seq = render_synthetic(spec_from_preset('static', seed=7))
    model = ModelConfig.from_config(cfg)
    ctx = PropagationContext(frames=[seq.frame(i) for i in range(1, seq.num_frames + 1)],
                             features=FeatureCache(params), flows=FlowProvider(seq, mode='zero'),
                             params=params, model_cfg=model)
    start = StartingPoint(mask=seq.instance_mask(1, 1), frame_index=1, identity=1, similarity=1.0)
    tracklet = propagate_bidirectional(start, ctx)
    assert tracklet.frames == [1, 2, 3, 4, 5]
    assert all(jaccard(tracklet.masks[f], tracklet.masks[f - 1]) >= 0.9 for f in range(2, 6))


def test_occlusion_recovery_needs_reidentification():
    if not SLOW:
        return _skip('test_occlusion_recovery_needs_reidentification')
    seq = render_synthetic(spec_from_preset('occlusion', seed=0))
    full = _infer(seq, reid=True)
    ablated = _infer(seq, reid=False)
    for frame in REAPPEARANCE_FRAMES:
        truth = seq.instance_mask(frame, 2)
        assert jaccard(full.label_maps[frame] == 2, truth) >= 0.7, frame
        assert not (ablated.label_maps[frame] == 2).any(), frame
    assert evaluate(full.label_maps, seq).miou > evaluate(ablated.label_maps, seq).miou
    assert full.iterations <= 4


def test_attention_beats_the_ablation():
    if not SLOW:
        return _skip('test_attention_beats_the_ablation')
    suite = [render_synthetic(spec_from_preset('distractor', seed)) for seed in (11, 12, 13)]
    with_attention = np.mean([evaluate(_infer(s, reid=False).label_maps, s).miou for s in suite])
    without = np.mean([evaluate(_infer(s, reid=False, attention=False).label_maps, s).miou for s in suite])
    assert with_attention - without >= 0.05, (with_attention, without)


def test_warped_state_picks_the_tracked_blob():
    if not SLOW:
        return _skip('test_warped_state_picks_the_tracked_blob')
    cfg, params, _ = _trained()
    model = ModelConfig.from_config(cfg)
    seq = render_synthetic(spec_from_preset('distractor'))
    blob_a, blob_b = seq.instance_mask(3, 1), seq.instance_mask(3, 2)
    box = dilate_box(mask_to_box(blob_a | blob_b), model.box_margin, seq.width, seq.height)
    x = roi_align(FeatureCache(params).get(seq.frame(3)), box, model.roi_m).tensor
    centers = cell_centers(box, model.roi_m)
    on_a = blob_a[centers[..., 1].astype(int), centers[..., 0].astype(int)]
    assert on_a.any()
    state = initial_hidden(x, params, model.hidden_dim).data * on_a[None]
    _, _, logits = remp_cell(Tensor(state), x, params, attention=model.attention)
    mask = paste_mask(sigmoid(logits).data[0], box, seq.height, seq.width) > MASK_THRESHOLD
    assert jaccard(mask, blob_a) > jaccard(mask, blob_b)


def test_iterations_and_threshold_trends():
    if not SLOW:
        return _skip('test_iterations_and_threshold_trends')
    for preset in ('static', 'translate', 'two_objects', 'occlusion', 'distractor'):
        seq = render_synthetic(spec_from_preset(preset, seed=21))
        result = _infer(seq)
        assert result.iterations <= 4
        recalls = [r.recall for r in result.reports]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        strict = _infer(seq, max_iters=1, rho_reid=0.9).reports[0].candidates
        loose = _infer(seq, max_iters=1, rho_reid=0.6).reports[0].candidates
        assert loose >= strict


def run_all():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"✅ {name}")
    print(f"\n✅ {len(tests)} acceptance checks done!")


if __name__ == "__main__":
    run_all()
