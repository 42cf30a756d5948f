"""
Optical flow between adjacent frames and flow-guided warping
Flow comes from stored ground truth, integer block matching or is zero; warping is
backward bilinear sampling with the reverse-direction field.
"""
import logging
import threading
from dataclasses import dataclass

import numpy as np

from errors import ContractViolation, MissingDataError
from tensor_core import Tensor, bilinear_sample

logger = logging.getLogger(__name__)

FLOW_MODES = ('ground-truth', 'block-match', 'zero')


@dataclass
class FlowField:
    vectors: Tensor   # 2 x H x W, (dx, dy) per pixel
    from_index: int
    to_index: int

    @property
    def shape(self):
        return self.vectors.shape[1:]

    def numpy(self):
        return self.vectors.data


def _candidate_displacements(radius):
    """All integer displacements, smallest magnitude first, then smaller dx, then smaller dy"""
    span = range(-radius, radius + 1)
    candidates = [(dx, dy) for dx in span for dy in span]
    candidates.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return candidates


def block_match(src, dst, patch=8, radius=8):
    """Integer flow src -> dst: one SAD-minimizing displacement per patch x patch block.

    The cost of a displacement is the mean absolute difference over the block's pixels whose
    displaced position stays inside dst; displacements leaving more than half the block
    outside are never chosen.
    """
    if src.shape != dst.shape:
        raise ContractViolation(f"block_match frames differ in shape: {src.shape} vs {dst.shape}")
    _, height, width = src.shape
    rows, cols = -(-height // patch), -(-width // patch)
    pad_h, pad_w = rows * patch - height, cols * patch - width
    padded = np.pad(dst.astype(np.float64), ((0, 0), (radius, radius), (radius, radius)),
                    constant_values=np.nan)
    source = src.astype(np.float64)
    candidates = _candidate_displacements(radius)
    block_size = np.pad(np.ones((height, width)), ((0, pad_h), (0, pad_w)))
    block_size = block_size.reshape(rows, patch, cols, patch).sum(axis=(1, 3))
    costs = np.empty((len(candidates), rows, cols), dtype=np.float64)
    for n, (dx, dy) in enumerate(candidates):
        shifted = padded[:, radius + dy:radius + dy + height, radius + dx:radius + dx + width]
        diff = np.abs(source - shifted).sum(axis=0)
        valid = ~np.isnan(diff)
        diff = np.where(valid, diff, 0.0)
        diff = np.pad(diff, ((0, pad_h), (0, pad_w)))
        valid = np.pad(valid, ((0, pad_h), (0, pad_w)))
        block_cost = diff.reshape(rows, patch, cols, patch).sum(axis=(1, 3))
        block_valid = valid.reshape(rows, patch, cols, patch).sum(axis=(1, 3))
        with np.errstate(invalid='ignore', divide='ignore'):
            cost = block_cost / block_valid
        costs[n] = np.where(block_valid * 2 >= block_size, cost, np.inf)
    # argmin keeps the first minimum, i.e. the documented tie order
    best = np.argmin(costs, axis=0)
    table = np.array(candidates, dtype=np.float32)
    flow = table[best].transpose(2, 0, 1)
    flow = np.repeat(np.repeat(flow, patch, axis=1), patch, axis=2)
    return flow[:, :height, :width]


def get_flow(seq, from_index, to_index, mode='ground-truth', patch=8, radius=8):
    """Dense flow F(from -> to) between adjacent frames of a sequence"""
    if abs(from_index - to_index) != 1:
        raise ContractViolation(f"Flow is only defined between adjacent frames, got {from_index}->{to_index}")
    if mode not in FLOW_MODES:
        raise ContractViolation(f"Unknown flow mode {mode!r}; choose from {FLOW_MODES}")
    for index in (from_index, to_index):
        if not 1 <= index <= seq.num_frames:
            raise ContractViolation(f"Frame {index} outside sequence {seq.name!r} of {seq.num_frames} frames")
    height, width = seq.height, seq.width
    if mode == 'zero':
        vectors = np.zeros((2, height, width), dtype=np.float32)
    elif mode == 'ground-truth':
        vectors = seq.flows.get((from_index, to_index))
        if vectors is None:
            raise MissingDataError(
                f"Sequence {seq.name!r} has no stored flow {from_index}->{to_index}; "
                f"use flow.mode=block-match or zero")
    else:
        vectors = block_match(seq.frame_pixels(from_index), seq.frame_pixels(to_index), patch, radius)
    return FlowField(vectors=Tensor(np.asarray(vectors, dtype=np.float32)),
                     from_index=from_index, to_index=to_index)


class FlowProvider:
    """Cached flow source for one sequence; both directions of every adjacent pair"""

    def __init__(self, seq, mode='ground-truth', patch=8, radius=8):
        if mode not in FLOW_MODES:
            raise ContractViolation(f"Unknown flow mode {mode!r}; choose from {FLOW_MODES}")
        self.seq = seq
        self.mode = mode
        self.patch = patch
        self.radius = radius
        self._cache = {}
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, seq, cfg):
        return cls(seq, mode=cfg['flow.mode'], patch=cfg['flow.patch'], radius=cfg['flow.radius'])

    def get(self, from_index, to_index):
        key = (from_index, to_index)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        flow = get_flow(self.seq, from_index, to_index, self.mode, self.patch, self.radius)
        with self._lock:
            return self._cache.setdefault(key, flow)

    def reverse(self, from_index, to_index):
        """Field used to warp quantities of from_index into to_index (sampling F(to -> from))"""
        return self.get(to_index, from_index)


def downsample_flow(flow, factor=8):
    """Area-mean downsampling by factor, with vectors divided by factor"""
    vectors = flow.numpy() if isinstance(flow, FlowField) else np.asarray(flow)
    _, height, width = vectors.shape
    if height % factor or width % factor:
        raise ContractViolation(f"Flow size {height}x{width} is not divisible by {factor}")
    pooled = vectors.astype(np.float64).reshape(2, height // factor, factor, width // factor, factor).mean(axis=(2, 4))
    return (pooled / factor).astype(np.float32)


def warp(feature_map, flow_reverse):
    """Backward warp: output(p) = map sampled at p + flow_reverse(p), zero outside the map"""
    vectors = flow_reverse.numpy() if isinstance(flow_reverse, FlowField) else np.asarray(flow_reverse)
    if vectors.shape[1:] != feature_map.shape[1:]:
        raise ContractViolation(f"Flow size {vectors.shape[1:]} does not match map size {feature_map.shape[1:]}")
    _, height, width = feature_map.shape
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    points = np.stack([gx + vectors[0], gy + vectors[1]], axis=-1)
    return bilinear_sample(feature_map, points)


def warp_mask(mask, flow_reverse):
    """Warp a binary full-resolution mask and threshold the result at 0.5"""
    warped = warp(Tensor(np.asarray(mask, dtype=np.float32)[None]), flow_reverse)
    return warped.data[0] > 0.5
