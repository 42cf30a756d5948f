"""
Candidate object boxes per frame
Deterministic stand-ins for a region proposal network: frame differencing,
jittered ground truth and an exhaustive multi-scale anchor grid.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from errors import ContractViolation

logger = logging.getLogger(__name__)

PROPOSAL_MODES = ('frame-diff', 'gt-jitter', 'exhaustive-grid')

# 8-connectivity for frame-diff components
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Box:
    """Half-open pixel-coordinate box [x0, x1) x [y0, y1) in frame space"""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ContractViolation(f"Degenerate box {self}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def clip(self, width, height):
        """Intersection with the frame, or None when nothing is left"""
        x0, y0 = max(0.0, self.x0), max(0.0, self.y0)
        x1, y1 = min(float(width), self.x1), min(float(height), self.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class ProposalConfig:
    mode: str = 'gt-jitter'
    diff_threshold: float = 0.05
    jitter_scale: float = 0.05
    anchor_sizes: tuple = (16, 32)
    anchor_stride: int = 16
    seed: int = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(
            mode=cfg['proposals.mode'],
            diff_threshold=cfg['proposals.diff_threshold'],
            jitter_scale=cfg['proposals.jitter_scale'],
            anchor_sizes=tuple(cfg['proposals.anchor_sizes']),
            anchor_stride=cfg['proposals.anchor_stride'],
            seed=cfg['train.seed'],
        )


def mask_to_box(mask):
    """Tight box around the non-zero pixels of a mask, or None for an empty mask"""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def dilate_box(box, margin, width, height):
    """Grow every side by margin * diagonal / 2, then clip to the frame"""
    pad = margin * box.diagonal / 2.0
    grown = Box(box.x0 - pad, box.y0 - pad, box.x1 + pad, box.y1 + pad)
    return grown.clip(width, height)


def box_iou(a, b):
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def grid_count(width, height, sizes, stride):
    """Number of exhaustive-grid anchors: sum over sizes of per-axis placements"""
    count = 0
    for size in sizes:
        if size > width or size > height:
            continue
        count += ((width - size) // stride + 1) * ((height - size) // stride + 1)
    return count


def box_from_slices(sl):
    return Box(float(sl[1].start), float(sl[0].start), float(sl[1].stop), float(sl[0].stop))


def _frame_diff_boxes(frame, prev_frame, threshold):
    diff = np.abs(frame.pixels.data - prev_frame.pixels.data).max(axis=0)
    labels, count = ndimage.label(diff > threshold, structure=EIGHT_CONNECTED)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        boxes.append(box_from_slices(sl))
    logger.debug(f"frame-diff on frame {frame.index}: {count} components")
    return boxes


def _jitter_boxes(gt_boxes, scale, width, height, rng):
    if scale == 0:
        return [box for box in gt_boxes]
    boxes = []
    for box in gt_boxes:
        dx, dy, sw, sh = rng.uniform(-1.0, 1.0, size=4)
        cx = (box.x0 + box.x1) / 2 + dx * scale * box.width
        cy = (box.y0 + box.y1) / 2 + dy * scale * box.height
        w = box.width * math.exp(sw * scale)
        h = box.height * math.exp(sh * scale)
        clipped = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clip(width, height)
        if clipped is not None:
            boxes.append(clipped)
    return boxes


def _grid_boxes(width, height, sizes, stride):
    boxes = []
    for size in sizes:
        for y0 in range(0, height - size + 1, stride):
            for x0 in range(0, width - size + 1, stride):
                boxes.append(Box(float(x0), float(y0), float(x0 + size), float(y0 + size)))
    return boxes


def propose(frame, prev_frame, mode, cfg=None, gt_boxes=None):
    """Candidate boxes for one frame; every returned box lies inside the frame"""
    cfg = cfg or ProposalConfig(mode=mode)
    if mode not in PROPOSAL_MODES:
        raise ContractViolation(f"Unknown proposal mode {mode!r}; choose from {PROPOSAL_MODES}")
    width, height = frame.width, frame.height
    if mode == 'frame-diff':
        if prev_frame is None:
            return []
        return _frame_diff_boxes(frame, prev_frame, cfg.diff_threshold)
    if mode == 'gt-jitter':
        if gt_boxes is None:
            raise ContractViolation(f"gt-jitter proposals need ground-truth boxes for frame {frame.index}")
        rng = np.random.default_rng([cfg.seed, frame.index])
        return _jitter_boxes(list(gt_boxes), cfg.jitter_scale, width, height, rng)
    return _grid_boxes(width, height, cfg.anchor_sizes, cfg.anchor_stride)
