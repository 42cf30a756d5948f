"""
Recurrent mask propagation
Extends a starting mask frame by frame: flow-guided warping of the previous mask and
hidden state, a recurrent cell over the box features, region attention and an output
network whose m x m mask is pasted back at full resolution.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ContractViolation
from feature_net import FEATURE_STRIDE
from flow_provider import downsample_flow, warp_mask
from proposals import dilate_box, mask_to_box
from reid import MASK_THRESHOLD, cell_centers, paste_mask, roi_align
from tensor_core import Tensor, bilinear_sample, concat, conv2d, mul, relu, scale, sigmoid, spatial_softmax

logger = logging.getLogger(__name__)


@dataclass
class HiddenState:
    tensor: Tensor   # d x m x m
    identity: int
    frame_index: int
    box: object      # frame-space box the m x m grid covers


@dataclass
class StepResult:
    mask: np.ndarray
    hidden: HiddenState
    box: object
    attention: Tensor        # 1 x m x m, None when attention is off
    probabilities: np.ndarray


@dataclass
class Tracklet:
    identity: int
    origin: object                              # StartingPoint
    masks: dict = field(default_factory=dict)   # frame index -> boolean mask
    attention_sums: list = field(default_factory=list)

    @property
    def frames(self):
        return sorted(self.masks)

    @property
    def first(self):
        return min(self.masks)

    @property
    def last(self):
        return max(self.masks)

    @property
    def similarity(self):
        return self.origin.similarity

    def __len__(self):
        return len(self.masks)

    def is_contiguous(self):
        frames = self.frames
        return frames == list(range(frames[0], frames[-1] + 1))


def init_remp_params(store, model_cfg, rng):
    d, c = model_cfg.hidden_dim, model_cfg.feat_width
    store.add_conv('remp.nr1', d, d + c, 3, rng)
    store.add_conv('remp.nr2', d, d, 3, rng)
    store.add_conv('remp.att', 1, d, 3, rng)
    store.add_conv('remp.no1', d, d, 3, rng)
    store.add_conv('remp.no2', d, d, 3, rng)
    store.add_conv('remp.no3', 1, d, 1, rng)


def _conv(x, params, name, padding=1):
    return conv2d(x, params[f'{name}.w'], params[f'{name}.b'], padding=padding)


def recurrent_update(h_warped, x, params):
    """N_R: two 3x3 ReLU convolutions over concat(h_warped, x)"""
    h = relu(_conv(concat([h_warped, x], axis=0), params, 'remp.nr1'))
    return relu(_conv(h, params, 'remp.nr2'))


def attention_map(h_warped, params):
    return spatial_softmax(_conv(h_warped, params, 'remp.att'))


def attention_gate(h_warped, h_current, params):
    """a = softmax over positions of a 1-channel conv of h_warped; every channel of h_current is multiplied by a"""
    warped = h_warped.tensor if isinstance(h_warped, HiddenState) else h_warped
    current = h_current.tensor if isinstance(h_current, HiddenState) else h_current
    if warped.shape[1:] != current.shape[1:]:
        raise ContractViolation(f"attention_gate spatial mismatch: {warped.shape} vs {current.shape}")
    a = attention_map(warped, params)
    enhanced = mul(current, a)
    if isinstance(h_current, HiddenState):
        enhanced = HiddenState(enhanced, h_current.identity, h_current.frame_index, h_current.box)
    return a, enhanced


def output_logits(h, params):
    """N_O: three convolutional layers producing 1 x m x m mask logits"""
    y = relu(_conv(h, params, 'remp.no1'))
    y = relu(_conv(y, params, 'remp.no2'))
    return _conv(y, params, 'remp.no3', padding=0)


def remp_cell(h_warped, x, params, attention=True):
    """One differentiable recurrent step on the roi grid; returns (h, a, mask logits).

    The gated state is multiplied by m*m before N_O, so uniform attention hands N_O the
    same input as the no-attention path.
    """
    h = recurrent_update(h_warped, x, params)
    a = None
    gated = h
    if attention:
        a, gated = attention_gate(h_warped, h, params)
        gated = scale(gated, float(a.data.size))
    return h, a, output_logits(gated, params)


def initial_hidden(x, params, hidden_dim):
    """Hidden state at the starting frame: N_R with an all-zero prior state"""
    zeros = Tensor(np.zeros((hidden_dim,) + x.shape[1:], dtype=x.dtype))
    return recurrent_update(zeros, x, params)


def warp_roi(h_prev, box_prev, box_cur, flow_reverse_down, m):
    """Carry an m x m hidden state from box_prev in the previous frame to box_cur in this one.

    The reverse flow at 1/8 resolution is sampled at box_cur's cell centers; each displaced
    center is then located on box_prev's grid. Cells that fall outside box_prev read zero.
    """
    centers = cell_centers(box_cur, m)
    flow = bilinear_sample(Tensor(flow_reverse_down), centers / FEATURE_STRIDE).data.astype(np.float64)
    source_x = centers[..., 0] + FEATURE_STRIDE * flow[0]
    source_y = centers[..., 1] + FEATURE_STRIDE * flow[1]
    u = (source_x - box_prev.x0) / box_prev.width * m - 0.5
    v = (source_y - box_prev.y0) / box_prev.height * m - 0.5
    return bilinear_sample(h_prev, np.stack([u, v], axis=-1))


def propagate_step(prev_mask, h_prev, feature, flow_reverse, params, model_cfg, start_area):
    """Extend a mask from the previous frame into feature.frame_index.

    flow_reverse is F(j -> j-1) for forward propagation (F(j -> j+1) backward).
    Returns a StepResult, or None when propagation aborts.
    """
    if not np.any(prev_mask):
        raise ContractViolation("propagate_step needs a non-empty previous mask")
    height, width = prev_mask.shape
    frame_index = feature.frame_index
    warped = warp_mask(prev_mask, flow_reverse)
    area = int(warped.sum())
    if area == 0 or area < model_cfg.theta_abort * start_area:
        logger.debug(f"Propagation of identity {h_prev.identity} aborted at frame {frame_index}: "
                     f"warped area {area} vs start area {start_area}")
        return None
    box = dilate_box(mask_to_box(warped), model_cfg.box_margin, width, height)
    x = roi_align(feature, box, model_cfg.roi_m).tensor
    h_warped = warp_roi(h_prev.tensor, h_prev.box, box, downsample_flow(flow_reverse), model_cfg.roi_m)
    h, a, logits = remp_cell(h_warped, x, params, attention=model_cfg.attention)
    probs = sigmoid(logits).data[0]
    mask = paste_mask(probs, box, height, width) > MASK_THRESHOLD
    out_area = int(mask.sum())
    if out_area == 0 or out_area < model_cfg.theta_abort * start_area:
        logger.debug(f"Propagation of identity {h_prev.identity} aborted at frame {frame_index}: "
                     f"predicted area {out_area} vs start area {start_area}")
        return None
    hidden = HiddenState(tensor=h, identity=h_prev.identity, frame_index=frame_index, box=box)
    return StepResult(mask=mask, hidden=hidden, box=box, attention=a, probabilities=probs)


@dataclass
class PropagationContext:
    """Everything propagation reads for one sequence.

    guard, when set, is called as guard(identity, frame_index, mask, feature) after every
    step; a False return stops that direction before the mask is kept.
    """
    frames: list        # Frame objects, frames[i - 1] has index i
    features: object    # FeatureCache
    flows: object       # FlowProvider
    params: object
    model_cfg: object
    guard: object = None

    @property
    def num_frames(self):
        return len(self.frames)

    def feature(self, index):
        return self.features.get(self.frames[index - 1])


def _run_direction(start, hidden, ctx, tracklet, step):
    prev_mask = start.mask
    start_area = int(start.mask.sum())
    j = start.frame_index + step
    while 1 <= j <= ctx.num_frames:
        flow_reverse = ctx.flows.get(j, j - step)
        result = propagate_step(prev_mask, hidden, ctx.feature(j), flow_reverse,
                                ctx.params, ctx.model_cfg, start_area)
        if result is None:
            break
        if ctx.guard is not None and not ctx.guard(start.identity, j, result.mask, ctx.feature(j)):
            logger.debug(f"Propagation of identity {start.identity} stopped at frame {j}: "
                         f"predicted mask no longer matches the identity")
            break
        tracklet.masks[j] = result.mask
        if result.attention is not None:
            tracklet.attention_sums.append(float(np.sum(result.attention.data, dtype=np.float64)))
        prev_mask, hidden = result.mask, result.hidden
        j += step


def propagate_bidirectional(start, ctx):
    """Grow a starting point into a contiguous tracklet, forward then backward"""
    height, width = start.mask.shape
    box = dilate_box(mask_to_box(start.mask), ctx.model_cfg.box_margin, width, height)
    x = roi_align(ctx.feature(start.frame_index), box, ctx.model_cfg.roi_m).tensor
    h0 = initial_hidden(x, ctx.params, ctx.model_cfg.hidden_dim)
    hidden = HiddenState(tensor=h0, identity=start.identity, frame_index=start.frame_index, box=box)
    tracklet = Tracklet(identity=start.identity, origin=start, masks={start.frame_index: start.mask})
    _run_direction(start, hidden, ctx, tracklet, +1)
    _run_direction(start, hidden, ctx, tracklet, -1)
    logger.debug(f"Tracklet identity {start.identity} from frame {start.frame_index}: "
                 f"frames {tracklet.first}..{tracklet.last}")
    return tracklet
