"""
Frame-level feature network N_feat
Three stride-2 3x3 blocks followed by dilated stride-1 blocks, giving maps at 1/8 resolution.
"""
import logging
import threading
from dataclasses import dataclass

from errors import ContractViolation
from tensor_core import Tensor, conv2d, relu

logger = logging.getLogger(__name__)

FEATURE_STRIDE = 8
STRIDED_BLOCKS = 3


@dataclass
class Frame:
    pixels: Tensor   # 3xHxW, values in [0, 1]
    index: int       # 1-based

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


@dataclass
class FeatureMap:
    tensor: Tensor   # C x H/8 x W/8
    frame_index: int

    @property
    def channels(self):
        return self.tensor.shape[0]


def block_names(depth):
    names = [f'feat.block{i}' for i in range(STRIDED_BLOCKS)]
    names += [f'feat.dilated{i}' for i in range(depth)]
    return names


def init_feature_params(store, model_cfg, rng):
    """Kaiming fan-in initialization of every block; biases start at zero"""
    in_channels = 3
    for name in block_names(model_cfg.feat_depth):
        store.add_conv(name, model_cfg.feat_width, in_channels, 3, rng)
        in_channels = model_cfg.feat_width


def extract_features(frame, params, depth=None):
    """f_i = N_feat(I_i); output is exactly H/8 x W/8"""
    _, height, width = frame.pixels.shape
    if height % FEATURE_STRIDE or width % FEATURE_STRIDE:
        raise ContractViolation(
            f"Frame {frame.index} is {height}x{width}; dimensions must be divisible by 8 (pad at load)")
    if depth is None:
        depth = sum(1 for k in params.keys() if k.startswith('feat.dilated') and k.endswith('.w'))
    x = frame.pixels
    for i in range(STRIDED_BLOCKS):
        x = relu(conv2d(x, params[f'feat.block{i}.w'], params[f'feat.block{i}.b'], stride=2, padding=1))
    for i in range(depth):
        x = relu(conv2d(x, params[f'feat.dilated{i}.w'], params[f'feat.dilated{i}.b'],
                        stride=1, dilation=2, padding=2))
    return FeatureMap(tensor=x, frame_index=frame.index)


class FeatureCache:
    """Per-frame feature cache so Re-ID and Re-MP share one FeatureMap per frame"""

    def __init__(self, params):
        self.params = params
        self._maps = {}
        self._lock = threading.Lock()

    def get(self, frame):
        with self._lock:
            cached = self._maps.get(frame.index)
        if cached is not None:
            return cached
        features = extract_features(frame, self.params)
        with self._lock:
            # a concurrent fill of the same key keeps the first object
            return self._maps.setdefault(frame.index, features)

    def __contains__(self, index):
        with self._lock:
            return index in self._maps

    def __len__(self):
        with self._lock:
            return len(self._maps)
