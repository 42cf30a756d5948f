"""
Sequence, mask, flow and checkpoint I/O
Directory layout: frames/%05d.ppm (1-based), optional masks/%05d.pgm and
flow/%05d_fw.dyfl (i -> i+1) / flow/%05d_bw.dyfl (i -> i-1).
"""
import logging
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from data import PALETTE
from errors import ContractViolation, LoadError
from feature_net import FEATURE_STRIDE, Frame
from linker import MaskTube, resolve_label_maps
from proposals import mask_to_box
from tensor_core import ParamStore, Tensor

logger = logging.getLogger(__name__)

MIN_SIZE = 16
FLOW_MAGIC = b'DYFL'
CHECKPOINT_MAGIC = b'DYCK'
FRAME_PATTERN = re.compile(r'^(\d{5})\.ppm$')
MASK_PATTERN = re.compile(r'^(\d{5})\.pgm$')
FLOW_PATTERN = re.compile(r'^(\d{5})_(fw|bw)\.dyfl$')
OVERLAY_ALPHA = 0.5


def pixels_from_uint8(rgb):
    """H x W x 3 uint8 -> 3 x H x W float32 in [0, 1]"""
    return (np.asarray(rgb, dtype=np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def pixels_to_uint8(pixels):
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def padded_size(height, width):
    def up(n):
        return max(MIN_SIZE, -(-n // FEATURE_STRIDE) * FEATURE_STRIDE)
    return up(height), up(width)


def _pad(array, height, width):
    pad = [(0, 0)] * (array.ndim - 2) + [(0, height - array.shape[-2]), (0, width - array.shape[-1])]
    return np.pad(array, pad)


def palette_color(identity):
    return PALETTE[(identity - 1) % len(PALETTE)]


@dataclass
class Sequence:
    """Frames padded to multiples of 8 (at least 16); original_size is the unpadded (H, W)"""
    name: str
    frames: list                                  # 3 x H x W float32 arrays
    masks: list = field(default_factory=list)     # H x W uint8 instance-id maps, empty when absent
    flows: dict = field(default_factory=dict)     # (from, to) -> 2 x H x W float32
    original_size: tuple = None

    def __post_init__(self):
        if not self.frames:
            raise ContractViolation(f"Sequence {self.name!r} has no frames")
        if self.original_size is None:
            self.original_size = tuple(self.frames[0].shape[1:])

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def height(self):
        return self.frames[0].shape[1]

    @property
    def width(self):
        return self.frames[0].shape[2]

    @property
    def has_masks(self):
        return bool(self.masks)

    def frame(self, index):
        return Frame(pixels=Tensor(self.frames[index - 1]), index=index)

    def frame_pixels(self, index):
        return self.frames[index - 1]

    def identities(self):
        if not self.masks:
            return []
        return sorted(int(k) for k in np.unique(self.masks[0]) if k != 0)

    def instance_mask(self, index, identity):
        return self.masks[index - 1] == identity

    def first_frame_masks(self):
        return {k: self.instance_mask(1, k) for k in self.identities()}

    def gt_boxes(self, index):
        """Tight boxes of every instance visible on a frame, by identity"""
        if not self.masks:
            return None
        label_map = self.masks[index - 1]
        boxes = []
        for identity in sorted(int(k) for k in np.unique(label_map) if k != 0):
            boxes.append(mask_to_box(label_map == identity))
        return boxes


def make_sequence(name, frames, masks=None, flows=None):
    """Build a padded Sequence from unpadded arrays"""
    height, width = frames[0].shape[1:]
    ph, pw = padded_size(height, width)
    return Sequence(
        name=name,
        frames=[_pad(np.asarray(f, dtype=np.float32), ph, pw) for f in frames],
        masks=[_pad(np.asarray(m, dtype=np.uint8), ph, pw) for m in (masks or [])],
        flows={k: _pad(np.asarray(v, dtype=np.float32), ph, pw) for k, v in (flows or {}).items()},
        original_size=(height, width),
    )


# --------------------------------
# Images
# --------------------------------
def _indexed_files(directory, pattern):
    found = {}
    for name in os.listdir(directory):
        match = pattern.match(name)
        if match:
            found[int(match.group(1))] = os.path.join(directory, name)
    return found


def _check_numbering(indices, directory):
    expected = list(range(1, len(indices) + 1))
    if sorted(indices) != expected:
        missing = sorted(set(range(1, max(indices) + 1)) - set(indices))
        raise LoadError(f"{directory}: files must be numbered 1..N without gaps; missing {missing}")


def read_image(path, mode):
    try:
        with Image.open(path) as image:
            image.load()
            found, array = image.mode, np.array(image)
    except (OSError, SyntaxError) as e:
        raise LoadError(f"Cannot read image {path}: {e}") from e
    if found != mode:
        raise LoadError(f"{path}: expected image mode {mode}, got {found}")
    return array


def write_image(path, array):
    """uint8 H x W x 3 arrays become P6 files, H x W arrays P5"""
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format='PPM')


# --------------------------------
# Flow files
# --------------------------------
def write_flow(path, vectors):
    vectors = np.asarray(vectors, dtype=np.float32)
    _, height, width = vectors.shape
    with open(path, 'wb') as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack('<II', height, width))
        f.write(vectors.transpose(1, 2, 0).astype('<f4').tobytes())


def read_flow(path):
    with open(path, 'rb') as f:
        blob = f.read()
    if blob[:4] != FLOW_MAGIC or len(blob) < 12:
        raise LoadError(f"{path}: not a DYFL flow file")
    height, width = struct.unpack('<II', blob[4:12])
    expected = 12 + height * width * 2 * 4
    if len(blob) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for {height}x{width} flow, got {len(blob)}")
    values = np.frombuffer(blob, dtype='<f4', offset=12).reshape(height, width, 2)
    return values.transpose(2, 0, 1).astype(np.float32)


# --------------------------------
# Sequences
# --------------------------------
def load_sequence(directory):
    frames_dir = os.path.join(directory, 'frames')
    if not os.path.isdir(frames_dir):
        raise LoadError(f"Missing frames directory: {frames_dir}")
    frame_files = _indexed_files(frames_dir, FRAME_PATTERN)
    if not frame_files:
        raise LoadError(f"No %05d.ppm frames in {frames_dir}")
    _check_numbering(list(frame_files), frames_dir)

    frames = []
    for index in sorted(frame_files):
        rgb = read_image(frame_files[index], 'RGB')
        if frames and rgb.shape[:2] != frames[0].shape[1:]:
            raise LoadError(f"Frame {index} is {rgb.shape[:2]}, frame 1 is {frames[0].shape[1:]}")
        frames.append(pixels_from_uint8(rgb))
    height, width = frames[0].shape[1:]

    masks = []
    masks_dir = os.path.join(directory, 'masks')
    if os.path.isdir(masks_dir):
        mask_files = _indexed_files(masks_dir, MASK_PATTERN)
        if sorted(mask_files) != sorted(frame_files):
            raise LoadError(f"{masks_dir}: expected one mask per frame (1..{len(frame_files)})")
        for index in sorted(mask_files):
            label_map = read_image(mask_files[index], 'L')
            if label_map.shape != (height, width):
                raise LoadError(f"Mask {index} is {label_map.shape}, frames are {(height, width)}")
            masks.append(label_map)
        ids = sorted(set(np.unique(np.stack(masks)).tolist()) - {0})
        if ids and ids != list(range(1, ids[-1] + 1)):
            gap = sorted(set(range(1, ids[-1] + 1)) - set(ids))
            raise LoadError(f"{masks_dir}: instance ids must be contiguous 1..K; found {ids}, missing {gap}")

    flows = {}
    flow_dir = os.path.join(directory, 'flow')
    if os.path.isdir(flow_dir):
        for name in sorted(os.listdir(flow_dir)):
            match = FLOW_PATTERN.match(name)
            if not match:
                continue
            index = int(match.group(1))
            target = index + 1 if match.group(2) == 'fw' else index - 1
            vectors = read_flow(os.path.join(flow_dir, name))
            if vectors.shape[1:] != (height, width):
                raise LoadError(f"Flow {name} is {vectors.shape[1:]}, frames are {(height, width)}")
            flows[(index, target)] = vectors

    name = os.path.basename(os.path.normpath(directory))
    seq = make_sequence(name, frames, masks, flows)
    logger.info(f"Loaded {name}: {seq.num_frames} frames {height}x{width}, "
                f"{len(seq.identities())} instances, {len(flows)} flow fields")
    return seq


def save_sequence(seq, directory):
    """Write frames, masks and flows cropped to the original size"""
    height, width = seq.original_size
    frames_dir = os.path.join(directory, 'frames')
    os.makedirs(frames_dir, exist_ok=True)
    for index, pixels in enumerate(seq.frames, start=1):
        write_image(os.path.join(frames_dir, f'{index:05d}.ppm'), pixels_to_uint8(pixels[:, :height, :width]))
    if seq.masks:
        save_label_maps({i: m for i, m in enumerate(seq.masks, start=1)}, directory, seq.original_size)
    if seq.flows:
        flow_dir = os.path.join(directory, 'flow')
        os.makedirs(flow_dir, exist_ok=True)
        for (src, dst), vectors in sorted(seq.flows.items()):
            suffix = 'fw' if dst == src + 1 else 'bw'
            write_flow(os.path.join(flow_dir, f'{src:05d}_{suffix}.dyfl'), vectors[:, :height, :width])
    logger.info(f"Wrote {seq.name} to {directory}")


def load_dataset(directories):
    sequences = [load_sequence(d) for d in directories]
    if not sequences:
        raise ContractViolation("Training needs at least one sequence directory")
    return sequences


# --------------------------------
# Label maps
# --------------------------------
def save_label_maps(label_maps, directory, original_size):
    height, width = original_size
    masks_dir = os.path.join(directory, 'masks')
    os.makedirs(masks_dir, exist_ok=True)
    for index in sorted(label_maps):
        write_image(os.path.join(masks_dir, f'{index:05d}.pgm'),
                    np.asarray(label_maps[index], dtype=np.uint8)[:height, :width])


def load_label_maps(directory):
    """frame index -> label map from DIR/masks (or DIR itself when it holds the .pgm files)"""
    masks_dir = os.path.join(directory, 'masks')
    if not os.path.isdir(masks_dir):
        masks_dir = directory
    if not os.path.isdir(masks_dir):
        raise LoadError(f"Missing prediction directory: {directory}")
    files = _indexed_files(masks_dir, MASK_PATTERN)
    if not files:
        raise LoadError(f"No %05d.pgm label maps in {masks_dir}")
    return {index: read_image(path, 'L') for index, path in sorted(files.items())}


def tubes_from_label_maps(label_maps):
    tubes = {}
    for index in sorted(label_maps):
        label_map = np.asarray(label_maps[index])
        for identity in sorted(int(k) for k in np.unique(label_map) if k != 0):
            tube = tubes.setdefault(identity, MaskTube(identity=identity))
            tube.masks[index] = label_map == identity
            tube.scores[index] = 1.0
    return [tubes[k] for k in sorted(tubes)]


# --------------------------------
# Overlay
# --------------------------------
def blend_overlay(rgb, label_map):
    out = rgb.astype(np.float64)
    for identity in sorted(int(k) for k in np.unique(label_map) if k != 0):
        region = label_map == identity
        out[region] = (1 - OVERLAY_ALPHA) * out[region] + OVERLAY_ALPHA * np.array(palette_color(identity))
    return np.rint(out).astype(np.uint8)


def render_overlay(seq, tubes, out_dir):
    """One %05d.ppm per frame at the original size with each identity's color blended in"""
    for tube in tubes:
        bad = [f for f in tube.masks if not 1 <= f <= seq.num_frames]
        if bad:
            raise ContractViolation(f"Tube {tube.identity} has frames {bad} outside 1..{seq.num_frames}")
    height, width = seq.original_size
    padded = []
    for tube in tubes:
        clone = MaskTube(identity=tube.identity, scores=dict(tube.scores))
        clone.masks = {f: _pad(np.asarray(m, dtype=bool), seq.height, seq.width) for f, m in tube.masks.items()}
        for f in clone.masks:
            clone.scores.setdefault(f, 1.0)
        padded.append(clone)
    label_maps = resolve_label_maps(padded, seq.num_frames, seq.height, seq.width)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for index in range(1, seq.num_frames + 1):
        rgb = pixels_to_uint8(seq.frames[index - 1][:, :height, :width])
        image = blend_overlay(rgb, label_maps[index][:height, :width])
        path = os.path.join(out_dir, f'{index:05d}.ppm')
        write_image(path, image)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} overlay frames to {out_dir}")
    return paths


# --------------------------------
# Checkpoints
# --------------------------------
def save_checkpoint(store, path):
    keys = store.keys()
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(keys)))
        for key in keys:
            name = key.encode('utf-8')
            shape = store[key].shape
            f.write(struct.pack('<I', len(name)))
            f.write(name)
            f.write(struct.pack('<I', len(shape)))
            f.write(struct.pack(f'<{len(shape)}I', *shape))
        for key in keys:
            f.write(np.ascontiguousarray(store[key].data, dtype='<f4').tobytes())
    logger.info(f"Saved checkpoint with {len(keys)} tensors ({store.count()} values) to {path}")


def load_checkpoint(path, expected=None):
    """Read a DYCK file into a ParamStore; expected (a ParamStore) pins the key set and shapes"""
    if not os.path.isfile(path):
        raise LoadError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: not a DYCK checkpoint")
    try:
        offset = 4
        (count,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        table = []
        for _ in range(count):
            (length,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            name = blob[offset:offset + length].decode('utf-8')
            offset += length
            (ndim,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            shape = struct.unpack_from(f'<{ndim}I', blob, offset)
            offset += 4 * ndim
            table.append((name, shape))
        store = ParamStore()
        for name, shape in table:
            size = int(np.prod(shape))
            values = np.frombuffer(blob, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            store.add(name, values.reshape(shape).copy())
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise LoadError(f"{path}: truncated or malformed checkpoint ({e})") from e
    if offset != len(blob):
        raise LoadError(f"{path}: {len(blob) - offset} trailing bytes after the last tensor")
    if expected is not None:
        _check_against(store, expected, path)
    return store


def _check_against(store, expected, path):
    missing = sorted(set(expected.keys()) - set(store.keys()))
    extra = sorted(set(store.keys()) - set(expected.keys()))
    if missing or extra:
        raise LoadError(f"{path}: key set does not match the configured model "
                        f"(missing {missing}, unexpected {extra}); check --profile and --set")
    for key in expected.keys():
        if store[key].shape != expected[key].shape:
            raise LoadError(f"{path}: {key} has shape {store[key].shape}, the configured model expects "
                            f"{expected[key].shape}; check --profile and --set")
