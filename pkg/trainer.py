"""
Joint end-to-end training
L = L_reid + lambda * (L_mask + L_remp) over mini-batches of short clips, optimized by
SGD with momentum, weight decay and a step learning-rate schedule.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import ContractViolation, DegenerateEmbeddingError, TrainingDivergedError
from feature_net import extract_features, init_feature_params
from flow_provider import FlowProvider, downsample_flow, warp_mask
from proposals import dilate_box, mask_to_box
from remp import init_remp_params, initial_hidden, remp_cell, warp_roi
from reid import embed_head, init_lut, init_reid_params, mask_head_logits, oim_loss, roi_align, roi_mask_target
from tensor_core import ParamStore, Tensor, bce_with_logits, mean, concat, sgd_momentum_step

logger = logging.getLogger(__name__)

MAX_UNROLL = 3
CURVE_HEADER = ['step', 'L', 'L_reid', 'L_mask', 'L_remp']


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    lr_drop: float = 10.0
    lr_drop_interval: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 2000
    videos_per_batch: int = 2
    frames_per_video: int = 2
    unroll: int = 1
    frozen: tuple = ()
    seed: int = 0
    log_every: int = 50
    flow_mode: str = 'ground-truth'

    @classmethod
    def from_config(cls, cfg):
        return cls(
            lam=cfg['train.lambda'],
            lr=cfg['train.lr'],
            lr_drop=cfg['train.lr_drop'],
            lr_drop_interval=cfg['train.lr_drop_interval'],
            momentum=cfg['train.momentum'],
            weight_decay=cfg['train.weight_decay'],
            iterations=cfg['train.iterations'],
            videos_per_batch=cfg['train.videos_per_batch'],
            frames_per_video=cfg['train.frames_per_video'],
            unroll=cfg['train.unroll'],
            frozen=tuple(cfg['train.frozen']),
            seed=cfg['train.seed'],
            log_every=cfg['train.log_every'],
            flow_mode=cfg['flow.mode'],
        ).validated()

    def validated(self):
        if self.lr <= 0 or self.iterations < 1 or self.videos_per_batch < 1 or self.frames_per_video < 1:
            raise ContractViolation(f"Training settings must be positive: {self}")
        if self.lam < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractViolation(f"lambda, momentum and weight decay must be >= 0: {self}")
        if self.lr_drop <= 1:
            raise ContractViolation(f"Learning-rate drop factor must exceed 1, got {self.lr_drop}")
        if not 1 <= self.unroll <= MAX_UNROLL:
            raise ContractViolation(f"train.unroll must be in 1..{MAX_UNROLL}, got {self.unroll}")
        return self

    @property
    def window(self):
        return max(self.frames_per_video, self.unroll + 1)

    def learning_rate(self, step):
        interval = self.lr_drop_interval or max(1, self.iterations // 3)
        return self.lr / self.lr_drop ** (step // interval)


def build_params(model_cfg, seed=0, dtype=np.float32):
    """Freshly initialized parameters of every sub-network, fixed by seed"""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_feature_params(store, model_cfg, rng)
    init_reid_params(store, model_cfg, rng)
    init_remp_params(store, model_cfg, rng)
    return store if dtype == np.float32 else store.astype(dtype)


@dataclass
class TrainingSample:
    """Consecutive frames of one video with their supervision"""
    video: str
    frames: list                                        # Frame objects
    masks: list                                         # instance label maps, aligned with frames
    flows_reverse: dict = field(default_factory=dict)   # frame index j -> F(j -> j-1)
    reid_frames: int = 2

    def identities(self, position):
        return sorted(int(k) for k in np.unique(self.masks[position]) if k != 0)


def build_sample(seq, start, length, flows=None, reid_frames=None):
    """Window [start, start + length) of a sequence; flows is a FlowProvider (ground truth by default)"""
    if not seq.masks:
        raise ContractViolation(f"Sequence {seq.name!r} has no ground-truth masks to train on")
    if start < 1 or start + length - 1 > seq.num_frames:
        raise ContractViolation(f"Window {start}..{start + length - 1} outside 1..{seq.num_frames}")
    flows = flows or FlowProvider(seq)
    indices = range(start, start + length)
    return TrainingSample(
        video=seq.name,
        frames=[seq.frame(i) for i in indices],
        masks=[seq.masks[i - 1] for i in indices],
        flows_reverse={j: flows.get(j, j - 1) for j in indices if j > start},
        reid_frames=min(length, reid_frames or length),
    )


def sample_batch(dataset, train_cfg, rng, providers=None):
    count = train_cfg.videos_per_batch
    picks = rng.choice(len(dataset), size=count, replace=len(dataset) < count)
    batch = []
    for pick in sorted(int(p) for p in picks):
        seq = dataset[pick]
        length = min(train_cfg.window, seq.num_frames)
        start = int(rng.integers(1, seq.num_frames - length + 2))
        flows = providers[pick] if providers else None
        batch.append(build_sample(seq, start, length, flows, train_cfg.frames_per_video))
    return batch


def joint_objective(l_reid, l_mask, l_remp, lam):
    """L = L_reid + lambda * (L_mask + L_remp); works on floats and tensors"""
    return l_reid + (l_mask + l_remp) * lam


def _mean_of(terms, dtype):
    if not terms:
        return Tensor(np.zeros(1, dtype=dtype))
    return mean(concat(terms, axis=0))


def _remp_terms(sample, features, params, model_cfg, unroll):
    """Teacher-forced propagation losses from the window's first frame"""
    terms = []
    height, width = sample.masks[0].shape
    m = model_cfg.roi_m
    for identity in sample.identities(0):
        prev_mask = sample.masks[0] == identity
        box_prev = dilate_box(mask_to_box(prev_mask), model_cfg.box_margin, width, height)
        h = initial_hidden(roi_align(features[0], box_prev, m).tensor, params, model_cfg.hidden_dim)
        for position in range(1, min(unroll, len(sample.frames) - 1) + 1):
            flow_reverse = sample.flows_reverse[sample.frames[position].index]
            warped = warp_mask(prev_mask, flow_reverse)
            if not warped.any():
                break
            box = dilate_box(mask_to_box(warped), model_cfg.box_margin, width, height)
            x = roi_align(features[position], box, m).tensor
            h_warped = warp_roi(h, box_prev, box, downsample_flow(flow_reverse), m)
            h, _, logits = remp_cell(h_warped, x, params, attention=model_cfg.attention)
            target = roi_mask_target(sample.masks[position] == identity, box, m)
            terms.append(bce_with_logits(logits, target[None]))
            prev_mask, box_prev = sample.masks[position] == identity, box
    return terms


def compute_joint_loss(batch, params, model_cfg, lut, lam=1.0, unroll=1):
    """Returns (L, {'L_reid', 'L_mask', 'L_remp'} as floats, updated lookup table)"""
    if not batch:
        raise ContractViolation("compute_joint_loss needs a non-empty batch")
    embeddings, labels, mask_terms, remp_terms = [], [], [], []
    for sample in batch:
        if not sample.masks or len(sample.masks) != len(sample.frames):
            raise ContractViolation(f"Sample of {sample.video!r} is missing ground-truth masks")
        if len(sample.frames) > 1 and len(sample.flows_reverse) != len(sample.frames) - 1:
            raise ContractViolation(f"Sample of {sample.video!r} is missing adjacent-frame flows")
        features = [extract_features(frame, params) for frame in sample.frames]
        height, width = sample.masks[0].shape
        for position in range(sample.reid_frames):
            for identity in sample.identities(position):
                mask = sample.masks[position] == identity
                box = mask_to_box(mask)
                roi = roi_align(features[position], box, model_cfg.roi_m)
                target = roi_mask_target(mask, box, model_cfg.roi_m)
                mask_terms.append(bce_with_logits(mask_head_logits(roi, params), target[None]))
                try:
                    embeddings.append(embed_head(roi, params))
                    labels.append(f'{sample.video}:{identity}')
                except DegenerateEmbeddingError as e:
                    logger.debug(f"Skipped degenerate embedding of {sample.video}:{identity}: {e}")
        remp_terms += _remp_terms(sample, features, params, model_cfg, unroll)
    if not embeddings or not mask_terms:
        raise ContractViolation("Batch carries no identity supervision (no visible instances)")
    dtype = mask_terms[0].dtype
    l_reid, lut = oim_loss(embeddings, labels, lut, model_cfg.tau, model_cfg.mu)
    l_mask = _mean_of(mask_terms, dtype)
    l_remp = _mean_of(remp_terms, dtype)
    total_loss = joint_objective(l_reid, l_mask, l_remp, lam)
    components = {'L_reid': l_reid.item(), 'L_mask': l_mask.item(), 'L_remp': l_remp.item()}
    return total_loss, components, lut


def identity_keys(dataset):
    return [f'{seq.name}:{k}' for seq in dataset for k in range(1, int(max(m.max() for m in seq.masks)) + 1)]


@dataclass
class TrainResult:
    params: ParamStore
    curve: list
    lut: dict


def train(dataset, train_cfg, model_cfg, params=None):
    """Run train_cfg.iterations SGD steps; deterministic given the seed"""
    if not dataset:
        raise ContractViolation("Training needs a non-empty dataset")
    names = [seq.name for seq in dataset]
    if len(set(names)) != len(names):
        raise ContractViolation(f"Training sequences need distinct names, got {names}")
    params = params or build_params(model_cfg, train_cfg.seed)
    frozen = params.freeze(*train_cfg.frozen)
    if frozen:
        logger.info(f"Frozen {len(frozen)} parameter tensors: {', '.join(frozen)}")
    lut = init_lut(identity_keys(dataset), model_cfg.embed_dim, np.random.default_rng([train_cfg.seed, 2]))
    providers = [FlowProvider(seq, mode=train_cfg.flow_mode) for seq in dataset]
    rng = np.random.default_rng([train_cfg.seed, 1])
    curve = []
    logger.info(f"Training {params.count()} parameters on {len(dataset)} sequences for "
                f"{train_cfg.iterations} steps")
    for step in range(train_cfg.iterations):
        lr = train_cfg.learning_rate(step)
        batch = sample_batch(dataset, train_cfg, rng, providers)
        params.zero_grad()
        loss, components, lut = compute_joint_loss(batch, params, model_cfg, lut, train_cfg.lam, train_cfg.unroll)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        loss.backward()
        sgd_momentum_step(params, lr, train_cfg.momentum, train_cfg.weight_decay)
        curve.append({'step': step, 'L': value, **components})
        if step % train_cfg.log_every == 0 or step == train_cfg.iterations - 1:
            logger.info(f"step {step} lr {lr:.2e} L {value:.4f} (reid {components['L_reid']:.4f}, "
                        f"mask {components['L_mask']:.4f}, remp {components['L_remp']:.4f})")
    return TrainResult(params=params, curve=curve, lut=lut)


def write_loss_curve(curve, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CURVE_HEADER)
        for row in curve:
            writer.writerow([row['step']] + [f"{row[key]:.8g}" for key in CURVE_HEADER[1:]])
    logger.info(f"Wrote loss curve ({len(curve)} steps) to {path}")
