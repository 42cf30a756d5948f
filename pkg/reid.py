"""
Re-identification
RoIAlign over the shared feature maps, the mask and embedding sub-networks,
template matching and the online instance matching loss.
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import ContractViolation, DegenerateEmbeddingError
from feature_net import FEATURE_STRIDE
from proposals import mask_to_box
from tensor_core import (
    Tensor, add, bilinear_sample, concat, conv2d, l2_normalize, matmul, mean, relu, reshape,
    scale, sigmoid, softmax_cross_entropy, vector_norm,
)

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
DEGENERATE_NORM = 1e-8


@dataclass
class RoiFeature:
    tensor: Tensor   # C x m x m
    box: object
    frame_index: int

    @property
    def size(self):
        return self.tensor.shape[-1]


@dataclass
class Embedding:
    """Unit-norm identity embedding; tensor keeps the autodiff graph during training"""
    vector: np.ndarray
    tensor: Tensor = None

    def cosine(self, other):
        return float(np.dot(self.vector.astype(np.float64), other.vector.astype(np.float64)))


@dataclass
class Template:
    identity: int
    embedding: Embedding
    provenance: str = 'first-frame'   # or 'expanded-<iteration>'
    frame_index: int = 1


@dataclass
class Match:
    identity: int
    similarity: float
    template_index: int


class TemplateSet:
    """Ordered, grow-only collection of identity templates"""

    def __init__(self, identities, templates=()):
        self.identities = frozenset(identities)
        self._templates = []
        for template in templates:
            self.add(template)

    def add(self, template):
        if template.identity not in self.identities:
            raise ContractViolation(
                f"Template identity {template.identity} is not one of the annotated identities "
                f"{sorted(self.identities)}")
        self._templates.append(template)

    def __len__(self):
        return len(self._templates)

    def __iter__(self):
        return iter(self._templates)

    def __getitem__(self, index):
        return self._templates[index]

    def matrix(self):
        return np.stack([t.embedding.vector.astype(np.float64) for t in self._templates])

    def provenance_counts(self):
        counts = {}
        for template in self._templates:
            counts[template.provenance] = counts.get(template.provenance, 0) + 1
        return counts


@dataclass
class StartingPoint:
    mask: np.ndarray   # full-frame boolean mask
    frame_index: int
    identity: int
    similarity: float
    box: object = None
    source: str = 'reid'

    def __post_init__(self):
        if not np.any(self.mask):
            raise ContractViolation(f"Starting point on frame {self.frame_index} has an empty mask")


@dataclass
class ProposalOutcome:
    """Mask and embedding of one proposal box"""
    box: object
    frame_index: int
    probabilities: np.ndarray
    mask: np.ndarray
    embedding: Embedding = None
    match: Match = None


# --------------------------------
# RoIAlign and mask paste-back
# --------------------------------
def cell_centers(box, m):
    """m x m x 2 grid of (x, y) cell centers of the box in frame coordinates"""
    xs = box.x0 + (np.arange(m, dtype=np.float64) + 0.5) * (box.width / m)
    ys = box.y0 + (np.arange(m, dtype=np.float64) + 0.5) * (box.height / m)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def roi_align(feature, box, m):
    """Bilinear m x m samples at the box's cell centers mapped into feature coordinates"""
    if m < 2:
        raise ContractViolation(f"roi size m must be >= 2, got {m}")
    points = cell_centers(box, m) / FEATURE_STRIDE
    return RoiFeature(tensor=bilinear_sample(feature.tensor, points), box=box,
                      frame_index=feature.frame_index)


def roi_mask_target(mask, box, m):
    """Binary m x m target: the full-resolution mask sampled at the box's cell centers"""
    # pixel (r, c) covers [c, c+1) x [r, r+1); its value sits at index c - 0.5 in sample space
    points = cell_centers(box, m) - 0.5
    sampled = bilinear_sample(Tensor(mask.astype(np.float32)[None]), points).data[0]
    return (sampled >= 0.5).astype(np.float32)


def paste_mask(probabilities, box, height, width):
    """Resize an m x m probability map into the box at full resolution; zero outside the box"""
    probs = np.asarray(probabilities, dtype=np.float64).reshape(probabilities.shape[-2:])
    m_rows, m_cols = probs.shape
    out = np.zeros((height, width), dtype=np.float64)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    inside_x = (cols >= box.x0) & (cols < box.x1)
    inside_y = (rows >= box.y0) & (rows < box.y1)
    if not inside_x.any() or not inside_y.any():
        return out
    u = np.clip((cols[inside_x] - box.x0) / box.width * m_cols - 0.5, 0, m_cols - 1)
    v = np.clip((rows[inside_y] - box.y0) / box.height * m_rows - 0.5, 0, m_rows - 1)
    gu, gv = np.meshgrid(u, v)
    sampled = bilinear_sample(Tensor(probs[None]), np.stack([gu, gv], axis=-1)).data[0]
    out[np.ix_(inside_y, inside_x)] = sampled
    return out


# --------------------------------
# Sub-networks
# --------------------------------
def init_reid_params(store, model_cfg, rng):
    c, w = model_cfg.feat_width, model_cfg.head_width
    store.add_conv('reid.mask.conv1', w, c, 3, rng)
    store.add_conv('reid.mask.conv2', w, w, 3, rng)
    store.add_conv('reid.mask.out', 1, w, 1, rng)
    store.add_conv('reid.embed.conv1', w, c, 3, rng)
    store.add_conv('reid.embed.conv2', w, w, 3, rng)
    store.add('reid.embed.fc.w', rng.normal(0.0, np.sqrt(2.0 / w), (w, model_cfg.embed_dim)))
    store.add('reid.embed.fc.b', np.zeros(model_cfg.embed_dim))


def mask_head_logits(roi, params):
    x = relu(conv2d(roi.tensor, params['reid.mask.conv1.w'], params['reid.mask.conv1.b'], padding=1))
    x = relu(conv2d(x, params['reid.mask.conv2.w'], params['reid.mask.conv2.b'], padding=1))
    return conv2d(x, params['reid.mask.out.w'], params['reid.mask.out.b'])


def mask_head(roi, params):
    """1 x m x m foreground probabilities"""
    return sigmoid(mask_head_logits(roi, params))


def embed_head(roi, params):
    x = relu(conv2d(roi.tensor, params['reid.embed.conv1.w'], params['reid.embed.conv1.b'], padding=1))
    x = relu(conv2d(x, params['reid.embed.conv2.w'], params['reid.embed.conv2.b'], stride=2, padding=1))
    pooled = reshape(mean(x, axis=(1, 2)), (1, x.shape[0]))
    raw = reshape(add(matmul(pooled, params['reid.embed.fc.w']), params['reid.embed.fc.b']), (-1,))
    norm = vector_norm(raw)
    if norm < DEGENERATE_NORM:
        raise DegenerateEmbeddingError(norm)
    unit = l2_normalize(raw)
    return Embedding(vector=unit.data.copy(), tensor=unit)


def embed_mask(feature, mask, params, m):
    """Embedding of the object under a binary mask (its tight box), or None for an empty mask"""
    box = mask_to_box(mask)
    if box is None:
        return None
    return embed_head(roi_align(feature, box, m), params)


def segment_proposal(feature, box, params, m, height, width):
    """Run both heads on one proposal box; returns a ProposalOutcome with the pasted mask"""
    roi = roi_align(feature, box, m)
    probs = mask_head(roi, params).data[0]
    full = paste_mask(probs, box, height, width)
    outcome = ProposalOutcome(box=box, frame_index=feature.frame_index, probabilities=probs,
                              mask=full > MASK_THRESHOLD)
    try:
        outcome.embedding = embed_head(roi, params)
    except DegenerateEmbeddingError as e:
        logger.debug(f"Rejected proposal {box.as_tuple()} on frame {feature.frame_index}: {e}")
    return outcome


# --------------------------------
# Matching and loss
# --------------------------------
def best_match(embedding, templates):
    """Template with the highest cosine similarity; ties keep the earliest template"""
    if len(templates) == 0:
        raise ContractViolation("Template matching needs a non-empty template set")
    sims = templates.matrix() @ embedding.vector.astype(np.float64)
    best = int(np.argmax(sims))
    return Match(identity=templates[best].identity, similarity=float(sims[best]), template_index=best)


def match_templates(embedding, templates, rho):
    """Best template if its similarity beats rho strictly, else None"""
    if not 0.0 < rho < 1.0:
        raise ContractViolation(f"rho_reid must lie in (0, 1), got {rho}")
    match = best_match(embedding, templates)
    return match if match.similarity > rho else None


def init_lut(identities, dim, rng):
    """Lookup table of random unit rows, one per identity key"""
    lut = {}
    for key in sorted(identities):
        row = rng.normal(size=dim)
        lut[key] = row / np.linalg.norm(row)
    return lut


def oim_loss(embeddings, labels, lut, tau=0.1, mu=0.5):
    """Softmax over cosine similarities to the lookup table rows, then momentum row updates.

    Returns (loss tensor of shape (1,), updated lookup table). The input table is not modified.
    """
    if tau <= 0:
        raise ContractViolation(f"OIM temperature must be positive, got {tau}")
    if not 0.0 <= mu <= 1.0:
        raise ContractViolation(f"OIM momentum must lie in [0, 1], got {mu}")
    if len(embeddings) != len(labels) or not embeddings:
        raise ContractViolation(f"oim_loss got {len(embeddings)} embeddings for {len(labels)} labels")
    keys = sorted(lut)
    index = {key: i for i, key in enumerate(keys)}
    unknown = [label for label in labels if label not in index]
    if unknown:
        raise ContractViolation(f"OIM labels without a lookup-table row: {unknown}")

    dtype = np.result_type(*[e.tensor.dtype for e in embeddings])
    table = Tensor(np.stack([lut[key] for key in keys]).T.astype(dtype))
    stacked = concat([reshape(e.tensor, (1, -1)) for e in embeddings], axis=0)
    logits = scale(matmul(stacked, table), 1.0 / tau)
    loss = softmax_cross_entropy(logits, [index[label] for label in labels])

    updated = {key: np.array(row, dtype=np.float64) for key, row in lut.items()}
    for embedding, label in zip(embeddings, labels):
        row = mu * updated[label] + (1.0 - mu) * embedding.vector.astype(np.float64)
        norm = np.linalg.norm(row)
        if norm > DEGENERATE_NORM:
            updated[label] = row / norm
    return loss, updated
