"""
Evaluation metrics
Region similarity J, boundary F-measure, their mean G, mIoU and the per-attribute
breakdown, with CSV, markdown and HTML renderings of the report.
"""
import csv
import io
import logging
from dataclasses import dataclass, field

import markdown
import numpy as np
from scipy import ndimage

from errors import ContractViolation

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)

SIZE_BINS = ((0.02, 'small'), (0.08, 'medium'))
OCCLUSION_BINS = ((0.1, 'heavy'), (0.75, 'partial'))
SCALE_VARIATION_RATIO = 0.5
ATTRIBUTES = ('size', 'occlusion', 'scale_variation')


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def jaccard(pred, gt):
    """Intersection over union; two empty masks score 1.0"""
    pred, gt = _check_pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask):
    """Mask pixels with a 4-neighbour in the background; the frame edge is not background"""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=FOUR_CONNECTED, border_value=1)


def _within(boundary_map, tol):
    if tol == 0:
        return boundary_map
    return ndimage.binary_dilation(boundary_map, structure=np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool))


def boundary_f(pred, gt, tol=1):
    """F-measure of boundary pixels matched within tol pixels (Chebyshev distance)"""
    pred, gt = _check_pair(pred, gt)
    if tol < 0:
        raise ContractViolation(f"Boundary tolerance must be >= 0, got {tol}")
    pred_b, gt_b = boundary(pred), boundary(gt)
    n_pred, n_gt = np.count_nonzero(pred_b), np.count_nonzero(gt_b)
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = np.count_nonzero(pred_b & _within(gt_b, tol)) / n_pred
    recall = np.count_nonzero(gt_b & _within(pred_b, tol)) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def g_mean(j, f):
    if not (0.0 <= j <= 1.0 and 0.0 <= f <= 1.0):
        raise ContractViolation(f"J and F must lie in [0, 1], got J={j}, F={f}")
    return (j + f) / 2


# --------------------------------
# Attributes
# --------------------------------
def _bbox_area(mask):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return 0
    return int((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))


def instance_attributes(gt_masks):
    """Size, occlusion and scale-variation labels of one instance from its ground-truth masks"""
    first = gt_masks[0]
    first_area = int(np.count_nonzero(first))
    fraction = first_area / first.size
    size = next((name for limit, name in SIZE_BINS if fraction < limit), 'large')
    ratio = min(np.count_nonzero(m) for m in gt_masks) / first_area if first_area else 0.0
    occlusion = next((name for limit, name in OCCLUSION_BINS if ratio < limit), 'none')
    areas = [a for a in (_bbox_area(m) for m in gt_masks) if a > 0]
    varied = bool(areas) and min(areas) / max(areas) < SCALE_VARIATION_RATIO
    return {'size': size, 'occlusion': occlusion, 'scale_variation': 'yes' if varied else 'no'}


# --------------------------------
# Report
# --------------------------------
@dataclass
class InstanceScore:
    sequence: str
    identity: int
    j: float
    f: float
    g: float
    frame_ious: list = field(default_factory=list)
    attributes: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    instances: list = field(default_factory=list)

    def _mean(self, attr):
        values = [getattr(s, attr) for s in self.instances]
        return float(np.mean(values)) if values else 0.0

    @property
    def mean_j(self):
        return self._mean('j')

    @property
    def mean_f(self):
        return self._mean('f')

    @property
    def mean_g(self):
        return self._mean('g')

    @property
    def miou(self):
        """Frame-weighted mean IoU over every evaluated (instance, frame) pair"""
        ious = [iou for s in self.instances for iou in s.frame_ious]
        return float(np.mean(ious)) if ious else 0.0

    def breakdown(self):
        """attribute -> value -> (mean J, mean F, mean G, count)"""
        table = {}
        for attr in ATTRIBUTES:
            groups = {}
            for s in self.instances:
                groups.setdefault(s.attributes.get(attr), []).append(s)
            table[attr] = {
                value: (float(np.mean([s.j for s in members])), float(np.mean([s.f for s in members])),
                        float(np.mean([s.g for s in members])), len(members))
                for value, members in sorted(groups.items())
            }
        return table

    def extend(self, other):
        self.instances.extend(other.instances)
        return self


def _crop(label_map, height, width):
    return np.asarray(label_map)[:height, :width]


def evaluate(pred_maps, gt_seq, tol=1):
    """Score predicted label maps against a sequence's ground truth; frame 1 is not scored"""
    if not gt_seq.masks:
        raise ContractViolation(f"Sequence {gt_seq.name!r} has no ground-truth masks to evaluate against")
    if gt_seq.num_frames < 2:
        raise ContractViolation(f"Sequence {gt_seq.name!r} needs at least two frames to evaluate")
    height, width = gt_seq.original_size
    gt_maps = [_crop(m, height, width) for m in gt_seq.masks]
    identities = sorted(int(k) for k in np.unique(gt_maps[0]) if k != 0)
    empty = np.zeros((height, width), dtype=np.uint8)
    report = EvalReport()
    for identity in identities:
        js, fs = [], []
        for frame in range(2, gt_seq.num_frames + 1):
            pred = pred_maps.get(frame)
            pred = empty if pred is None else _crop(pred, height, width)
            if pred.shape != (height, width):
                raise ContractViolation(f"Prediction for frame {frame} is {pred.shape}, expected {(height, width)}")
            p, g = pred == identity, gt_maps[frame - 1] == identity
            js.append(jaccard(p, g))
            fs.append(boundary_f(p, g, tol))
        j, f = float(np.mean(js)), float(np.mean(fs))
        report.instances.append(InstanceScore(
            sequence=gt_seq.name, identity=identity, j=j, f=f, g=g_mean(j, f), frame_ious=js,
            attributes=instance_attributes([m == identity for m in gt_maps])))
    logger.debug(f"Evaluated {len(identities)} instances of {gt_seq.name!r}")
    return report


CSV_HEADER = ['sequence', 'identity', 'J', 'F', 'G', 'size', 'occlusion', 'scale_variation']


def _fmt(value):
    return f"{value:.4f}"


def to_csv(report):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(CSV_HEADER)
    for s in report.instances:
        writer.writerow([s.sequence, s.identity, _fmt(s.j), _fmt(s.f), _fmt(s.g)]
                        + [s.attributes.get(a, '') for a in ATTRIBUTES])
    writer.writerow(['mean', '', _fmt(report.mean_j), _fmt(report.mean_f), _fmt(report.mean_g), '', '', ''])
    writer.writerow(['mIoU', '', _fmt(report.miou), '', '', '', '', ''])
    return buffer.getvalue()


def to_markdown(report):
    lines = ['# Evaluation report', '',
             '| sequence | identity | J | F | G |', '|---|---|---|---|---|']
    for s in report.instances:
        lines.append(f"| {s.sequence} | {s.identity} | {_fmt(s.j)} | {_fmt(s.f)} | {_fmt(s.g)} |")
    lines += ['', f"Mean J {_fmt(report.mean_j)}, mean F {_fmt(report.mean_f)}, "
                  f"mean G {_fmt(report.mean_g)}, mIoU {_fmt(report.miou)}", '',
              '## By attribute', '',
              '| attribute | value | J | F | G | instances |', '|---|---|---|---|---|---|']
    for attr, values in report.breakdown().items():
        for value, (j, f, g, count) in values.items():
            lines.append(f"| {attr} | {value} | {_fmt(j)} | {_fmt(f)} | {_fmt(g)} | {count} |")
    return '\n'.join(lines) + '\n'


def to_html(report):
    body = markdown.markdown(to_markdown(report), extensions=['tables'])
    return f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Evaluation report</title></head>\n<body>\n{body}\n</body></html>\n"
