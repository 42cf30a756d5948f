"""
Iterative inference with template expansion
Each iteration re-identifies proposals against the template set, propagates the new
starting points into tracklets, links them into mask tubes and grows the template set
with confident predictions, until an iteration adds nothing.
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config import ModelConfig
from errors import ContractViolation, DegenerateEmbeddingError
from feature_net import FeatureCache
from flow_provider import FlowProvider
from linker import dedup_starting_points, is_covered, link_tracklets, resolve_label_maps
from metrics import evaluate, jaccard
from proposals import ProposalConfig, propose
from remp import PropagationContext, propagate_bidirectional
from reid import (
    StartingPoint, Template, TemplateSet, best_match, embed_mask, match_templates, segment_proposal,
)

logger = logging.getLogger(__name__)

CORRECT_IOU = 0.5
REPORT_HEADER = ['iteration', 'candidates', 'propagated', 'templates', 'precision', 'recall', 'G']


@dataclass(frozen=True)
class InferenceConfig:
    rho_reid: float = 0.7
    rho_expand: float = 0.7
    rho_keep: float = 0.5
    max_iters: int = 4
    reid: bool = True
    theta_skip: float = 0.8
    theta_agree: float = 0.5
    workers: int = 1
    boundary_tol: int = 1
    flow_mode: str = 'ground-truth'
    flow_patch: int = 8
    flow_radius: int = 8
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 < self.rho_reid < 1.0:
            raise ContractViolation(f"reid.rho must lie in (0, 1), got {self.rho_reid}")
        if not 0.0 < self.rho_expand < 1.0:
            raise ContractViolation(f"reid.rho_expand must lie in (0, 1), got {self.rho_expand}")
        if self.rho_keep is not None and not -1.0 <= self.rho_keep < 1.0:
            raise ContractViolation(f"remp.rho_keep must lie in [-1, 1) or be empty, got {self.rho_keep}")
        if self.max_iters < 1:
            raise ContractViolation(f"infer.max_iters must be >= 1, got {self.max_iters}")
        if self.workers < 1:
            raise ContractViolation(f"infer.workers must be >= 1, got {self.workers}")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            rho_reid=cfg['reid.rho'],
            rho_expand=cfg.rho_expand,
            rho_keep=cfg['remp.rho_keep'],
            max_iters=cfg['infer.max_iters'],
            reid=cfg['infer.reid'],
            theta_skip=cfg['link.theta_skip'],
            theta_agree=cfg['link.theta_agree'],
            workers=cfg['infer.workers'],
            boundary_tol=cfg['eval.boundary_tol'],
            flow_mode=cfg['flow.mode'],
            flow_patch=cfg['flow.patch'],
            flow_radius=cfg['flow.radius'],
            proposals=ProposalConfig.from_config(cfg),
            model=ModelConfig.from_config(cfg),
        )


@dataclass
class IterationReport:
    iteration: int
    candidates: int
    propagated: int
    templates: int
    precision: float = None
    recall: float = None
    g_mean: float = None

    def as_row(self):
        def fmt(value):
            return '' if value is None else f"{value:.4f}"
        return [self.iteration, self.candidates, self.propagated, self.templates,
                fmt(self.precision), fmt(self.recall), fmt(self.g_mean)]


@dataclass
class InferenceResult:
    tubes: list
    reports: list
    templates: TemplateSet
    tracklets: list
    label_maps: dict

    @property
    def iterations(self):
        return len(self.reports)


class DyeNetRunner:
    """Runs the iterative Re-ID / Re-MP loop on one sequence"""

    def __init__(self, seq, first_frame_masks, params, cfg, ground_truth=None):
        self.seq = seq
        self.params = params.detached()
        self.cfg = cfg
        self.first_frame_masks = self._validated(first_frame_masks)
        self.ground_truth = ground_truth
        self.proposal_mode = self._proposal_mode()
        self.frames = [seq.frame(i) for i in range(1, seq.num_frames + 1)]
        self.features = FeatureCache(self.params)
        self.flows = FlowProvider(seq, self._flow_mode(), cfg.flow_patch, cfg.flow_radius)
        guard = self.keeps_identity if cfg.rho_keep is not None else None
        self.context = PropagationContext(frames=self.frames, features=self.features, flows=self.flows,
                                          params=self.params, model_cfg=cfg.model, guard=guard)
        self.templates = None
        self._outcomes = {}
        self._expanded = set()
        self._hits = set()

    def _proposal_mode(self):
        mode = self.cfg.proposals.mode
        if mode == 'gt-jitter' and not self.seq.has_masks:
            logger.warning(f"⚠️ Sequence {self.seq.name!r} has no masks for gt-jitter proposals; "
                           f"using frame-diff")
            return 'frame-diff'
        return mode

    def _flow_mode(self):
        mode = self.cfg.flow_mode
        if mode == 'ground-truth' and not self.seq.flows:
            logger.warning(f"⚠️ Sequence {self.seq.name!r} has no stored flow; using block-match")
            return 'block-match'
        return mode

    def _validated(self, masks):
        if not masks:
            raise ContractViolation("run_dyenet needs at least one first-frame mask")
        expected = (self.seq.height, self.seq.width)
        union = np.zeros(expected, dtype=bool)
        checked = {}
        for identity in sorted(masks):
            mask = np.asarray(masks[identity], dtype=bool)
            if mask.shape != expected:
                raise ContractViolation(f"First-frame mask {identity} is {mask.shape}, frames are {expected}")
            if not mask.any():
                raise ContractViolation(f"First-frame mask of identity {identity} is empty")
            if (union & mask).any():
                raise ContractViolation(f"First-frame mask of identity {identity} overlaps another identity")
            union |= mask
            checked[identity] = mask
        return checked

    # --------------------------------
    # Steps
    # --------------------------------
    def warm_features(self):
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                list(pool.map(self.features.get, self.frames))
        else:
            for frame in self.frames:
                self.features.get(frame)

    def initial_templates(self):
        templates = TemplateSet(self.first_frame_masks)
        feature = self.features.get(self.frames[0])
        for identity, mask in self.first_frame_masks.items():
            try:
                embedding = embed_mask(feature, mask, self.params, self.cfg.model.roi_m)
            except DegenerateEmbeddingError as e:
                logger.warning(f"⚠️ No first-frame template for identity {identity}: {e}")
                continue
            templates.add(Template(identity=identity, embedding=embedding, provenance='first-frame', frame_index=1))
        if len(templates) == 0:
            raise ContractViolation("No first-frame mask produced a usable template")
        return templates

    def keeps_identity(self, identity, frame_index, mask, feature):
        """True while a predicted mask still looks like one of its identity's templates"""
        own = [t for t in (self.templates or ()) if t.identity == identity]
        if not own:
            return True
        try:
            embedding = embed_mask(feature, mask, self.params, self.cfg.model.roi_m)
        except DegenerateEmbeddingError:
            return False
        if embedding is None:
            return False
        vector = embedding.vector.astype(np.float64)
        similarity = max(float(t.embedding.vector.astype(np.float64) @ vector) for t in own)
        return similarity >= self.cfg.rho_keep

    def proposal_outcomes(self, index):
        """Masks and embeddings of every proposal on a frame; fixed across iterations"""
        if index not in self._outcomes:
            frame = self.frames[index - 1]
            neighbour = self.frames[index - 2] if index > 1 else (self.frames[1] if len(self.frames) > 1 else None)
            gt_boxes = self.seq.gt_boxes(index) if self.proposal_mode == 'gt-jitter' else None
            boxes = propose(frame, neighbour, self.proposal_mode, self.cfg.proposals, gt_boxes)
            feature = self.features.get(frame)
            outcomes = [segment_proposal(feature, box, self.params, self.cfg.model.roi_m,
                                         self.seq.height, self.seq.width) for box in boxes]
            self._outcomes[index] = [o for o in outcomes if o.embedding is not None and o.mask.any()]
        return self._outcomes[index]

    def reidentify(self, templates):
        """Starting-point candidates from frames 2..N that beat rho_reid"""
        candidates = []
        for index in range(2, self.seq.num_frames + 1):
            for outcome in self.proposal_outcomes(index):
                match = match_templates(outcome.embedding, templates, self.cfg.rho_reid)
                if match is None:
                    continue
                candidates.append(StartingPoint(mask=outcome.mask, frame_index=index, identity=match.identity,
                                                similarity=match.similarity, box=outcome.box))
        return candidates

    def annotated_starts(self):
        return [StartingPoint(mask=mask, frame_index=1, identity=identity, similarity=1.0, source='annotation')
                for identity, mask in self.first_frame_masks.items()]

    def expand_templates(self, tubes, templates, iteration):
        added = 0
        for tube in tubes:
            for index in tube.frames:
                key = (tube.identity, index)
                if index == 1 or key in self._expanded:
                    continue
                try:
                    embedding = embed_mask(self.features.get(self.frames[index - 1]), tube.masks[index],
                                           self.params, self.cfg.model.roi_m)
                except DegenerateEmbeddingError as e:
                    logger.debug(f"No template from identity {tube.identity} on frame {index}: {e}")
                    continue
                if embedding is None:
                    continue
                match = best_match(embedding, templates)
                if match.identity == tube.identity and match.similarity >= self.cfg.rho_expand:
                    self._expanded.add(key)
                    templates.add(Template(identity=tube.identity, embedding=embedding,
                                           provenance=f'expanded-{iteration}', frame_index=index))
                    added += 1
        return added

    def score_candidates(self, candidates):
        """(precision, cumulative recall) of starting-point candidates against ground truth"""
        gt = self.ground_truth
        instances = {(i, k) for i in range(2, gt.num_frames + 1) for k in gt.identities()
                     if gt.instance_mask(i, k).any()}
        correct = 0
        for start in candidates:
            truth = gt.instance_mask(start.frame_index, start.identity)
            if truth.any() and jaccard(start.mask, truth) >= CORRECT_IOU:
                correct += 1
                self._hits.add((start.frame_index, start.identity))
        precision = correct / len(candidates) if candidates else None
        recall = len(self._hits & instances) / len(instances) if instances else None
        return precision, recall

    # --------------------------------
    # Loop
    # --------------------------------
    def run(self):
        self.warm_features()
        templates = self.initial_templates()
        self.templates = templates
        tracklets, reports, tubes = [], [], []
        for iteration in range(1, self.cfg.max_iters + 1):
            candidates = self.reidentify(templates) if self.cfg.reid else []
            starts = candidates + (self.annotated_starts() if iteration == 1 else [])
            propagated = 0
            for start in dedup_starting_points(starts, tracklets, self.cfg.theta_skip):
                # tracklets grown earlier in this iteration also cover later starts
                if is_covered(start, tracklets, self.cfg.theta_skip):
                    continue
                tracklets.append(propagate_bidirectional(start, self.context))
                propagated += 1
            tubes = link_tracklets(tracklets, templates, self.cfg.theta_agree)
            if propagated:
                self.expand_templates(tubes, templates, iteration)
            report = IterationReport(iteration=iteration, candidates=len(candidates),
                                     propagated=propagated, templates=len(templates))
            if self.ground_truth is not None and self.ground_truth.masks:
                report.precision, report.recall = self.score_candidates(candidates)
                maps = resolve_label_maps(tubes, self.seq.num_frames, self.seq.height, self.seq.width)
                report.g_mean = evaluate(maps, self.ground_truth, self.cfg.boundary_tol).mean_g
            reports.append(report)
            logger.info(f"Iteration {iteration}: {len(candidates)} candidates, {propagated} propagated, "
                        f"{len(templates)} templates, {len(tubes)} tubes")
            if propagated == 0:
                break
        label_maps = resolve_label_maps(tubes, self.seq.num_frames, self.seq.height, self.seq.width)
        return InferenceResult(tubes=tubes, reports=reports, templates=templates,
                               tracklets=tracklets, label_maps=label_maps)


def run_dyenet(seq, first_frame_masks, params, cfg, ground_truth=None):
    """Segment every annotated identity through the whole sequence"""
    return DyeNetRunner(seq, first_frame_masks, params, cfg, ground_truth).run()


def write_iteration_report(reports, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerow(report.as_row())
    logger.info(f"Wrote iteration report to {path}")
