"""
Starting-point deduplication and greedy tracklet linking
Tracklets are merged into one mask tube per identity when they agree on every
frame they share; label maps resolve pixels claimed by several tubes.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ContractViolation
from metrics import jaccard

logger = logging.getLogger(__name__)


@dataclass
class MaskTube:
    identity: int
    masks: dict = field(default_factory=dict)       # frame index -> boolean mask
    tracklets: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)      # frame index -> similarity of the supplying tracklet

    @property
    def frames(self):
        return sorted(self.masks)

    @property
    def similarity(self):
        return max((t.similarity for t in self.tracklets), default=0.0)


def start_order(start):
    return (-start.similarity, start.frame_index, start.identity)


def sort_starting_points(starts):
    """Similarity descending; ties go to the lower frame index, then the lower identity"""
    return sorted(starts, key=start_order)


def is_covered(start, tracklets, theta_skip):
    """True when some tracklet already holds a mask on the start's frame overlapping it by >= theta_skip"""
    for tracklet in tracklets:
        mask = tracklet.masks.get(start.frame_index)
        if mask is not None and jaccard(start.mask, mask) >= theta_skip:
            return True
    return False


def dedup_starting_points(starts, existing, theta_skip=0.8):
    kept = []
    for start in sort_starting_points(starts):
        if is_covered(start, existing, theta_skip):
            logger.debug(f"Skipped starting point of identity {start.identity} on frame {start.frame_index} "
                         f"(similarity {start.similarity:.3f}): already covered")
            continue
        kept.append(start)
    return kept


def contradicts(a, b, theta_agree=0.5):
    """Two tracklets contradict when any frame they share has mask IoU below theta_agree"""
    for frame in set(a.masks) & set(b.masks):
        if jaccard(a.masks[frame], b.masks[frame]) < theta_agree:
            return True
    return False


def tracklet_order(tracklet):
    return (-tracklet.similarity, tracklet.origin.frame_index, tracklet.identity)


def link_tracklets(tracklets, templates, theta_agree=0.5):
    """Greedy linking: the best tracklet of each identity seeds its tube, later ones merge if consistent"""
    if len(templates) == 0:
        raise ContractViolation("link_tracklets needs a non-empty template set")
    tubes = {}
    for tracklet in sorted(tracklets, key=tracklet_order):
        if tracklet.identity not in templates.identities:
            logger.warning(f"Discarded tracklet with unknown identity {tracklet.identity}")
            continue
        tube = tubes.get(tracklet.identity)
        if tube is None:
            tube = tubes[tracklet.identity] = MaskTube(identity=tracklet.identity)
        elif any(contradicts(member, tracklet, theta_agree) for member in tube.tracklets):
            logger.debug(f"Discarded tracklet of identity {tracklet.identity} from frame "
                         f"{tracklet.origin.frame_index}: contradicts the tube")
            continue
        tube.tracklets.append(tracklet)
        for frame, mask in tracklet.masks.items():
            # shared frames keep the mask of the earlier, higher-similarity tracklet
            if frame not in tube.masks:
                tube.masks[frame] = mask
                tube.scores[frame] = tracklet.similarity
    return [tubes[k] for k in sorted(tubes)]


def replay_contradictions(tube, theta_agree=0.5):
    """Pairs (i, j) of contributing tracklets that violate the agreement rule"""
    pairs = []
    members = tube.tracklets
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            if contradicts(members[i], members[j], theta_agree):
                pairs.append((i, j))
    return pairs


def tube_is_consistent(tube, theta_agree=0.5):
    if replay_contradictions(tube, theta_agree):
        return False
    if any(t.identity != tube.identity for t in tube.tracklets):
        return False
    covered = set()
    for t in tube.tracklets:
        covered |= set(t.masks)
    return covered == set(tube.masks)


def resolve_label_maps(tubes, num_frames, height, width):
    """Instance label map per frame; overlapping claims go to the higher score, then the lower identity"""
    maps = {}
    for frame in range(1, num_frames + 1):
        labels = np.zeros((height, width), dtype=np.uint8)
        best = np.full((height, width), -np.inf)
        for tube in sorted(tubes, key=lambda t: t.identity):
            mask = tube.masks.get(frame)
            if mask is None:
                continue
            score = tube.scores[frame]
            claim = mask & (score > best)
            labels[claim] = tube.identity
            best[claim] = score
        maps[frame] = labels
    return maps
