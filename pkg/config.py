"""
Configuration module for the DyeNet desk pipeline
Handles environment variables, key=value config files and command-line overrides
"""
import os
from dataclasses import dataclass

from dotenv import load_dotenv

from errors import ContractViolation, LoadError

# Load environment variables from .env file
load_dotenv()


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ('on', 'true', '1', 'yes'):
        return True
    if value in ('off', 'false', '0', 'no'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text):
    return tuple(int(part) for part in str(text).split(',') if part.strip())


def _parse_str_list(text):
    return tuple(part.strip() for part in str(text).split(',') if part.strip())


def _parse_optional_float(text):
    text = str(text).strip()
    return None if text in ('', 'none') else float(text)


# key -> (parser, default, description). docs/CONFIG.md mirrors this table.
CONFIG_KEYS = {
    'feat.width': (int, 32, 'Channel width d_feat of every feature-net block'),
    'feat.depth': (int, 1, 'Number of dilated (dilation 2, stride 1) blocks after the three stride-2 blocks'),
    'proposals.mode': (str, 'gt-jitter', 'Proposal source: frame-diff, gt-jitter or exhaustive-grid'),
    'proposals.diff_threshold': (float, 0.05, 'frame-diff: absolute pixel difference threshold on [0,1] pixels'),
    'proposals.jitter_scale': (float, 0.05, 'gt-jitter: relative offset/scale noise (0 returns ground truth)'),
    'proposals.anchor_sizes': (_parse_int_list, (16, 32), 'exhaustive-grid: square anchor sizes in pixels'),
    'proposals.anchor_stride': (int, 16, 'exhaustive-grid: anchor stride in pixels'),
    'reid.rho': (float, 0.7, 'Cosine threshold rho_reid for accepting a starting point'),
    'reid.rho_expand': (_parse_optional_float, None, 'Template expansion threshold (empty: same as reid.rho)'),
    'reid.embed_dim': (int, 256, 'Embedding dimension d_embed'),
    'reid.roi_m': (int, 28, 'RoIAlign output size m'),
    'reid.head_width': (int, 32, 'Channel width of the mask and embedding heads'),
    'reid.tau': (float, 0.1, 'OIM temperature'),
    'reid.mu': (float, 0.5, 'OIM lookup-table momentum'),
    'flow.mode': (str, 'ground-truth', 'Flow source: ground-truth, block-match or zero'),
    'flow.patch': (int, 8, 'block-match patch size'),
    'flow.radius': (int, 8, 'block-match search radius'),
    'remp.theta_abort': (float, 0.1, 'Abort propagation when the warped or predicted mask falls below this fraction of the start area'),
    'remp.box_margin': (float, 0.2, 'Box margin as a fraction of the box diagonal'),
    'remp.hidden_dim': (int, 32, 'Hidden state width d'),
    'remp.attention': (_parse_bool, True, 'Region attention on/off (off is the no-attention ablation)'),
    'remp.rho_keep': (_parse_optional_float, 0.5, 'Stop a tracklet once its mask matches no own-identity template this well (empty: never)'),
    'link.theta_skip': (float, 0.8, 'Skip a starting point whose mask has at least this IoU with an existing tracklet'),
    'link.theta_agree': (float, 0.5, 'Minimum IoU on shared frames for two tracklets to merge'),
    'infer.max_iters': (int, 4, 'Hard cap on Re-ID/Re-MP iterations'),
    'infer.reid': (_parse_bool, True, 'Re-ID on/off (off is the propagation-only ablation)'),
    'infer.workers': (int, 1, 'Threads used for feature extraction'),
    'train.lambda': (float, 1.0, 'Weight of the mask and propagation losses'),
    'train.lr': (float, 1e-3, 'Initial learning rate'),
    'train.lr_drop': (float, 10.0, 'Learning-rate drop factor'),
    'train.lr_drop_interval': (int, 0, 'Steps between drops (0: one third of train.iterations)'),
    'train.momentum': (float, 0.9, 'SGD momentum'),
    'train.weight_decay': (float, 5e-4, 'SGD weight decay'),
    'train.iterations': (int, 2000, 'Number of SGD steps'),
    'train.videos_per_batch': (int, 2, 'Videos per mini-batch'),
    'train.frames_per_video': (int, 2, 'Consecutive frames per video in a mini-batch'),
    'train.unroll': (int, 1, 'Propagation steps supervised per sample (1..3)'),
    'train.frozen': (_parse_str_list, (), 'Comma-separated parameter key prefixes excluded from updates'),
    'train.seed': (int, 0, 'Seed for initialization and batch sampling'),
    'train.log_every': (int, 50, 'Log the loss every N steps'),
    'eval.boundary_tol': (int, 1, 'Boundary F tolerance in pixels'),
    'log.level': (str, 'INFO', 'Logging level of the CLI'),
}

FULL_PROFILE = {
    'reid.embed_dim': 256,
    'reid.roi_m': 28,
}

DESK_PROFILE = {
    'reid.embed_dim': 64,
    'reid.roi_m': 14,
    'reid.head_width': 16,
    'remp.hidden_dim': 16,
    'feat.width': 16,
    'train.lr': 0.01,
}

TESTING_PROFILE = {
    'feat.width': 4,
    'reid.embed_dim': 16,
    'reid.roi_m': 6,
    'reid.head_width': 4,
    'remp.hidden_dim': 4,
    'train.iterations': 4,
    'train.log_every': 1,
}

# Configuration dictionary
config = {
    'full': FULL_PROFILE,
    'desk': DESK_PROFILE,
    'testing': TESTING_PROFILE,
    'default': {},
}


def env_name(key):
    """Environment variable consulted for a config key, e.g. reid.rho -> DYE_REID_RHO"""
    return 'DYE_' + key.upper().replace('.', '_')


def parse_value(key, raw):
    if key not in CONFIG_KEYS:
        raise ContractViolation(f"Unknown config key {key!r}")
    parser = CONFIG_KEYS[key][0]
    if not isinstance(raw, str):
        return raw
    try:
        return parser(raw)
    except ValueError as e:
        raise ContractViolation(f"Invalid value {raw!r} for {key}: {e}") from None


def read_config_file(path):
    """Parse flat key=value lines; '#' starts a comment"""
    if not os.path.isfile(path):
        raise LoadError(f"Config file not found: {path}")
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            text = line.split('#', 1)[0].strip()
            if not text:
                continue
            if '=' not in text:
                raise ContractViolation(f"{path}:{number}: expected key=value, got {text!r}")
            key, raw = (part.strip() for part in text.split('=', 1))
            if key not in CONFIG_KEYS:
                raise ContractViolation(f"{path}:{number}: unknown config key {key!r}")
            values[key] = parse_value(key, raw)
    return values


def parse_overrides(pairs):
    """Turn CLI 'key=value' strings into parsed values"""
    values = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ContractViolation(f"Override must look like key=value, got {pair!r}")
        key, raw = (part.strip() for part in pair.split('=', 1))
        values[key] = parse_value(key, raw)
    return values


class Config:
    """Resolved settings: default < profile < environment < config file < overrides"""

    def __init__(self, values):
        self._values = dict(values)

    @classmethod
    def load(cls, path=None, overrides=None, profile='default'):
        if profile not in config:
            raise ContractViolation(f"Unknown profile {profile!r}; choose from {sorted(config)}")
        values = {key: spec[1] for key, spec in CONFIG_KEYS.items()}
        values.update(config[profile])
        for key in CONFIG_KEYS:
            raw = os.getenv(env_name(key))
            if raw is not None:
                values[key] = parse_value(key, raw)
        if path:
            values.update(read_config_file(path))
        for key, value in (overrides or {}).items():
            values[key] = parse_value(key, value)
        return cls(values)

    def get(self, key):
        if key not in self._values:
            raise ContractViolation(f"Unknown config key {key!r}")
        return self._values[key]

    __getitem__ = get

    def with_overrides(self, **overrides):
        """Copy with dotted keys given as double-underscore names, e.g. reid__rho=0.9"""
        values = dict(self._values)
        for name, value in overrides.items():
            key = name.replace('__', '.')
            values[key] = parse_value(key, value)
        return Config(values)

    def as_dict(self):
        return dict(self._values)

    @property
    def rho_expand(self):
        value = self._values['reid.rho_expand']
        return self._values['reid.rho'] if value is None else value


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and propagation settings shared by inference and training"""
    feat_width: int = 32
    feat_depth: int = 1
    roi_m: int = 28
    embed_dim: int = 256
    head_width: int = 32
    hidden_dim: int = 32
    attention: bool = True
    box_margin: float = 0.2
    theta_abort: float = 0.1
    tau: float = 0.1
    mu: float = 0.5

    @classmethod
    def from_config(cls, cfg):
        return cls(
            feat_width=cfg['feat.width'],
            feat_depth=cfg['feat.depth'],
            roi_m=cfg['reid.roi_m'],
            embed_dim=cfg['reid.embed_dim'],
            head_width=cfg['reid.head_width'],
            hidden_dim=cfg['remp.hidden_dim'],
            attention=cfg['remp.attention'],
            box_margin=cfg['remp.box_margin'],
            theta_abort=cfg['remp.theta_abort'],
            tau=cfg['reid.tau'],
            mu=cfg['reid.mu'],
        )
