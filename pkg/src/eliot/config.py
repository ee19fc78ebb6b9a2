"""Run configuration: a flat dotted-key text format covering dataset
location, method selection, network hyperparameters (keys mirror the
reference table: enc.layers, dec.dim, mlp_pn, ...), training schedule,
augmentation, ICP settings, and scene synthesis."""

import ast
from dataclasses import dataclass, field, replace

from .cloud_io import (AugmentParams, DEFAULT_MAX_RANGE, DEFAULT_MIN_RANGE,
                       SceneSpec)
from .errors import ConfigError
from .icp import IcpParams
from .model import NetConfig

METHODS = ("eliot", "eliot-knn", "icp-po2po", "icp-po2pl")
LEARNED_METHODS = ("eliot", "eliot-knn")


@dataclass
class RunConfig:
    method: str = "eliot"
    data_root: str = None
    sequence: str = "00"
    out_dir: str = None
    seed: int = 0

    # ingestion
    min_range: float = DEFAULT_MIN_RANGE
    max_range: float = DEFAULT_MAX_RANGE
    zero_features: bool = False

    # training schedule
    epochs: int = 1
    steps: int = None          # optional hard cap on optimizer steps
    batch_size: int = 4
    lr: float = 1e-4
    checkpoint_every: int = 100
    train_augment: bool = False  # re-perturb pairs every step

    # rigid perturbation bounds: drive synthesized pair motion, and training
    # augmentation when train.augment is on
    aug_max_translation: float = 0.5
    aug_max_rotation: float = 0.1

    net: NetConfig = field(default_factory=NetConfig)
    icp: IcpParams = field(default_factory=IcpParams)
    icp_warm_start: bool = True

    # scene synthesis
    scene: SceneSpec = field(default_factory=SceneSpec)
    synth_pairs: int = 8
    synth_mode: str = "pairs"  # "pairs" | "sequence"
    synth_frames: int = 50
    synth_step_translation: tuple = (2.2, 0.0, 0.0)  # per-frame motion, meters
    synth_step_yaw: float = 0.004                    # per-frame rotation, radians

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.synth_mode not in ("pairs", "sequence"):
            raise ConfigError(f"synth mode must be pairs|sequence, got {self.synth_mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        self.net.validate()
        return self

    def augment_params(self, seed):
        return AugmentParams(max_translation=self.aug_max_translation,
                             max_rotation=self.aug_max_rotation, seed=seed)


# dotted config key -> (section, attribute)
_KEYMAP = {
    "method": ("run", "method"),
    "data.root": ("run", "data_root"),
    "data.sequence": ("run", "sequence"),
    "data.min_range": ("run", "min_range"),
    "data.max_range": ("run", "max_range"),
    "data.zero_features": ("run", "zero_features"),
    "out": ("run", "out_dir"),
    "seed": ("run", "seed"),
    "train.epochs": ("run", "epochs"),
    "train.steps": ("run", "steps"),
    "train.batch_size": ("run", "batch_size"),
    "train.lr": ("run", "lr"),
    "train.checkpoint_every": ("run", "checkpoint_every"),
    "train.augment": ("run", "train_augment"),
    "aug.max_translation": ("run", "aug_max_translation"),
    "aug.max_rotation": ("run", "aug_max_rotation"),
    "icp.max_iterations": ("icp", "max_iterations"),
    "icp.convergence_tol": ("icp", "convergence_tol"),
    "icp.max_correspondence_dist": ("icp", "max_correspondence_dist"),
    "icp.normal_k": ("icp", "normal_k"),
    "icp.warm_start": ("run", "icp_warm_start"),
    "scene.planes": ("scene", "planes"),
    "scene.boxes": ("scene", "boxes"),
    "scene.points_per_plane": ("scene", "points_per_plane"),
    "scene.points_per_box": ("scene", "points_per_box"),
    "scene.scatter_points": ("scene", "scatter_points"),
    "scene.extent": ("scene", "extent"),
    "synth.pairs": ("run", "synth_pairs"),
    "synth.mode": ("run", "synth_mode"),
    "synth.frames": ("run", "synth_frames"),
    "synth.step_translation": ("run", "synth_step_translation"),
    "synth.step_yaw": ("run", "synth_step_yaw"),
    # network keys, named after the reference hyperparameter table
    "n_key": ("net", "n_key"),
    "sa_radii": ("net", "sa_radii"),
    "sa_mlps": ("net", "sa_mlps"),
    "max_samples": ("net", "max_samples"),
    "feature_dim": ("net", "feature_dim"),
    "fps_start": ("net", "fps_start"),
    "L": ("net", "pe_bands"),
    "pe.method": ("net", "pe_method"),
    "pe.normalization": ("net", "pe_normalize"),
    "pe.gauss_scale": ("net", "pe_gauss_scale"),
    "pe.extent": ("net", "pe_extent"),
    "enc.layers": ("net", "enc_layers"),
    "enc.dim": ("net", "enc_dim"),
    "enc.heads": ("net", "enc_heads"),
    "enc.ffn": ("net", "enc_ffn"),
    "enc.dropout": ("net", "enc_dropout"),
    "enc.activation": ("net", "activation"),
    "dec.layers": ("net", "dec_layers"),
    "dec.dim": ("net", "dec_dim"),
    "dec.heads": ("net", "dec_heads"),
    "dec.ffn": ("net", "dec_ffn"),
    "dec.dropout": ("net", "dec_dropout"),
    "num_queries": ("net", "num_queries"),
    "mlp_pn": ("net", "head_mlp_pn"),
    "mlp_fc": ("net", "head_mlp_fc"),
    "lambda_dual": ("net", "lambda_dual"),
    "flow.embedding": ("net", "flow_embedding"),
    "n_group": ("net", "n_group"),
    "fe_mlp": ("net", "fe_mlp"),
}

_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "on": True, "off": False}


def parse_value(text):
    """Literal-eval numbers/lists/tuples, recognize bare booleans, fall back
    to the raw string."""
    text = text.strip()
    low = text.lower()
    if low in _BOOL_WORDS:
        return _BOOL_WORDS[low]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text, source="<config>"):
    """Parse `key = value` lines (''#'' comments) into a flat dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = parse_value(val)
    return values


def load_config(path=None, overrides=None):
    """Build a validated RunConfig from an optional file plus overrides."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), source=str(path)))
    if overrides:
        values.update(overrides)
    return config_from_mapping(values)


def _coerce_tuple(value):
    if isinstance(value, list):
        return tuple(_coerce_tuple(v) for v in value)
    return value


def config_from_mapping(values):
    run_kwargs = {}
    net_kwargs = {}
    icp_kwargs = {}
    scene_kwargs = {}
    buckets = {"run": run_kwargs, "net": net_kwargs, "icp": icp_kwargs,
               "scene": scene_kwargs}
    for key, value in values.items():
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r}")
        section, attr = _KEYMAP[key]
        buckets[section][attr] = _coerce_tuple(value)
    cfg = RunConfig(**run_kwargs)
    if net_kwargs:
        cfg = replace(cfg, net=replace(cfg.net, **net_kwargs))
    if icp_kwargs:
        cfg = replace(cfg, icp=IcpParams(**{**cfg.icp.__dict__, **icp_kwargs}))
    if scene_kwargs:
        cfg = replace(cfg, scene=replace(cfg.scene, **scene_kwargs))
    return cfg.validate()


def snapshot(cfg):
    """Flat dotted-key snapshot of a RunConfig, for run manifests."""
    out = {}
    reverse = {}
    for key, (section, attr) in _KEYMAP.items():
        reverse[(section, attr)] = key
    sections = {"run": cfg, "net": cfg.net, "icp": cfg.icp, "scene": cfg.scene}
    for (section, attr), key in sorted(reverse.items(), key=lambda kv: kv[1]):
        obj = sections[section]
        if hasattr(obj, attr):
            value = getattr(obj, attr)
            if isinstance(value, tuple):
                value = _tuple_to_list(value)
            out[key] = value
    return out


def _tuple_to_list(value):
    if isinstance(value, tuple):
        return [_tuple_to_list(v) for v in value]
    return value
