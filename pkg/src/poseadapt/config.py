"""Configuration tree, flat dotted-key overrides, and config hashing.

Config files are flat ``section.key = value`` lines (``#`` comments); CLI
``--set section.key=value`` overrides file values.  Unknown keys are hard
errors.  Defaults marked [recipe] in the help table follow the training
recipe this package implements; [choice] marks implementation choices.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .core import ConfigError

# toy creature joint layout (K = 10): 0 eye, 1 chin, 2/3 left/right shoulder,
# 4 hip, 5/6 left/right elbow, 7/8 left/right front hoof, 9 tail tip
TOY_GROUP_MAP = "eye:0;chin:1;shoulder:2,3;hip:4;elbow:5,6;hoof:7,8;tail:9"
TOY_FLIP_PAIRS = "2-3,5-6,7-8"


@dataclass
class DataConfig:
    source_root: str = ""
    target_root: str = ""
    input_size: int = 256
    joint_count: int = 10
    sigma: float = 2.0
    group_map: str = TOY_GROUP_MAP
    flip_pairs: str = TOY_FLIP_PAIRS


@dataclass
class ModelConfig:
    backbone: str = "tiny"                 # tiny | resnet
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    decoder_channels: int = 256
    refine_mid_channels: int = 128
    dc_channels: tuple = ()                # () = derive from input spatial size
    dc_input: str = "multiscale"           # multiscale | features
    norm: str = "group"                    # group | batch
    leaky_slope: float = 0.2
    eval_head: str = "refined"             # refined | mdam


@dataclass
class PerturbConfig:
    rotation_max: float = 45.0
    scale_range: tuple = (0.6, 1.4)
    flip_prob: float = 0.5
    noise_sigma_max: float = 0.1
    occlude_prob: float = 0.5
    occlude_frac_range: tuple = (0.1, 0.25)
    occlude_fill: float = 0.5


@dataclass
class MixupConfig:
    enabled: bool = True
    alpha: float = 0.2


@dataclass
class ScheduleConfig:
    sd_max: float = 90.0
    mt_max: float = 90.0
    ramp_epochs: int = 10
    t_start: float = 15.0
    t_end: float = 8.0
    r_start: float = 15.0
    r_end: float = 8.0
    decay_epochs: int = 15
    adv: float = 0.0005
    alpha_min: int = 9
    lr: float = 0.00025
    poly_power: float = 0.9
    stage1_milestones: tuple = (60, 90)
    stage1_gamma: float = 0.1


@dataclass
class TrainerConfig:
    batch_size: int = 16
    epochs_stage1: int = 100
    epochs_stage2: int = 80
    confidence_threshold: float = 0.5
    seed: int = 0
    ema_alpha: float = 0.999
    adv_enabled: bool = True
    sd_enabled: bool = True
    mt_enabled: bool = True
    pseudo_enabled: bool = True
    selection_enabled: bool = True
    augment_stage1: bool = True
    log_every: int = 1
    num_threads: int = 0                   # 0 = leave torch default


@dataclass
class EvalConfig:
    alpha: float = 0.05
    mode: str = "visible"                  # visible | full
    batch_size: int = 32


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: PerturbConfig = field(default_factory=PerturbConfig)
    consistency: PerturbConfig = field(default_factory=lambda: PerturbConfig(scale_range=(1.0, 1.0)))
    mixup: MixupConfig = field(default_factory=MixupConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


HELP = {
    "data.source_root": "labeled source dataset split directory",
    "data.target_root": "unlabeled target dataset split directory",
    "data.input_size": "square input resolution; heatmaps are input_size/4 [choice]",
    "data.joint_count": "number of joints K",
    "data.sigma": "Gaussian radius of ground-truth heatmap peaks, px [choice]",
    "data.group_map": "group:joint,joint;... report grouping",
    "data.flip_pairs": "a-b,... symmetric joint channel pairs swapped on flip",
    "model.backbone": "feature extractor: tiny (default, CPU-friendly) or resnet [choice]",
    "model.decoder_channels": "width of the three upsampling stages [recipe: 256]",
    "model.dc_channels": "domain classifier widths; empty = derived [recipe: 64,...,1024]",
    "model.dc_input": "domain classifier input: multiscale or features [choice]",
    "model.eval_head": "head decoded at evaluation: refined or mdam [choice]",
    "mixup.alpha": "Beta(alpha, alpha) mixing parameter [choice]",
    "schedule.sd_max": "self-distillation weight plateau [recipe: 90]",
    "schedule.mt_max": "teacher-consistency weight plateau [recipe: 90]",
    "schedule.ramp_epochs": "epochs to ramp sd/mt weights [recipe: 10]",
    "schedule.t_start": "pseudo-loss weight at epoch 0 (mdam head) [recipe: 15]",
    "schedule.t_end": "pseudo-loss weight floor (mdam head) [recipe: 8]",
    "schedule.r_start": "pseudo-loss weight at epoch 0 (refined head) [recipe: 15]",
    "schedule.r_end": "pseudo-loss weight floor (refined head) [recipe: 8]",
    "schedule.decay_epochs": "epochs to decay pseudo-loss weights [recipe: 15]",
    "schedule.adv": "adversarial loss weight [recipe: 0.0005]",
    "schedule.alpha_min": "floor of the per-epoch joint cut-off index [recipe: K/2]",
    "schedule.lr": "base learning rate [recipe: 0.00025]",
    "schedule.poly_power": "polynomial LR decay power, adaptation stage [recipe: 0.9]",
    "schedule.stage1_milestones": "pretraining LR step epochs [recipe: 60,90]",
    "schedule.stage1_gamma": "pretraining LR step factor [choice]",
    "train.epochs_stage1": "source pretraining epochs [recipe: 100]",
    "train.epochs_stage2": "adaptation epochs [recipe: 80]",
    "train.confidence_threshold": "initial pseudo-label confidence filter [choice]",
    "train.ema_alpha": "teacher EMA smoothing [choice: 0.999]",
    "train.adv_enabled": "toggle adversarial alignment (ablations)",
    "train.sd_enabled": "toggle inner self-distillation loop (ablations)",
    "train.mt_enabled": "toggle outer teacher-consistency loop (ablations)",
    "train.pseudo_enabled": "toggle pseudo-label losses (ablations)",
    "train.selection_enabled": "toggle small-loss joint selection (ablations)",
}


def _sections(cfg: TrainConfig):
    for f in fields(cfg):
        yield f.name, getattr(cfg, f.name)


def flatten_config(cfg: TrainConfig) -> dict:
    """TrainConfig -> {dotted key: value}, deterministic order."""
    out = {}
    for sec_name, sec in _sections(cfg):
        for f in fields(sec):
            out[f"{sec_name}.{f.name}"] = getattr(sec, f.name)
    return out


def config_keys(cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    for key, value in flatten_config(cfg).items():
        yield key, value, HELP.get(key, "")


def _coerce(key: str, raw, current):
    if isinstance(raw, type(current)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            if not text:
                return ()
            elem = float if any("." in p or "e" in p.lower() for p in text.split(",")) else int
            if current and isinstance(current[0], float):
                elem = float
            return tuple(elem(p.strip()) for p in text.split(","))
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply {dotted key: value} onto a copy of cfg; unknown keys are errors."""
    cfg = dataclasses.replace(
        cfg, **{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)}
    )
    valid = set(flatten_config(cfg))
    for key, raw in overrides.items():
        if key not in valid:
            known = ", ".join(sorted(valid))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {known}")
        sec_name, field_name = key.split(".", 1)
        sec = getattr(cfg, sec_name)
        setattr(sec, field_name, _coerce(key, raw, getattr(sec, field_name)))
    return cfg


def parse_config_file(path) -> dict:
    """Parse a flat ``key = value`` file into an override dict."""
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            overrides[key.strip()] = value.strip()
    return overrides


def load_config(path=None, overrides=None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_file(path))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


# the hash covers what determines checkpoint compatibility: the network
# architecture and the data geometry.  Schedules, toggles and paths may
# differ between runs sharing one checkpoint (e.g. ablations).
_HASHED_PREFIXES = ("model.",)
_HASHED_DATA_KEYS = ("data.input_size", "data.joint_count", "data.sigma",
                     "data.flip_pairs")


def config_hash(cfg: TrainConfig) -> str:
    lines = []
    for key, value in sorted(flatten_config(cfg).items()):
        if key.startswith(_HASHED_PREFIXES) or key in _HASHED_DATA_KEYS:
            lines.append(f"{key}={value!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def config_to_dict(cfg: TrainConfig) -> dict:
    """JSON-friendly resolved config (tuples as lists)."""
    out = {}
    for key, value in flatten_config(cfg).items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(d: dict) -> TrainConfig:
    return apply_overrides(
        TrainConfig(),
        {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()},
    )


# desk-scale preset for the bundled procedural dataset
TOY_OVERRIDES = {
    "data.input_size": 128,
    "data.joint_count": 10,
    "model.encoder_channels": (8, 16, 32, 64, 128),
    "model.decoder_channels": 32,
    "model.refine_mid_channels": 32,
    "model.dc_channels": (32, 64, 128, 256),
    "schedule.alpha_min": 5,
    "schedule.stage1_milestones": (24, 36),
    "train.batch_size": 16,
    "train.epochs_stage1": 40,
    "train.epochs_stage2": 16,
    "train.ema_alpha": 0.99,
}

PRESETS = {"toy": TOY_OVERRIDES}

# named adaptation-stage variants for the component ablation: which parts of
# the curriculum are active on top of source supervision
ABLATIONS = {
    "mdam_pl": {
        "train.sd_enabled": False,
        "train.mt_enabled": False,
        "train.selection_enabled": False,
        "mixup.enabled": False,
    },
    "mdam_mt_outlp": {
        "train.sd_enabled": False,
        "mixup.enabled": False,
    },
    "full": {},
}


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; available: {sorted(ABLATIONS)}")
    return apply_overrides(cfg, ABLATIONS[name])


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return apply_overrides(cfg, PRESETS[name])


def parse_group_map(text: str, joint_count: int) -> dict:
    """'name:0,1;name2:2' -> {joint index: group name}, must cover all K."""
    mapping = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, idxs = part.partition(":")
        if not idxs:
            raise ConfigError(f"bad group_map entry {part!r}")
        for tok in idxs.split(","):
            j = int(tok)
            if j in mapping:
                raise ConfigError(f"joint {j} listed twice in group_map")
            mapping[j] = name.strip()
    missing = set(range(joint_count)) - set(mapping)
    if missing:
        raise ConfigError(f"group_map does not cover joints {sorted(missing)}")
    extra = set(mapping) - set(range(joint_count))
    if extra:
        raise ConfigError(f"group_map names out-of-range joints {sorted(extra)}")
    return mapping


def parse_flip_pairs(text: str, joint_count: int) -> tuple:
    """'a-b,c-d' -> ((a, b), (c, d)); pairing must be involutive."""
    pairs = []
    seen = set()
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        a, _, b = tok.partition("-")
        a, b = int(a), int(b)
        if a == b or not (0 <= a < joint_count and 0 <= b < joint_count):
            raise ConfigError(f"bad flip pair {tok!r}")
        if a in seen or b in seen:
            raise ConfigError(f"joint reused across flip pairs: {tok!r}")
        seen.update((a, b))
        pairs.append((a, b))
    return tuple(pairs)
