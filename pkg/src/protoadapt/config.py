"""Run configuration: stage hyperparameters, flat key=value files, sweeps.

Config files are plain text, one ``key=value`` per line, ``#`` comments.
Keys may be scoped to a stage with a dot prefix (``stage1.gamma1=10``);
unscoped keys act as defaults for every stage.  ``sweep.<key>=a,b,c`` keys
expand a single file into a grid of runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from itertools import product
from pathlib import Path

from .errors import SchemaError

LABEL_MODES = ("fixed-boilerplate", "dynamic")
LABEL_FORMS = ("hard", "soft")
OMEGA_MODES = ("prototype", "uniform")
STUDENT_INITS = ("resume", "fresh-random", "fresh-pretrained")


@dataclass
class StageConfig:
    """All hyperparameters of one training stage."""

    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    lr_decay: float = 0.9          # multiplicative, per epoch
    momentum: float = 0.0          # optimizer momentum, off by default
    proto_momentum: float = 0.9999
    ema_decay: float = 0.999
    tau: float = 1.0
    alpha: float = 0.1
    beta_sce: float = 1.0
    gamma1: float = 10.0
    gamma2: float = 0.1
    beta_kd: float = 1.0
    kd_threshold: float = 0.95
    rectify_threshold: float = 0.0
    label_mode: str = "fixed-boilerplate"
    label_form: str = "hard"
    omega_mode: str = "prototype"
    student_init: str = "fresh-pretrained"
    pretrain_epochs: int = 8
    pretrain_lr: float = 0.05
    pretrain_jitter: float = 0.1
    pretrain_margin: float = 0.5
    weak_jitter_std: float = 0.05
    strong_jitter_std: float = 0.25
    strong_drop_prob: float = 0.1
    strong_scale_lo: float = 0.9
    strong_scale_hi: float = 1.1
    eval_interval: int = 50
    clamp_floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        for name in ("lr", "lr_decay", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.proto_momentum < 1.0:
            raise ValueError("proto_momentum must be in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}")
        if self.label_form not in LABEL_FORMS:
            raise ValueError(f"label_form must be one of {LABEL_FORMS}")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
        if self.student_init not in STUDENT_INITS:
            raise ValueError(f"student_init must be one of {STUDENT_INITS}")


_STAGE_FIELDS = {f.name for f in fields(StageConfig)}


def parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return [parse_value(part) for part in raw.split(",")]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def format_value(value) -> str:
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        cfg[key.strip()] = parse_value(raw)
    return cfg


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def canonical_config(cfg: dict) -> str:
    return "\n".join(f"{k}={format_value(v)}" for k, v in sorted(cfg.items())) + "\n"


def stage_config(cfg: dict, stage: str) -> StageConfig:
    """Resolve one stage: ``<stage>.<key>`` beats bare ``<key>`` beats default."""
    kwargs = {}
    for name in _STAGE_FIELDS:
        if f"{stage}.{name}" in cfg:
            kwargs[name] = cfg[f"{stage}.{name}"]
        elif name in cfg:
            kwargs[name] = cfg[name]
    return StageConfig(**kwargs)


def stage_list(cfg: dict) -> list:
    stages = cfg.get("stages", ["stage1", "distill1", "distill2"])
    if stages == "" or stages == "none":
        return []
    if isinstance(stages, str):
        stages = [stages]
    for s in stages:
        if s != "stage1" and not str(s).startswith("distill"):
            raise SchemaError(f"unknown stage {s!r}")
    return [str(s) for s in stages]


def expand_sweep(cfg: dict) -> list:
    """One config dict per grid point of the ``sweep.*`` keys."""
    sweep_keys = sorted(k for k in cfg if k.startswith("sweep."))
    base = {k: v for k, v in cfg.items() if not k.startswith("sweep.")}
    if not sweep_keys:
        return [base]
    grids = []
    for key in sweep_keys:
        values = cfg[key]
        if not isinstance(values, list):
            values = [values]
        grids.append([(key[len("sweep."):], v) for v in values])
    out = []
    for combo in product(*grids):
        variant = dict(base)
        variant.update(combo)
        out.append(variant)
    return out


def content_hash(extra_texts=()) -> str:
    """Git-style fingerprint of the package source plus any extra text."""
    h = hashlib.sha1()
    pkg_dir = Path(__file__).parent
    for path in sorted(pkg_dir.glob("*.py")):
        h.update(path.name.encode("utf-8"))
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\0")
    for text in extra_texts:
        h.update(text.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()
