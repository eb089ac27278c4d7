"""Run configuration shared by every pipeline stage.

All settings live in one flat namespace of ``section.key`` names, e.g.
``coil.count`` or ``train.epochs``. Values are resolved from, in increasing
priority: built-in defaults, a config file (one ``section.key = value`` per
line, ``#`` comments), the ``SHIMKIT_SEED`` environment variable (for
``run.seed`` only) and command-line flags. Stages that read an existing
dataset start from the configuration recorded in it instead of the defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import fields
from pathlib import Path

from . import __version__
from .coils import DEFAULT_ANGLES, CoilArray, PhantomSpec, WaveModel
from .errors import SpecError
from .field import DEFAULT_LAMBDA
from .optimize import AdamConfig, MlsConfig, RestartPolicy
from .surrogate import NetConfig, TrainConfig

SEED_ENV = "SHIMKIT_SEED"
DESK_VOXEL = 0.003


class ConfigError(SpecError):
    """Invalid configuration; the message names the offending key."""


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


_SECTIONS = {
    "run": {"seed": 0, "jobs": 0},
    "coil": _dataclass_defaults(CoilArray),
    "wave": _dataclass_defaults(WaveModel),
    "phantom": {
        "count": 10,
        "scale_min": 0.9,
        "scale_max": 1.1,
        "voxel_size": "auto",
        **_dataclass_defaults(PhantomSpec, skip=("voxel_size", "scale")),
    },
    "data": {
        "slices_per_phantom": 32,
        "augment": DEFAULT_ANGLES,
        "jitter": 0.0,
        "min_mask_voxels": 64,
        "target": 1.0,
        "lambda": DEFAULT_LAMBDA,
    },
    "restart": _dataclass_defaults(RestartPolicy, skip=("seed",)),
    "adam": _dataclass_defaults(AdamConfig),
    "mls": _dataclass_defaults(MlsConfig),
    "net": {"paper_scale": False, **_dataclass_defaults(NetConfig, skip=("coils", "height", "width", "seed"))},
    "train": {"fold_seed": None, **_dataclass_defaults(TrainConfig, skip=("seed",))},
    "bench": {"folds": 5, "repeats": 3},
}

# element / value types where the default alone does not say
_TYPES = {
    "coil.loop_radius": float,
    "train.fold_seed": int,
    "phantom.voxel_size": float,
    "phantom.grid": int,
    "net.stage_widths": int,
}


def defaults() -> dict:
    return {sec: dict(vals) for sec, vals in _SECTIONS.items()}


def keys() -> list[str]:
    return [f"{s}.{k}" for s, vals in _SECTIONS.items() for k in vals]


def default_of(key: str):
    sec, name = _split(key)
    return _SECTIONS[sec][name]


def _split(key: str):
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.name")
    sec, name = key.split(".", 1)
    if sec not in _SECTIONS or name not in _SECTIONS[sec]:
        raise ConfigError(f"unknown config key {key!r}")
    return sec, name


def _parse_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


def _parse_scalar(key, text, kind):
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_value(key: str, value):
    """Convert ``value`` (often a string) to the type of ``key``'s default."""
    default = default_of(key)
    if not isinstance(value, str):
        text = None
    else:
        text = value
    if isinstance(default, bool):
        return value if text is None else _parse_bool(key, text)
    if isinstance(default, tuple):
        kind = _TYPES.get(key, type(default[0]) if default else float)
        if text is None:
            return tuple(kind(v) for v in value)
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()] if key == "phantom.grid" else \
            [p for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(key, p, kind) for p in parts)
    if key == "phantom.voxel_size":
        if text is not None and text.strip().lower() == "auto":
            return "auto"
        return float(value) if text is None else _parse_scalar(key, text, float)
    if default is None or key in _TYPES:
        if text is not None and text.strip().lower() in ("none", ""):
            return None
        kind = _TYPES[key]
        return kind(value) if text is None else _parse_scalar(key, text, kind)
    kind = type(default)
    if text is None:
        return kind(value)
    return _parse_scalar(key, text, kind)


def read_config_file(path) -> dict:
    """``{key: raw string}`` from a flat ``section.key = value`` file."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        _split(key)
        out[key] = value
    return out


def resolve(file=None, overrides=None, env=None, base=None) -> dict:
    """Merge defaults (or a recorded ``base`` config), config file, ``SHIMKIT_SEED``
    and flag overrides; validate the result."""
    cfg = defaults()

    def put(key, value):
        sec, name = _split(key)
        cfg[sec][name] = parse_value(key, value)

    for sec, vals in (base or {}).items():
        for name, value in vals.items():
            if value is None:
                _split(f"{sec}.{name}")
                cfg[sec][name] = None
            else:
                put(f"{sec}.{name}", value)

    if file:
        for k, v in read_config_file(file).items():
            put(k, v)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        put("run.seed", env[SEED_ENV])
    for k, v in (overrides or {}).items():
        if v is not None:
            put(k, v)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    """Build every component once so invalid combinations fail before any work starts."""
    checks = {
        "coil": lambda: coil_array(cfg),
        "wave": lambda: wave_model(cfg),
        "phantom": lambda: phantoms(cfg),
        "restart": lambda: restart_policy(cfg),
        "adam": lambda: adam_config(cfg),
        "mls": lambda: mls_config(cfg),
        "net": lambda: net_config(cfg, 8, 64, 64),
        "train": lambda: train_config(cfg),
    }
    for section, check in checks.items():
        try:
            check()
        except (SpecError, TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    if cfg["data"]["slices_per_phantom"] < 1:
        raise ConfigError("data.slices_per_phantom must be >= 1")
    if not cfg["data"]["augment"]:
        raise ConfigError("data.augment needs at least one angle (use 0 for no augmentation)")
    if cfg["phantom"]["count"] < 1:
        raise ConfigError("phantom.count must be >= 1")
    if cfg["bench"]["folds"] < 1 or cfg["bench"]["repeats"] < 3:
        raise ConfigError("bench.folds must be >= 1 and bench.repeats >= 3")
    if cfg["run"]["jobs"] < 0:
        raise ConfigError("run.jobs must be >= 0 (0 uses every core)")


# settings that change how fast a result is produced but never the result itself
_OPERATIONAL = {("run", "jobs")}


def _material(cfg: dict) -> dict:
    return {sec: {k: v for k, v in vals.items() if (sec, k) not in _OPERATIONAL} for sec, vals in cfg.items()}


def canonical_json(cfg: dict) -> str:
    return json.dumps(_material(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def echo(cfg: dict) -> dict:
    """What every artifact embeds: the resolved config (minus ``run.jobs``), its hash and the tool version."""
    return {"config": json.loads(canonical_json(cfg)), "config_hash": config_hash(cfg), "tool_version": __version__}


def dump(cfg: dict) -> str:
    """The resolved config in config-file syntax."""
    lines = []
    for sec, vals in cfg.items():
        for k, v in vals.items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{sec}.{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def coil_array(cfg) -> CoilArray:
    return CoilArray(**cfg["coil"])


def wave_model(cfg) -> WaveModel:
    return WaveModel(**cfg["wave"])


def voxel_size(cfg) -> float:
    """Explicit ``phantom.voxel_size`` or the smallest size (at least the desk default) that
    keeps the largest phantom inside the in-plane grid with a two-voxel margin."""
    p = cfg["phantom"]
    if p["voxel_size"] != "auto":
        return float(p["voxel_size"])
    h, w, _ = p["grid"]
    scale = max(p["scale_min"], p["scale_max"])
    ax, ay = (a * scale for a in p["semi_axes"][:2])
    cx, cy = abs(p["center"][0]), abs(p["center"][1])
    need = max((cx + ax) / ((w - 1) / 2 - 2), (cy + ay) / ((h - 1) / 2 - 2)) if min(h, w) > 5 else math.inf
    return max(DESK_VOXEL, math.ceil(need * 1e6) / 1e6)


def phantoms(cfg) -> list[PhantomSpec]:
    from .coils import phantom_set

    p = cfg["phantom"]
    base_kw = {k: p[k] for k in ("grid", "semi_axes", "center", "density_inside", "density_outside",
                                 "mask_threshold")}
    scales = (p["scale_min"], p["scale_max"])
    base = PhantomSpec(voxel_size=voxel_size(cfg), scale=(scales[0] + scales[1]) / 2, **base_kw)
    return phantom_set(p["count"], base, scales)


def restart_policy(cfg) -> RestartPolicy:
    return RestartPolicy(**cfg["restart"], seed=cfg["run"]["seed"])


def adam_config(cfg) -> AdamConfig:
    return AdamConfig(**cfg["adam"])


def mls_config(cfg) -> MlsConfig:
    return MlsConfig(**cfg["mls"])


def net_config(cfg, coils: int, height: int, width: int) -> NetConfig:
    kw = {k: v for k, v in cfg["net"].items() if k != "paper_scale"}
    if cfg["net"]["paper_scale"]:
        kw["stem_width"], kw["stage_widths"] = 64, (64, 128, 256, 512)
    return NetConfig(coils=coils, height=height, width=width, seed=cfg["run"]["seed"], **kw)


def train_config(cfg) -> TrainConfig:
    kw = {k: v for k, v in cfg["train"].items() if k != "fold_seed"}
    return TrainConfig(**kw, seed=fold_seed(cfg))


def jobs(cfg) -> int:
    return cfg["run"]["jobs"] or os.cpu_count() or 1


def fold_seed(cfg) -> int:
    s = cfg["train"]["fold_seed"]
    return cfg["run"]["seed"] if s is None else s


def with_values(cfg: dict, **updates) -> dict:
    """Copy of ``cfg`` with ``section__key=value`` updates applied and parsed."""
    out = {sec: dict(vals) for sec, vals in cfg.items()}
    for name, value in updates.items():
        key = name.replace("__", ".", 1)
        sec, k = _split(key)
        out[sec][k] = parse_value(key, value)
    validate(out)
    return out

