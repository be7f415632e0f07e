"""Run configuration: plain ``key = value`` files plus ``--key value`` overrides.

Grammar: one assignment per line, ``#`` starts a comment, blank lines are
ignored, no sections.  Lists are comma separated.  Booleans accept
true/false, yes/no, on/off, 1/0.  A run manifest (JSON with a ``config``
object) is accepted wherever a config file is.
"""

from __future__ import annotations

import difflib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

SEED_ENV = "RTGS2_SEED"


class ConfigError(ValueError):
    """Bad key, value or file syntax (a usage error)."""


@dataclass
class RunConfig:
    # general
    seed: int | None = None
    threads: int = 1
    out_dir: str = "run"
    log_level: str = "warning"
    # data
    scene: str = ""
    scenes: list = field(default_factory=list)
    ply_name: str = "scene.ply"
    holdout: list = field(default_factory=list)
    eval_split: str = "holdout"
    # synthetic data
    layout: str = "room"
    n_classes: int = 4
    count: int = 3000
    n_views: int = 8
    width: int = 128
    height: int = 128
    palette_mix: float = 0.0
    # rasterizer
    tile: int = 16
    t_min: float = 1e-4
    # appearance fitting
    appearance_steps: int = 300
    lr_sh: float = 0.01
    lr_opacity: float = 0.05
    lambda_dssim: float = 0.2
    lr_final: float = 0.01
    reset_appearance: bool = False
    appearance_split: str = "all"   # images only, so held-out label views may still be fitted
    fitted_name: str = "scene_fitted.ply"
    # view-independent features
    tau: float = 0.07
    n_corr: int = 4096
    voxel: float = 0.07
    overlap_lo: float = 0.3
    overlap_hi: float = 0.8
    lr: float = 1e-3
    vi_weight_decay: float = 1e-5
    epochs: int = 10
    vi_max_steps: int = 0
    k: int = 16
    hidden: int = 64
    layers: int = 3
    feat_dim: int = 32
    # fusion / semantic training
    sem_lr: float = 1e-4
    sem_weight_decay: float = 1e-4
    warmup_epochs: int = 4
    sem_steps: int = 300
    finetune_steps: int = 100
    mode: str = "frozen"
    use_z: bool = True
    use_image: bool = True
    use_lsr: bool = True
    use_ceco: bool = True
    lambda_ceco: float = 0.4
    eps_lsr: float = 0.1
    ceco_variant: str = "cross"
    c: int = 16
    skips: bool = True
    # artefacts
    encoder: str = ""
    model: str = ""
    pred_dir: str = ""
    # benchmark / ablation
    warmup_frames: int = 10
    bench_frames: int = 100
    ablate_rows: list = field(default_factory=lambda: ["full", "no_z", "no_image", "no_lsr", "no_ceco"])

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
        return 0

    def snapshot(self) -> dict:
        d = asdict(self)
        d["seed"] = self.resolved_seed()
        return d


_CHOICES = {
    "eval_split": ("holdout", "train", "all"),
    "appearance_split": ("all", "train"),
    "mode": ("frozen", "joint"),
    "ceco_variant": ("cross", "matched"),
    "layout": ("room",),
    "log_level": ("debug", "info", "warning", "error"),
}
_POSITIVE = {"threads", "n_classes", "count", "n_views", "width", "height", "tile", "n_corr", "k",
             "hidden", "layers", "feat_dim", "c", "epochs", "bench_frames"}
_NON_NEGATIVE = {"appearance_steps", "vi_max_steps", "sem_steps", "finetune_steps", "warmup_epochs",
                 "warmup_frames", "lambda_ceco", "vi_weight_decay", "sem_weight_decay"}
_PROBABILITY = {"palette_mix", "overlap_lo", "overlap_hi", "lambda_dssim"}
_POSITIVE_REAL = {"tau", "voxel", "lr", "sem_lr", "lr_sh", "lr_opacity", "lr_final"}
ABLATION_ROWS = ("full", "no_z", "no_image", "no_lsr", "no_ceco")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _field_types() -> dict[str, Any]:
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: Any, typ: str):
    if not isinstance(raw, str):
        if typ == "list" and isinstance(raw, (list, tuple)):
            return _coerce_list(key, list(raw))
        return raw
    text = raw.strip()
    try:
        if typ == "int | None":
            return None if text.lower() in ("", "none") else int(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if typ == "list":
            return _coerce_list(key, [t.strip() for t in text.split(",") if t.strip()])
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {typ}") from None
    return text


def _coerce_list(key: str, items: list):
    if key == "holdout":
        try:
            return [int(v) for v in items]
        except ValueError:
            raise ConfigError(f"holdout: view indices must be integers, got {items}") from None
    return [str(v) for v in items]


def _validate(cfg: RunConfig) -> None:
    for key, options in _CHOICES.items():
        if getattr(cfg, key) not in options:
            raise ConfigError(f"{key} must be one of {', '.join(options)}; got {getattr(cfg, key)!r}")
    for key in _POSITIVE:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    for key in _NON_NEGATIVE:
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0, got {getattr(cfg, key)}")
    for key in _PROBABILITY:
        if not 0.0 <= getattr(cfg, key) <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1], got {getattr(cfg, key)}")
    for key in _POSITIVE_REAL:
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be > 0, got {getattr(cfg, key)}")
    if not cfg.overlap_lo < cfg.overlap_hi:
        raise ConfigError(f"overlap_lo ({cfg.overlap_lo}) must be below overlap_hi ({cfg.overlap_hi})")
    if not 0.0 <= cfg.eps_lsr < 1.0:
        raise ConfigError(f"eps_lsr must lie in [0, 1), got {cfg.eps_lsr}")
    if not 0.0 <= cfg.t_min < 1.0:
        raise ConfigError(f"t_min must lie in [0, 1), got {cfg.t_min}")
    if cfg.n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {cfg.n_classes}")
    if cfg.width % 4 or cfg.height % 4:
        raise ConfigError(f"width and height must be divisible by 4, got {cfg.width} x {cfg.height}")
    bad = [r for r in cfg.ablate_rows if r not in ABLATION_ROWS]
    if bad:
        raise ConfigError(f"unknown ablation rows {bad}; choose from {', '.join(ABLATION_ROWS)}")


def unknown_key_message(key: str) -> str:
    close = difflib.get_close_matches(key, list(_field_types()), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"unknown config key {key!r}{hint}"


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        return dict(doc.get("config", doc))
    return parse_text(text, str(p))


def build_config(values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Apply ``values`` then ``overrides`` (both key -> raw value) to the defaults."""
    types = _field_types()
    cfg = RunConfig()
    for source in (values or {}, overrides or {}):
        for raw_key, raw in source.items():
            key = raw_key.replace("-", "_")
            if key not in types:
                raise ConfigError(unknown_key_message(raw_key))
            setattr(cfg, key, _coerce(key, raw, str(types[key])))
    _validate(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
