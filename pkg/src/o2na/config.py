"""Flat key=value run configuration.

Every knob of the pipeline lives here with its validated range. CLI flags
override file values; the resulting effective config is echoed into every
artifact so runs can be reproduced from the artifact alone.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, predicate, constraint description)
_RULES = {
    "d_h": (int, lambda v: v >= 1, ">= 1"),
    "heads": (int, lambda v: v >= 1, ">= 1"),
    "d_ff": (int, lambda v: v >= 1, ">= 1"),
    "n_layers": (int, lambda v: v >= 1, ">= 1"),
    "n_frames": (int, lambda v: v >= 1, ">= 1"),
    "d_image": (int, lambda v: v >= 1, ">= 1"),
    "d_motion": (int, lambda v: v >= 1, ">= 1"),
    "l_max": (int, lambda v: 1 <= v <= 500, "in [1, 500]"),
    "mask_ratio": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "gamma": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "lambda_lp": (float, lambda v: v >= 0.0, ">= 0"),
    "lambda_op": (float, lambda v: v >= 0.0, ">= 0"),
    "lambda_og": (float, lambda v: v >= 0.0, ">= 0"),
    "lambda_cg": (float, lambda v: v >= 0.0, ">= 0"),
    "lambda_refine": (float, lambda v: v >= 0.0, ">= 0"),
    "lr": (float, lambda v: v > 0.0, "> 0"),
    "beta1": (float, lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "beta2": (float, lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "adam_eps": (float, lambda v: v > 0.0, "> 0"),
    "dropout": (float, lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "epochs": (int, lambda v: v >= 1, ">= 1"),
    "batch_size": (int, lambda v: v >= 1, ">= 1"),
    "min_count": (int, lambda v: v >= 1, ">= 1"),
    "seed": (int, lambda v: v >= 0, ">= 0"),
    "iterations": (int, lambda v: v >= 0, ">= 0"),
    "npd_k": (int, lambda v: v >= 1, ">= 1"),
    "lock_objects": (_bool, lambda v: True, "boolean"),
    "dedup": (_bool, lambda v: True, "boolean"),
    "plots": (_bool, lambda v: True, "boolean"),
    "features": (str, lambda v: True, "path"),
    "manifest": (str, lambda v: True, "path"),
    "vocab": (str, lambda v: True, "path"),
    "objects": (str, lambda v: True, "path"),
    "checkpoint": (str, lambda v: True, "path"),
}


@dataclass
class RunConfig:
    # desk-scale model profile; the science knobs keep their stated defaults
    d_h: int = 64
    heads: int = 4
    d_ff: int = 256
    n_layers: int = 1
    n_frames: int = 8
    d_image: int = 64
    d_motion: int = 64
    l_max: int = 30
    mask_ratio: float = 0.5
    gamma: float = 0.8
    lambda_lp: float = 1.0
    lambda_op: float = 1.0
    lambda_og: float = 1.0
    lambda_cg: float = 1.0
    lambda_refine: float = 1.0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    min_count: int = 3
    seed: int = 1
    iterations: int = 1
    npd_k: int = 5
    lock_objects: bool = False
    dedup: bool = True
    plots: bool = True
    features: str = ""
    manifest: str = ""
    vocab: str = ""
    objects: str = ""
    checkpoint: str = ""

    def set(self, key, raw):
        if key not in _RULES:
            raise ConfigError(f"unknown config key '{key}'")
        parser, ok, constraint = _RULES[key]
        try:
            value = parser(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {constraint}") from None
        if not ok(value):
            raise ConfigError(f"config key '{key}' = {value!r} violates constraint: {constraint}")
        setattr(self, key, value)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def apply_overrides(self, overrides):
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
        return self


def parse_config_text(text, cfg=None):
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path=None):
    """Config from a flat key=value file; an absent/empty file keeps defaults."""
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())
