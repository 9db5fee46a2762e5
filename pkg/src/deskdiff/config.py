"""Flat key=value configuration with dotted namespaces.

A config file is lines of "key = value" with # comments; --set flags use
the same key=value form.  Every key must exist in the registry below, typed
and defaulted there, so a typo fails loudly instead of training the wrong
model.
"""

from __future__ import annotations

from .errors import ConfigError


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (type constructor, default)
REGISTRY = {
    "schedule.T": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),

    "model.size": (int, 32),
    "model.patch": (int, 4),
    "model.d": (int, 128),
    "model.d_y": (int, 64),
    "model.depth": (int, 4),
    "model.text_depth": (int, 1),
    "model.max_text_len": (int, 64),

    "experts.n": (int, 1),

    "train.steps": (int, 1000),
    "train.warm_steps": (int, 0),
    "train.batch_size": (int, 8),
    "train.lr": (float, 0.9e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.weight_decay": (float, 0.01),
    "train.p_uncond": (float, 0.1),
    "train.log_every": (int, 10),
    "train.checkpoint_every": (int, 0),
    "train.storage": (str, "f64"),

    "policy.w_a": (float, 0.01),
    "policy.w_l": (float, 0.1),
    "policy.p_know": (float, 0.5),
    "policy.p_cap": (float, 0.1),
    "policy.insert_tokens": (_parse_bool, True),
    "policy.scale_attention": (_parse_bool, True),
    "policy.weight_loss": (_parse_bool, True),
    "policy.append_labels": (_parse_bool, True),
    "policy.attention_mode": (str, "multiplicative"),

    "data.count": (int, 512),
    "data.max_objects": (int, 3),
    "data.p_omit": (float, 0.2),

    "sample.method": (str, "ddim"),
    "sample.steps": (int, 50),
    "sample.guidance": (float, 2.1),
    "sample.count": (int, 1),

    "eval.count": (int, 2048),
    "eval.steps": (int, 50),
    "eval.min_objects": (int, 1),
}


def defaults() -> dict:
    return {key: default for key, (_, default) in REGISTRY.items()}


def coerce(key: str, raw) -> object:
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key {key!r}")
    ctor, _ = REGISTRY[key]
    if not isinstance(raw, str):
        return raw
    try:
        return ctor(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_assignment(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    return key, coerce(key, raw)


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            key, value = parse_assignment(stripped)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        out[key] = value
    return out


def resolve(file_path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then --set flags, last wins."""
    cfg = defaults()
    if file_path is not None:
        cfg.update(load_config_file(file_path))
    for text in overrides or ():
        key, value = parse_assignment(text)
        cfg[key] = value
    return cfg
