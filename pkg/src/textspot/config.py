"""Line-oriented key=value configuration with dotted namespaces.

Unknown keys are hard errors; every key has a typed default below.
"""

from __future__ import annotations

from typing import Any


class ConfigError(ValueError):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _int_list(s):
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in s.split(",") if v.strip()]


# key -> (default, converter, allowed values or None)
REGISTRY: dict[str, tuple[Any, Any, tuple | None]] = {
    "seed": (0, int, None),
    "model.feature_dim": (256, int, None),
    "model.tdn_hidden": (1024, int, None),
    "model.tdn_fc": (1024, int, None),
    "model.trn_hidden": (512, int, None),
    "model.attn_dim": (512, int, None),
    "roi.mode": ("varying", str, ("varying", "fixed")),
    "roi.fixed_h": (7, int, None),
    "roi.fixed_w": (7, int, None),
    "roi.w_max": (30, int, None),
    "tdn.encoder": ("recurrent", str, ("recurrent", "avgpool", "avgpool_fc")),
    "trn.attention": ("2d", str, ("2d",)),
    "refine.mode": ("quad", str, ("off", "quad", "poly6")),
    "train.lr": (0.005, float, None),
    "train.momentum": (0.9, float, None),
    "train.weight_decay": (1e-4, float, None),
    "train.batch_size": (4, int, None),
    "train.iterations": (1000, int, None),
    "train.decay_every": (1000, int, None),
    "train.decay_rate": (0.8, float, None),
    "train.min_lr": (1e-4, float, None),
    "train.checkpoint_every": (500, int, None),
    "train.joint": (True, _bool, None),
    "train.scales": ([600, 800, 1000], _int_list, None),
    "train.max_side": (1200, int, None),
    "train.augment": (True, _bool, None),
    "train.num_proposals": (1024, int, None),
    "train.mine_total": (512, int, None),
    "train.max_rec_words": (256, int, None),
    "train.tmax": (32, int, None),
    "train.add_gt_proposals": (True, _bool, None),
    # probability of zeroing the decoder's step-0 holistic input per word;
    # starves the whole-word shortcut so attention must learn to localize
    "train.holistic_dropout": (0.0, float, None),
    # attention guidance: pull each character step's attention toward uniform
    # column spacing and the image's ink rows (0 disables; small-data aid)
    "train.attn_guide": (0.0, float, None),
    "train.attn_guide_sigma": (0.75, float, None),
    "infer.scales": ([600, 800, 1000], _int_list, None),
    "infer.max_side": (1200, int, None),
    "infer.topk": (300, int, None),
    "infer.textness_thr": (0.5, float, None),
    "infer.rec_thr": (0.7, float, None),
    "infer.nms_thr": (0.5, float, None),
    "infer.single_extraction": (False, _bool, None),
    "eval.edit_slack_base": (1, int, None),
    "eval.edit_slack_per_chars": (8, int, None),
}


class Config:
    def __init__(self, overrides: dict[str, Any] | None = None):
        self._values = {k: default for k, (default, _, _) in REGISTRY.items()}
        if overrides:
            for k, v in overrides.items():
                self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key: {key!r}")
        _, conv, allowed = REGISTRY[key]
        try:
            value = conv(value) if isinstance(value, str) or conv is _int_list else conv(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})")
        if allowed is not None and value not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key: {key!r}")
        return self._values[key]

    def to_text(self) -> str:
        lines = []
        for k in sorted(self._values):
            v = self._values[k]
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value.strip())
        return cfg

    @classmethod
    def from_file(cls, path) -> "Config":
        with open(path) as f:
            return cls.from_text(f.read())
