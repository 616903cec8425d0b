"""Run configuration: a flat key=value text file plus flag overrides.

Unknown keys are rejected so typos fail loudly; the canonical serialization
(sorted key=value lines) is hashed into the checkpoint fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError

FREEZE_POLICIES = ("t_only", "any_substitution")
EVAL_C_MODES = ("regressed_mean", "importance")
RUN_CONTROL_FIELDS = frozenset({"steps", "epochs", "checkpoint_interval", "eval_c_mode",
                                "eval_is_samples", "data_dir"})


@dataclass
class Config:
    seed: int = 7
    steps: int = 100_000
    batch_size: int = 64
    checkpoint_interval: int = 1000
    epochs: int | None = None           # None cycles; 0 means zero passes

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 100.0            # 0 disables clipping
    freeze_policy: str = "t_only"

    flow_steps: int = 10                # L
    flow_k: int = 1                     # repeats of the L-step block
    tile: int = 16
    image_size: int = 32
    channels: int = 1

    mlp_hidden: int = 70
    mlp_depth: int = 4
    private_layers: int = 4
    c_dim: int = 2

    heads: list = field(default_factory=list)
    lambda_default: float = 1.0
    lambda_by_head: dict = field(default_factory=dict)
    c_dim_by_head: dict = field(default_factory=dict)
    gap_samples: int = 0                # 0 means batch_size

    data_dir: str | None = None
    datasets: list = field(default_factory=lambda: ["mnist"])
    mnist_subset: int = 0               # 0 means the full file
    invert_omniglot: bool = True

    eval_c_mode: str = "regressed_mean"
    eval_is_samples: int = 16

    def lam(self) -> dict:
        return {h: float(self.lambda_by_head.get(h, self.lambda_default)) for h in self.heads}

    def head_specs(self):
        return [(h, int(self.c_dim_by_head.get(h, self.c_dim))) for h in self.heads]

    @property
    def total_flow_steps(self):
        return self.flow_steps * self.flow_k

    def validate(self) -> "Config":
        if len(set(self.heads)) != len(self.heads):
            dupes = sorted({h for h in self.heads if self.heads.count(h) > 1})
            raise ConfigError(f"duplicate head ids: {dupes}")
        if self.image_size % self.tile:
            raise ConfigError(f"tile {self.tile} does not divide image size {self.image_size}")
        if self.image_size % 2:
            raise ConfigError("image size must be even for squeeze steps")
        for h, v in self.lam().items():
            if v < 0:
                raise ConfigError(f"lambda for {h!r} must be >= 0, got {v}")
        if self.lambda_default < 0:
            raise ConfigError("lambda_default must be >= 0")
        for h, d in self.c_dim_by_head.items():
            if int(d) < 1:
                raise ConfigError(f"c_dim for {h!r} must be >= 1")
        if self.c_dim < 1:
            raise ConfigError("c_dim must be >= 1")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"freeze_policy must be one of {FREEZE_POLICIES}")
        if self.eval_c_mode not in EVAL_C_MODES:
            raise ConfigError(f"eval_c_mode must be one of {EVAL_C_MODES}")
        for d in self.datasets:
            if d not in ("mnist", "omniglot"):
                raise ConfigError(f"unknown dataset {d!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        return self

    # -- serialization ----------------------------------------------------

    def to_text(self, exclude=()) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in exclude:
                continue
            v = getattr(self, f.name)
            if f.name == "lambda_by_head":
                lines += [f"lambda.{h} = {_fmt(x)}" for h, x in sorted(v.items())]
            elif f.name == "c_dim_by_head":
                lines += [f"c_dim.{h} = {_fmt(x)}" for h, x in sorted(v.items())]
            elif isinstance(v, list):
                lines.append(f"{f.name} = {','.join(str(x) for x in v)}")
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        """Hash of the checkpoint-compatibility fields.

        Run-control knobs (step budget, checkpoint cadence, eval options) and
        the data path do not change what a checkpoint means, so extending or
        re-evaluating a run is not a fingerprint mismatch.
        """
        return hashlib.sha256(self.to_text(exclude=RUN_CONTROL_FIELDS).encode("utf-8")).digest()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_INT_FIELDS = {"seed", "steps", "batch_size", "checkpoint_interval", "flow_steps", "flow_k",
               "tile", "image_size", "channels", "mlp_hidden", "mlp_depth", "private_layers",
               "c_dim", "gap_samples", "mnist_subset", "eval_is_samples"}
_FLOAT_FIELDS = {"lr", "beta1", "beta2", "adam_eps", "grad_clip", "lambda_default"}
_BOOL_FIELDS = {"invert_omniglot"}
_LIST_FIELDS = {"heads", "datasets"}
_STR_FIELDS = {"freeze_policy", "eval_c_mode", "data_dir"}


def _parse_value(key: str, value: str):
    value = value.strip()
    try:
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r} expects a number, got {value!r}") from None
    if key in _BOOL_FIELDS:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
    if key in _LIST_FIELDS:
        return [x.strip() for x in value.split(",") if x.strip()]
    if key == "epochs":
        return None if value.lower() in ("none", "") else int(value)
    if key in _STR_FIELDS:
        return None if value.lower() == "none" else value
    raise ConfigError(f"unknown config key {key!r}")


def apply_setting(cfg: Config, key: str, value: str) -> None:
    key = key.strip()
    if key.startswith("lambda."):
        try:
            cfg.lambda_by_head[key[len("lambda."):]] = float(value)
        except ValueError:
            raise ConfigError(f"key {key!r} expects a number, got {value!r}") from None
        return
    if key.startswith("c_dim."):
        try:
            cfg.c_dim_by_head[key[len("c_dim."):]] = int(value)
        except ValueError:
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}") from None
        return
    setattr(cfg, key, _parse_value(key, value))


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg


def load_config(path: str, overrides=()) -> Config:
    """Read a config file, apply 'key=value' overrides (overrides win)."""
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, value = ov.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg.validate()
