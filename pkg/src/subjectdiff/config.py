"""Run configuration: defaults, file/flag merging, canonical hashing.

A config is a nested dict with a fixed schema.  Files are JSON; command-line
flags override file values.  The config hash is the sha256 of the canonical
serialization and is embedded in every artifact (checkpoints, logs, reports,
embedding exports) so a run is replayable from config + seed alone.
"""

import copy
import hashlib
import json
import os

from .errors import ConfigError

ENV_ROOT = "SUBJECTDIFF_ROOT"

DEFAULTS = {
    "seed": 0,
    "model": {
        "width": 64,             # shared feature width d
        "feature_layers": 3,     # image-encoder layers concatenated into the feature stack (K)
        "tokens_per_layer": 16,
        "cross_attn_layers": 4,  # conditioning sites in the denoiser (l)
        "visual_tokens": 4,      # visual tokens injected per site (m)
        "tokens_per_site": 1,    # subject tokens per site (k)
        "timesteps": 100,
        "beta_start": 1.0e-4,
        "beta_end": 2.0e-2,
        "gamma": 1.0,
        "text_layers": 2,
        "caption_length": 12,
    },
    "train": {
        "stage": 1,
        "learning_rate": 3.0e-5,
        "weight_decay": 1.0e-2,
        "batch_size": 8,
        "steps": 10000,
        "cscl_on": True,
        "macl_on": True,
        "loc_on": True,
        "lambda1": 1.0e-2,
        "lambda2": 1.0e-3,
        "tau": 0.07,
        "loc_variant": "paper",
        "holdout_renders": 2,    # renders per subject reserved for evaluation
        "log_every": 1,
        "checkpoint_every": 0,   # 0 = final only
    },
    "appearance": {
        "steps": 10000,
        "batch_subjects": 16,
        "views_per_subject": 2,
        "learning_rate": 1.0e-3,
        "temperature": 0.1,
    },
    "sampler": {
        "steps": 25,
        "inject": True,
        "init": "prior",         # "prior" = mean-matched start, "noise" = unit normal
    },
    "eval": {
        "embed_timestep": 50,    # timestep fed to the subject encoder for embedding export
        "classifier_steps": 1500,
        "classifier_lr": 1.0e-3,
        "edit_per_category": 48,
    },
    "paths": {
        "data": "",
        "stage0": "",
        "appearance": "",
        "classifier": "",
        "out": "",
    },
}

_VALID_LOC_VARIANTS = ("paper", "conventional")


def _merge(base, update, prefix=""):
    """Recursively merge `update` into `base`, rejecting unknown keys."""
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a section, got {type(value).__name__}")
            _merge(base[key], value, prefix=path + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {path} is a scalar, got a section")
            base[key] = value


def _validate(cfg):
    tr = cfg["train"]
    if tr["stage"] not in (0, 1):
        raise ConfigError(f"train.stage must be 0 or 1, got {tr['stage']}")
    if tr["learning_rate"] <= 0:
        raise ConfigError("train.learning_rate must be positive")
    if tr["tau"] <= 0:
        raise ConfigError("train.tau must be positive")
    if tr["lambda1"] <= 0 or tr["lambda2"] <= 0:
        raise ConfigError("loss weights must be positive")
    if tr["macl_on"] and tr["batch_size"] < 3:
        raise ConfigError("train.batch_size must be >= 3 when the appearance contrast is enabled")
    if tr["loc_variant"] not in _VALID_LOC_VARIANTS:
        raise ConfigError(f"train.loc_variant must be one of {_VALID_LOC_VARIANTS}")
    md = cfg["model"]
    if md["timesteps"] < 2:
        raise ConfigError("model.timesteps must be >= 2")
    if not (0 < md["beta_start"] < md["beta_end"] < 1):
        raise ConfigError("beta range must satisfy 0 < beta_start < beta_end < 1")
    if cfg["sampler"]["init"] not in ("prior", "noise"):
        raise ConfigError("sampler.init must be 'prior' or 'noise'")
    if cfg["sampler"]["steps"] < 2:
        raise ConfigError("sampler.steps must be >= 2")


def canonical_json(obj) -> str:
    """Canonical serialization used for hashing: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


class RunConfig:
    """Resolved configuration plus its canonical hash."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = config_hash(cfg)

    def __getitem__(self, key):
        return self.cfg[key]

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def section(self, name) -> dict:
        return self.cfg[name]

    def to_json(self, indent=2) -> str:
        return json.dumps(self.cfg, indent=indent)


def parse_config(file=None, overrides=None) -> RunConfig:
    """Build a RunConfig from defaults <- optional JSON file <- flag overrides.

    `overrides` maps dotted keys ("train.steps") or section dicts to values.
    Unknown keys anywhere are rejected.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if file:
        if not os.path.exists(file):
            raise ConfigError(f"config file not found: {file}")
        try:
            with open(file) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config file {file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {file} must contain a JSON object")
        _merge(cfg, loaded)
    if overrides:
        expanded = {}
        for key, value in overrides.items():
            parts = key.split(".")
            node = expanded
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        _merge(cfg, expanded)
    _validate(cfg)
    return RunConfig(cfg)


def artifact_root(default=".") -> str:
    """Default directory for artifacts, overridable via the env var."""
    return os.environ.get(ENV_ROOT, default)
