"""Run configuration: one INI file, flat sections, no silent typos.

Sections mirror the module configs (task / model / attn / train). Every
key must be known; unknown sections or keys raise ConfigError naming the
offender so a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import copy

from .attention import AttentionConfig
from .model import ModelConfig
from .tasks import TaskSpec, build_task
from .train import TrainConfig

__all__ = ["ConfigError", "DEFAULTS", "load_run_config", "apply_sets",
           "build_run", "config_to_text"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "task": {
        "name": "reduction",
        "L": 256,
        "vocab": 16,
        "channels": 3,
        "train_size": 10000,
        "test_size": 10000,
        "seed": 0,
        "path": "",
        "lm": False,
    },
    "model": {
        "depth": 2,
        "d_model": 64,
        "S": 64,
        "d_ffn": 0,
        "norm_kind": "layer",
        "pre_norm": False,
        "n_state": 16,
        "dropout": 0.0,
        "ssm_enabled": True,
        "impl": "factored",
    },
    "attn": {
        "attn_fn": "softmax",
        "window": 8,
        "causal": True,
        "z_dim": 16,
        "v_dim": 64,
    },
    "train": {
        "lr": 1e-3,
        "weight_decay": 0.0,
        "beta1": 0.9,
        "beta2": 0.98,
        "grad_clip": 0.1,
        "warmup_steps": 100,
        "total_steps": 1000,
        "schedule": "linear",
        "gamma": 0.0001,
        "batch_size": 128,
        "seed": 0,
        "eval_every": 200,
        "eval_batches": 8,
    },
}


def _coerce(section, key, raw, default):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for '{section}.{key}': {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(
            f"bad {type(default).__name__} for '{section}.{key}': {raw!r}")
    return str(raw)


def load_run_config(path=None):
    """Parse an INI file over the defaults; None keeps the defaults."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str        # keys are case-sensitive (task.L)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section '{section}'")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            cfg[section][key] = _coerce(section, key, raw,
                                        DEFAULTS[section][key])
    return cfg


def apply_sets(cfg, sets):
    """Apply --set section.key=value overrides in order."""
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown key '{section}.{key}'")
        cfg[section][key] = _coerce(section, key, raw,
                                    DEFAULTS[section][key])
    return cfg


def build_run(cfg, seed=None, impl=None):
    """Materialize (task, model_cfg, train_cfg) from a validated dict.

    The task dictates the model's input/output interface; a --seed flag
    override lands in both the task and the training stream.
    """
    t = dict(cfg["task"])
    tr = dict(cfg["train"])
    m = dict(cfg["model"])
    a = dict(cfg["attn"])
    if seed is not None:
        t["seed"] = seed
        tr["seed"] = seed
    spec = TaskSpec(name=t["name"], L=t["L"], vocab=t["vocab"],
                    channels=t["channels"], train_size=t["train_size"],
                    test_size=t["test_size"], seed=t["seed"],
                    path=t["path"], lm=t["lm"])
    task = build_task(spec)
    try:
        attn = AttentionConfig(attn_fn=a["attn_fn"], window=a["window"],
                               causal=a["causal"], z_dim=a["z_dim"],
                               v_dim=a["v_dim"])
        mk = task.model_kwargs()
        model_cfg = ModelConfig(
            depth=m["depth"], d_model=m["d_model"], attn=attn, S=m["S"],
            head=mk["head"], n_out=mk["n_out"],
            vocab=mk.get("vocab", 0), in_dim=mk.get("in_dim", 0),
            d_ffn=m["d_ffn"], norm_kind=m["norm_kind"],
            pre_norm=m["pre_norm"], n_state=m["n_state"],
            dropout=m["dropout"], ssm_enabled=m["ssm_enabled"])
        train_cfg = TrainConfig(
            lr=tr["lr"], weight_decay=tr["weight_decay"],
            betas=(tr["beta1"], tr["beta2"]), grad_clip=tr["grad_clip"],
            warmup_steps=tr["warmup_steps"], total_steps=tr["total_steps"],
            schedule=tr["schedule"], gamma=tr["gamma"],
            batch_size=tr["batch_size"], seed=tr["seed"],
            eval_every=tr["eval_every"], eval_batches=tr["eval_batches"])
    except ValueError as e:
        raise ConfigError(str(e))
    run_impl = impl if impl is not None else m["impl"]
    if run_impl not in ("factored", "dense"):
        raise ConfigError(f"bad value for 'model.impl': {run_impl!r}")
    return task, model_cfg, train_cfg, run_impl


def config_to_text(cfg):
    """Round-trippable INI rendering of a config dict."""
    lines = []
    for section, kv in cfg.items():
        lines.append(f"[{section}]")
        for key, val in kv.items():
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
