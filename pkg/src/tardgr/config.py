"""Run configuration: a fixed-schema INI file with strict parsing.

Unknown sections or keys are errors, not warnings; a typo in a config
must never silently fall back to a default. Values are overridable from
the command line as section.key=value pairs, and TARDGR_OUTPUT_DIR
overrides the output directory between the file and the flags.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

__all__ = ["RunConfig", "load_config", "apply_overrides", "config_text",
           "ENV_OUTPUT_DIR"]

ENV_OUTPUT_DIR = "TARDGR_OUTPUT_DIR"

TRAIN_TAM_CHOICES = ("head", "all", "none")
ALPHA_CHOICES = ("uniform", "softmax")
GRANULARITY_CHOICES = ("daily", "weekly")


@dataclass
class RunConfig:
    # paths
    interactions: str = "interactions.txt"
    output_dir: str = "out"
    # data
    granularity: str = "daily"
    split: int = 3
    # model
    d: int = 64
    layers: int = 3
    heads: int = 4
    d_hid: int = 32
    structure_layers: int = 2
    score_hidden: int = 64
    # retrieval
    hop: int = 2
    coarse_k: int = 5
    top_m: int = 3
    cap: int = 256
    alpha_mode: str = "softmax"
    temperature: float = 1.0
    beta_init: float = 0.0
    # losses
    rho: float = 0.6
    tau: float = 1.0
    margin_weight: float = 0.3
    reg_weight: float = 1e-4
    margin: float = 1.0
    drop_rate: float = 0.5
    lr: float = 1e-3
    # sampling (labeled-dataset construction)
    n_queries: int = 8
    candidates_per_query: int = 8
    n_pos: int = 8
    epsilon: float = 1e-3
    # training
    pretrain_epochs: int = 20
    tam_epochs: int = 50
    tam_lr: float = 1e-3
    tam_batch_size: int = 64
    finetune_epochs: int = 5
    batch_size: int = 1024
    train_tam: str = "head"
    # eval
    k: int = 20
    # ablation
    disable_semantic: bool = False
    disable_structure: bool = False
    disable_retrieval: bool = False
    # run
    seed: int = 0

    def validate(self) -> None:
        def positive(name):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, "
                                 f"got {getattr(self, name)}")

        def non_negative(name):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, "
                                 f"got {getattr(self, name)}")

        def unit_interval(name):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

        for name in ("split", "d", "layers", "heads", "d_hid",
                     "structure_layers", "score_hidden", "hop", "coarse_k",
                     "cap", "temperature", "tau", "lr", "n_queries",
                     "candidates_per_query", "n_pos", "tam_batch_size",
                     "batch_size", "k", "pretrain_epochs", "tam_epochs",
                     "tam_lr"):
            positive(name)
        for name in ("margin", "margin_weight", "reg_weight", "epsilon",
                     "finetune_epochs"):
            non_negative(name)
        for name in ("rho", "drop_rate"):
            unit_interval(name)
        if self.top_m != 0 and not 1 <= self.top_m <= self.coarse_k:
            raise ValueError(f"top_m {self.top_m} outside 0 or "
                             f"[1, coarse_k={self.coarse_k}]")
        if self.d % self.heads or self.d_hid % self.heads:
            raise ValueError(f"heads {self.heads} must divide d {self.d} "
                             f"and d_hid {self.d_hid}")
        if self.train_tam not in TRAIN_TAM_CHOICES:
            raise ValueError(f"train_tam must be one of "
                             f"{TRAIN_TAM_CHOICES}, got {self.train_tam!r}")
        if self.alpha_mode not in ALPHA_CHOICES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_CHOICES}, "
                             f"got {self.alpha_mode!r}")
        if self.granularity not in GRANULARITY_CHOICES:
            raise ValueError(f"granularity must be one of "
                             f"{GRANULARITY_CHOICES}, "
                             f"got {self.granularity!r}")


# file section -> config key -> attribute name
SCHEMA = {
    "paths": {"interactions": "interactions", "output_dir": "output_dir"},
    "data": {"granularity": "granularity", "split": "split"},
    "model": {"d": "d", "layers": "layers", "heads": "heads",
              "d_hid": "d_hid", "structure_layers": "structure_layers",
              "score_hidden": "score_hidden"},
    "retrieval": {"hop": "hop", "coarse_k": "coarse_k", "top_m": "top_m",
                  "cap": "cap", "alpha_mode": "alpha_mode",
                  "temperature": "temperature", "beta_init": "beta_init"},
    "losses": {"rho": "rho", "tau": "tau",
               "margin_weight": "margin_weight",
               "reg_weight": "reg_weight", "margin": "margin",
               "drop_rate": "drop_rate", "lr": "lr"},
    "sampling": {"n_queries": "n_queries",
                 "candidates_per_query": "candidates_per_query",
                 "n_pos": "n_pos", "epsilon": "epsilon"},
    "training": {"pretrain_epochs": "pretrain_epochs",
                 "tam_epochs": "tam_epochs", "tam_lr": "tam_lr",
                 "tam_batch_size": "tam_batch_size",
                 "finetune_epochs": "finetune_epochs",
                 "batch_size": "batch_size", "train_tam": "train_tam"},
    "eval": {"k": "k"},
    "ablation": {"disable_semantic": "disable_semantic",
                 "disable_structure": "disable_structure",
                 "disable_retrieval": "disable_retrieval"},
    "run": {"seed": "seed"},
}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _coerce(attr: str, raw: str):
    kind = RunConfig.__dataclass_fields__[attr].type
    raw = raw.strip()
    if kind == "bool":
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"{attr}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{attr}: expected an integer, "
                             f"got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{attr}: expected a number, "
                             f"got {raw!r}") from None
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional file plus override pairs.

    Precedence: defaults < file < TARDGR_OUTPUT_DIR < overrides.
    """
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ValueError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ValueError(
                        f"{path}: unknown key {key!r} in [{section}]")
                attr = SCHEMA[section][key]
                setattr(cfg, attr, _coerce(attr, raw))
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        cfg.output_dir = env_out
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """section.key=value pairs, same schema and coercion as the file."""
    for item in overrides:
        spec, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not section.key=value")
        section, dot, key = spec.partition(".")
        if not dot or section not in SCHEMA or key not in SCHEMA[section]:
            raise ValueError(f"override {item!r}: unknown config key "
                             f"{spec!r}")
        attr = SCHEMA[section][key]
        setattr(cfg, attr, _coerce(attr, raw))
    return cfg


def config_text(cfg: RunConfig) -> str:
    """The effective configuration in file form (stable ordering)."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, attr in keys.items():
            lines.append(f"{key} = {getattr(cfg, attr)}")
        lines.append("")
    return "\n".join(lines)
