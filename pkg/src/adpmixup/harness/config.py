"""Experiment configuration: a nested JSON document mapped onto frozen dataclasses.

Every key is optional; missing keys take the defaults below, unknown keys are
rejected.  Relative data paths are resolved against the config file's
directory.  The full schema, with defaults::

    {
      "task": "sentiment",
      "paths": {"pretrain": null, "train": null, "test": null,
                "synonyms": null, "checkpoints": "checkpoints"},
      "corpus": {"n_pretrain": 400, "n_train": 600, "n_test": 300,
                 "noise": 0.2, "clauses": [1, 2]},
      "model": {"vocab_size": 4096, "dim": 32, "rank": 8, "max_len": 64,
                "embed_scale": 0.2},
      "pretrain": {"learning_rate": 0.5, "epochs": 10, "batch_size": 16},
      "train": {"learning_rate": 0.75, "epochs": 80, "batch_size": 16, "alpha": 0.5},
      "attacks": {"pre_known": [{"kind": "word_synonym", "budget": 0.3, "max_queries": 500}],
                  "target": {"kind": "word_synonym", "budget": 0.3, "max_queries": 500},
                  "synonyms_per_word": 1,
                  "profile": ["char_swap", "char_noise", "word_synonym", "word_greedy"],
                  "profile_samples": 100},
      "mixing": {"calibration_samples": 100, "model_soup_alpha": 0.5},
      "seeds": [0, 1, 2, 3, 4],
      "studies": {"clean_ratios": [0.0, 0.25, 0.5, 0.75, 1.0], "beta_step": 0.1,
                  "thresholds": [0.0, 0.1, ..., 1.0], "adversarial_ratio": 0.15}
    }

When ``paths.pretrain``/``train``/``test`` are null the synthetic keyword
corpus is generated per seed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from typing import Any, Optional

from ..attacks import KINDS, WORD_KINDS, AttackSpec, load_synonyms
from ..model import DEFAULT_CLASSES, DEFAULT_DIM, DEFAULT_EMBED_SCALE, DEFAULT_MAX_LEN, DEFAULT_RANK, DEFAULT_VOCAB
from ..training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


def _grid(step: float) -> tuple:
    n = int(round(1.0 / step))
    return tuple(round(i * step, 10) for i in range(n + 1))


DEFAULTS: dict[str, Any] = {
    "task": "sentiment",
    "paths": {"pretrain": None, "train": None, "test": None, "synonyms": None, "checkpoints": "checkpoints"},
    "corpus": {"n_pretrain": 400, "n_train": 600, "n_test": 300, "noise": 0.2, "clauses": [1, 2]},
    "model": {"vocab_size": DEFAULT_VOCAB, "dim": DEFAULT_DIM, "rank": DEFAULT_RANK,
              "max_len": DEFAULT_MAX_LEN, "embed_scale": DEFAULT_EMBED_SCALE},
    "pretrain": {"learning_rate": 0.5, "epochs": 10, "batch_size": 16},
    "train": {"learning_rate": 0.75, "epochs": 80, "batch_size": 16, "alpha": 0.5},
    "attacks": {
        "pre_known": [{"kind": "word_synonym", "budget": 0.3, "max_queries": 500}],
        "target": {"kind": "word_synonym", "budget": 0.3, "max_queries": 500},
        "synonyms_per_word": 1,
        "profile": list(KINDS),
        "profile_samples": 100,
    },
    "mixing": {"calibration_samples": 100, "model_soup_alpha": 0.5},
    "seeds": [0, 1, 2, 3, 4],
    "studies": {"clean_ratios": [0.0, 0.25, 0.5, 0.75, 1.0], "beta_step": 0.1,
                "thresholds": list(_grid(0.1)), "adversarial_ratio": 0.15},
}


@dataclasses.dataclass(frozen=True)
class AttackConfig:
    kind: str
    budget: float = 0.3
    max_queries: int = 500

    def spec(self, seed: int, synonyms) -> AttackSpec:
        table = synonyms if self.kind in WORD_KINDS else None
        return AttackSpec(self.kind, self.budget, self.max_queries, seed, table)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    task: str = "sentiment"
    pretrain_path: Optional[str] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    synonyms_path: Optional[str] = None
    checkpoint_dir: str = "checkpoints"
    n_pretrain: int = 400
    n_train: int = 600
    n_test: int = 300
    noise: float = 0.2
    clauses: tuple = (1, 2)
    vocab_size: int = DEFAULT_VOCAB
    dim: int = DEFAULT_DIM
    rank: int = DEFAULT_RANK
    max_len: int = DEFAULT_MAX_LEN
    embed_scale: float = DEFAULT_EMBED_SCALE
    num_classes: int = DEFAULT_CLASSES
    pretrain: TrainConfig = TrainConfig(epochs=10)
    train: TrainConfig = TrainConfig(learning_rate=0.75, epochs=80)
    pre_known: tuple = (AttackConfig("word_synonym"),)
    target: AttackConfig = AttackConfig("word_synonym")
    synonyms_per_word: Optional[int] = 1
    profile_attacks: tuple = KINDS
    profile_samples: int = 100
    calibration_samples: int = 100
    model_soup_alpha: float = 0.5
    seeds: tuple = (0, 1, 2, 3, 4)
    clean_ratios: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    beta_step: float = 0.1
    thresholds: tuple = _grid(0.1)
    adversarial_ratio: float = 0.15

    def __post_init__(self):
        if not 1 <= len(self.pre_known) <= 5:
            raise ConfigError("between 1 and 5 pre-known attacks are required")
        kinds = [a.kind for a in self.pre_known]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("pre-known attacks must be distinct kinds")
        for a in (*self.pre_known, self.target):
            if a.kind not in KINDS:
                raise ConfigError(f"unknown attack kind {a.kind!r}")
            if not 0.0 < a.budget <= 1.0 or a.max_queries < 1:
                raise ConfigError(f"bad budget or query cap for {a.kind}")
        for k in self.profile_attacks:
            if k not in KINDS:
                raise ConfigError(f"unknown profile attack {k!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name in ("clean_ratios", "thresholds"):
            grid = getattr(self, name)
            if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
                raise ConfigError(f"{name} must be a nonempty grid inside [0, 1]")
            if list(grid) != sorted(set(grid)):
                raise ConfigError(f"{name} must be strictly increasing")
        n = round(1.0 / self.beta_step) if self.beta_step > 0 else 0
        if n < 1 or abs(n * self.beta_step - 1.0) > 1e-9:
            raise ConfigError("beta_step must divide 1 evenly")
        if not 0.0 < self.adversarial_ratio < 1.0:
            raise ConfigError("adversarial_ratio must lie in (0, 1)")
        if not 0.0 <= self.model_soup_alpha <= 1.0:
            raise ConfigError("model_soup_alpha must lie in [0, 1]")
        if self.calibration_samples < 2 or self.profile_samples < 1:
            raise ConfigError("calibration_samples must be >= 2 and profile_samples >= 1")
        if min(self.n_pretrain, self.n_train, self.n_test) < 2:
            raise ConfigError("corpus sizes must be at least 2")
        if len(self.clauses) != 2 or not 1 <= self.clauses[0] <= self.clauses[1]:
            raise ConfigError("clauses must be [lo, hi] with 1 <= lo <= hi")
        if not 0 < self.rank < self.dim:
            raise ConfigError("rank must satisfy 0 < rank < dim")
        if self.synonyms_per_word is not None and self.synonyms_per_word < 1:
            raise ConfigError("synonyms_per_word must be positive or null")

    @property
    def beta_grid(self) -> tuple:
        return _grid(self.beta_step)

    def synonyms(self) -> dict:
        return load_synonyms(self.synonyms_path, self.synonyms_per_word)

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def pretrain_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.pretrain, seed=seed)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))

    def to_dict(self) -> dict:
        """The nested JSON form; ``from_dict(to_dict())`` round-trips."""
        attack = lambda a: {"kind": a.kind, "budget": a.budget, "max_queries": a.max_queries}
        return {
            "task": self.task,
            "paths": {"pretrain": self.pretrain_path, "train": self.train_path, "test": self.test_path,
                      "synonyms": self.synonyms_path, "checkpoints": self.checkpoint_dir},
            "corpus": {"n_pretrain": self.n_pretrain, "n_train": self.n_train, "n_test": self.n_test,
                       "noise": self.noise, "clauses": list(self.clauses)},
            "model": {"vocab_size": self.vocab_size, "dim": self.dim, "rank": self.rank,
                      "max_len": self.max_len, "embed_scale": self.embed_scale},
            "pretrain": {"learning_rate": self.pretrain.learning_rate, "epochs": self.pretrain.epochs,
                         "batch_size": self.pretrain.batch_size},
            "train": {"learning_rate": self.train.learning_rate, "epochs": self.train.epochs,
                      "batch_size": self.train.batch_size, "alpha": self.train.alpha},
            "attacks": {"pre_known": [attack(a) for a in self.pre_known], "target": attack(self.target),
                        "synonyms_per_word": self.synonyms_per_word, "profile": list(self.profile_attacks),
                        "profile_samples": self.profile_samples},
            "mixing": {"calibration_samples": self.calibration_samples,
                       "model_soup_alpha": self.model_soup_alpha},
            "seeds": list(self.seeds),
            "studies": {"clean_ratios": list(self.clean_ratios), "beta_step": self.beta_step,
                        "thresholds": list(self.thresholds), "adversarial_ratio": self.adversarial_ratio},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, where + key + ".")
        else:
            out[key] = value
    return out


def _attack(obj, where) -> AttackConfig:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where} must be an object with a 'kind'")
    extra = set(obj) - {"kind", "budget", "max_queries"}
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return AttackConfig(str(obj["kind"]), float(obj.get("budget", 0.3)), int(obj.get("max_queries", 500)))


def from_dict(raw: dict, base_dir: Optional[str] = None) -> ExperimentConfig:
    """Build and validate a config from its nested form, filling defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    d = _merge(DEFAULTS, raw)
    paths = dict(d["paths"])
    for key in ("pretrain", "train", "test", "synonyms"):
        p = paths[key]
        if p is None:
            continue
        if base_dir is not None and not os.path.isabs(p):
            p = os.path.join(base_dir, p)
        if not os.path.isfile(p):
            raise ConfigError(f"paths.{key} does not exist: {p}")
        paths[key] = p
    try:
        c, m, at, st = d["corpus"], d["model"], d["attacks"], d["studies"]
        cfg = ExperimentConfig(
            task=str(d["task"]),
            pretrain_path=paths["pretrain"], train_path=paths["train"], test_path=paths["test"],
            synonyms_path=paths["synonyms"], checkpoint_dir=str(paths["checkpoints"]),
            n_pretrain=int(c["n_pretrain"]), n_train=int(c["n_train"]), n_test=int(c["n_test"]),
            noise=float(c["noise"]), clauses=tuple(int(x) for x in c["clauses"]),
            vocab_size=int(m["vocab_size"]), dim=int(m["dim"]), rank=int(m["rank"]),
            max_len=int(m["max_len"]), embed_scale=float(m["embed_scale"]),
            pretrain=TrainConfig(**d["pretrain"]),
            train=TrainConfig(**d["train"]),
            pre_known=tuple(_attack(a, f"attacks.pre_known[{i}]") for i, a in enumerate(at["pre_known"])),
            target=_attack(at["target"], "attacks.target"),
            synonyms_per_word=None if at["synonyms_per_word"] is None else int(at["synonyms_per_word"]),
            profile_attacks=tuple(str(k) for k in at["profile"]),
            profile_samples=int(at["profile_samples"]),
            calibration_samples=int(d["mixing"]["calibration_samples"]),
            model_soup_alpha=float(d["mixing"]["model_soup_alpha"]),
            seeds=tuple(int(s) for s in d["seeds"]),
            clean_ratios=tuple(float(r) for r in st["clean_ratios"]),
            beta_step=float(st["beta_step"]),
            thresholds=tuple(float(t) for t in st["thresholds"]),
            adversarial_ratio=float(st["adversarial_ratio"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw, os.path.dirname(os.path.abspath(path)))
