"""Flat `key = value` experiment configuration.

The format is line-oriented text: one dotted key per line, `#` starts a
comment, order is irrelevant. Every key has a desk-scale default, so an
empty file is a valid (if slow to type) experiment. Validation failures
carry the offending line number whenever the key appeared in the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

STRATEGIES = ("random", "pretrain", "fm_instructed", "centralized", "standalone")
PARTITION_KINDS = ("iid", "age_skew", "quantity_skew")
FEDERATED_INITS = ("random", "pretrain", "fm_instructed")


def _parse_int(text):
    return int(text)


def _parse_float(text):
    return float(text)


def _parse_str(text):
    return text


def _parse_float_list(text):
    return tuple(float(x.strip()) for x in text.split(",") if x.strip())


def _parse_int_list(text):
    return tuple(int(x.strip()) for x in text.split(",") if x.strip())


def _parse_str_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass
class ExperimentConfig:
    # corpus
    n_train: int = 300
    n_test: int = 60
    n_proxy: int = 60
    image_side: int = 32
    corpus_seed: int = 7
    # partitions
    partition_kinds: tuple = ("age_skew", "iid")
    age_boundaries: tuple = (33.0, 66.0)
    quantity_fractions: tuple = (0.7, 0.2, 0.1)
    # federation
    clients: int = 3
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 8
    lr: float = 1e-4
    # initialization training (pre-training and distillation share the
    # same epoch budget by design, so strategies differ in objective only)
    init_epochs: int = 20
    init_lr: float = 1e-3
    init_batch_size: int = 8
    # distillation
    alpha: float = 0.6
    temperature: float = 1.0
    segment_target: str = "gt"
    # teacher
    teacher_epochs: int = 40
    teacher_lr: float = 2e-3
    teacher_train_multiple: int = 4
    # experiment plan
    strategies: tuple = ("random", "pretrain", "fm_instructed", "centralized", "standalone")
    seeds: tuple = (1, 2, 3)
    output_dir: str = "runs/desk"
    # bookkeeping: key -> source line for error anchoring
    _lines: dict = field(default_factory=dict, repr=False)

    def _where(self, key):
        line = self._lines.get(key)
        return f"line {line}: " if line else ""

    def validate(self):
        checks = [
            ("corpus.n_train", self.n_train >= 1, "corpus.n_train must be >= 1"),
            ("corpus.n_test", self.n_test >= 1, "corpus.n_test must be >= 1"),
            ("corpus.n_proxy", self.n_proxy >= 1, "corpus.n_proxy must be >= 1"),
            ("corpus.image_side", self.image_side >= 8 and self.image_side % 8 == 0,
             "corpus.image_side must be a positive multiple of 8 (depth-3 networks)"),
            ("federation.clients", self.clients >= 1, "federation.clients must be >= 1"),
            ("federation.rounds", self.rounds >= 1, "federation.rounds must be >= 1"),
            ("federation.local_epochs", self.local_epochs >= 1,
             "federation.local_epochs must be >= 1"),
            ("federation.batch_size", self.batch_size >= 1,
             "federation.batch_size must be >= 1"),
            ("federation.lr", self.lr > 0, "federation.lr must be positive"),
            ("init.epochs", self.init_epochs >= 0, "init.epochs must be >= 0"),
            ("init.lr", self.init_lr > 0, "init.lr must be positive"),
            ("init.batch_size", self.init_batch_size >= 1, "init.batch_size must be >= 1"),
            ("distill.alpha", 0.0 <= self.alpha <= 1.0,
             f"distill.alpha must lie in [0, 1], got {self.alpha}"),
            ("distill.temperature", self.temperature > 0,
             "distill.temperature must be positive"),
            ("distill.segment_target", self.segment_target in ("gt", "teacher"),
             "distill.segment_target must be 'gt' or 'teacher'"),
            ("teacher.epochs", self.teacher_epochs >= 1, "teacher.epochs must be >= 1"),
            ("teacher.lr", self.teacher_lr > 0, "teacher.lr must be positive"),
            ("teacher.train_multiple", self.teacher_train_multiple >= 1,
             "teacher.train_multiple must be >= 1"),
            ("seeds", len(self.seeds) >= 1, "at least one seed is required"),
            ("strategies", len(self.strategies) >= 1, "at least one strategy is required"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"{self._where(key)}{message}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(
                    f"{self._where('strategies')}unknown strategy '{s}' "
                    f"(choose from {', '.join(STRATEGIES)})"
                )
        for p in self.partition_kinds:
            if p not in PARTITION_KINDS:
                raise ConfigError(
                    f"{self._where('partition.kinds')}unknown partition kind '{p}' "
                    f"(choose from {', '.join(PARTITION_KINDS)})"
                )
        needs_partition = any(
            s in FEDERATED_INITS or s == "standalone" for s in self.strategies
        )
        if needs_partition and not self.partition_kinds:
            raise ConfigError(
                f"{self._where('partition.kinds')}federated strategies need "
                "at least one partition kind"
            )
        if "age_skew" in self.partition_kinds and len(self.age_boundaries) != self.clients - 1:
            raise ConfigError(
                f"{self._where('partition.age_boundaries')}age skew with "
                f"{self.clients} clients needs {self.clients - 1} boundaries, "
                f"got {len(self.age_boundaries)}"
            )
        if "quantity_skew" in self.partition_kinds and len(self.quantity_fractions) != self.clients:
            raise ConfigError(
                f"{self._where('partition.fractions')}quantity skew needs "
                f"{self.clients} fractions, got {len(self.quantity_fractions)}"
            )
        return self

    def arms(self):
        """Canonical (strategy, partition, seed) triples for this plan."""
        out = []
        for strategy in self.strategies:
            if strategy == "centralized":
                parts = ("pooled",)
            else:
                parts = self.partition_kinds
            for part in parts:
                for seed in self.seeds:
                    out.append((strategy, part, seed))
        return out


_SCHEMA = {
    "corpus.n_train": ("n_train", _parse_int),
    "corpus.n_test": ("n_test", _parse_int),
    "corpus.n_proxy": ("n_proxy", _parse_int),
    "corpus.image_side": ("image_side", _parse_int),
    "corpus.seed": ("corpus_seed", _parse_int),
    "partition.kinds": ("partition_kinds", _parse_str_list),
    "partition.age_boundaries": ("age_boundaries", _parse_float_list),
    "partition.fractions": ("quantity_fractions", _parse_float_list),
    "federation.clients": ("clients", _parse_int),
    "federation.rounds": ("rounds", _parse_int),
    "federation.local_epochs": ("local_epochs", _parse_int),
    "federation.batch_size": ("batch_size", _parse_int),
    "federation.lr": ("lr", _parse_float),
    "init.epochs": ("init_epochs", _parse_int),
    "init.lr": ("init_lr", _parse_float),
    "init.batch_size": ("init_batch_size", _parse_int),
    "distill.alpha": ("alpha", _parse_float),
    "distill.temperature": ("temperature", _parse_float),
    "distill.segment_target": ("segment_target", _parse_str),
    "teacher.epochs": ("teacher_epochs", _parse_int),
    "teacher.lr": ("teacher_lr", _parse_float),
    "teacher.train_multiple": ("teacher_train_multiple", _parse_int),
    "strategies": ("strategies", _parse_str_list),
    "seeds": ("seeds", _parse_int_list),
    "output_dir": ("output_dir", _parse_str),
}


def load_config(path):
    """Parse and validate a config file into an ExperimentConfig."""
    cfg = ExperimentConfig()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            attr, parse = _SCHEMA[key]
            try:
                setattr(cfg, attr, parse(value))
            except ValueError as exc:
                raise ConfigError(
                    f"line {lineno}: bad value for '{key}': {value!r} ({exc})"
                ) from None
            cfg._lines[key] = lineno
    return cfg.validate()
