"""Experiment configuration: strict TOML parsing, defaults, validation and echo.

Grammar: a TOML document with top-level keys ``experiment``, ``seed`` and
``out`` plus the tables [dataset], [dictionary], [solver], [train],
[attack] and [certify].  Every key is optional except ``experiment``.
Unknown keys and values are errors.
"""
from __future__ import annotations

import difflib
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .errors import ConfigError

EXPERIMENTS = ("synthetic-nopool", "synthetic-pooled", "mnist", "certify", "layered-bounds")
METHODS = ("BP", "GBP", "PGBP", "BP+gap", "GBP+gap", "PGBP+gap", "DenseShallow", "DenseDeep", "LinearTransformer")
NORM_TAGS = ("l1", "l2", "elastic", "mixed")


@dataclass(frozen=True)
class DatasetSection:
    n: int = 100
    m: int = 300
    group_size: int = 4
    active_groups: int = 8
    amplitude: tuple = (1.0, 2.0)
    count: int = 2000
    margin: float = 0.1
    test_fraction: float = 0.2
    mnist_dir: str = ""
    mnist_train_count: int = 6000
    mnist_test_count: int = 1000


@dataclass(frozen=True)
class DictionarySection:
    max_rounds: int = 300
    target_mu: float = 0.0
    atoms: int = 256
    mnist_group_size: int = 8


@dataclass(frozen=True)
class SolverSection:
    gamma: float = 0.3
    tol: float = 1e-6
    max_iter: int = 5000
    nonnegative: bool = False


@dataclass(frozen=True)
class TrainSection:
    epochs_max: int = 500
    early_stop_patience: int = 10
    gamma_warmup_epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 0.01
    approximator_learning_rate: float = 0.05
    momentum: float = 0.9
    gap_weight: float = 0.1
    pretrain_epochs: int = 20


@dataclass(frozen=True)
class AttackSection:
    epsilons: tuple = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)
    steps: int = 10
    unroll: int = 300
    n_samples: int = 200
    norm: str = "linf"


@dataclass(frozen=True)
class CertifySection:
    instances: int = 20
    n: int = 50
    m: int = 100
    group_size: int = 4
    noise_level: float = 0.05
    c: float = 2.0 / 3.0
    tags: str = "mixed"
    n_active: int = 1


_SECTIONS = {"dataset": DatasetSection, "dictionary": DictionarySection, "solver": SolverSection,
             "train": TrainSection, "attack": AttackSection, "certify": CertifySection}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    out: str = "runs/experiment"
    methods: tuple = ("BP", "GBP", "PGBP")
    dataset: DatasetSection = field(default_factory=DatasetSection)
    dictionary: DictionarySection = field(default_factory=DictionarySection)
    solver: SolverSection = field(default_factory=SolverSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    certify: CertifySection = field(default_factory=CertifySection)

    def as_dict(self):
        return asdict(self)

    @property
    def config_hash(self):
        # the output directory does not affect results, so it is left out
        d = self.as_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, seed=None, out=None):
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if out is not None:
            kw["out"] = str(out)
        return replace(self, **kw)


def _suggest(word, options):
    m = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return f"; did you mean {m[0]!r}?" if m else ""


def _coerce(path, value, default):
    """Check a TOML value against the type of its default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        proto = default[0] if default else None
        return tuple(_coerce(f"{path}[{i}]", v, proto) if proto is not None else v for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _section(name, cls, table):
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}{_suggest(key, known)}")
        kw[key] = _coerce(f"{name}.{key}", value, known[key].default)
    return cls(**kw)


def _syntax_error(exc, text):
    line = getattr(exc, "lineno", None)
    col = getattr(exc, "colno", None)
    if line is None:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        if m:
            line, col = int(m.group(1)), int(m.group(2))
    return ConfigError(f"syntax error: {exc}", line, col)


def parse_config_text(text) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise _syntax_error(exc, text) from None
    top = {f.name: f for f in fields(ExperimentConfig)}
    kw = {}
    for key, value in doc.items():
        if key not in top:
            raise ConfigError(f"unknown key {key}{_suggest(key, top)}")
        if key in _SECTIONS:
            kw[key] = _section(key, _SECTIONS[key], value)
        elif key == "experiment":
            kw[key] = _coerce(key, value, "")
        elif key == "methods":
            kw[key] = _coerce(key, value, ("",))
        else:
            kw[key] = _coerce(key, value, top[key].default)
    if "experiment" not in kw:
        raise ConfigError("missing required key experiment")
    cfg = ExperimentConfig(**kw)
    validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(p.read_text())


def validate(cfg: ExperimentConfig):
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown value {cfg.experiment!r}{_suggest(cfg.experiment, EXPERIMENTS)}")
    for i, m in enumerate(cfg.methods):
        if m not in METHODS:
            raise ConfigError(f"methods[{i}]: unknown value {m!r}{_suggest(m, METHODS)}")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError("methods: duplicate entries")
    eps = cfg.attack.epsilons
    if list(eps) != sorted(eps):
        raise ConfigError("attack.epsilons: list must be sorted ascending")
    if any(e < 0 for e in eps):
        raise ConfigError("attack.epsilons: budgets must be non-negative")
    if cfg.attack.norm not in ("linf", "l2"):
        raise ConfigError(f"attack.norm: unknown value {cfg.attack.norm!r}{_suggest(cfg.attack.norm, ('linf', 'l2'))}")
    if cfg.certify.tags not in NORM_TAGS:
        raise ConfigError(f"certify.tags: unknown value {cfg.certify.tags!r}{_suggest(cfg.certify.tags, NORM_TAGS)}")
    ds = cfg.dataset
    if ds.m % ds.group_size:
        raise ConfigError("dataset.m: must be a multiple of dataset.group_size")
    if not 0 < ds.active_groups <= ds.m // ds.group_size:
        raise ConfigError("dataset.active_groups: out of range")
    if len(ds.amplitude) != 2 or not 0 < ds.amplitude[0] <= ds.amplitude[1]:
        raise ConfigError("dataset.amplitude: expected [low, high] with 0 < low <= high")
    if not 0 < ds.test_fraction < 1:
        raise ConfigError("dataset.test_fraction: must lie in (0, 1)")
    if cfg.solver.gamma <= 0:
        raise ConfigError("solver.gamma: must be positive")
    if not 0 < cfg.certify.c < 1:
        raise ConfigError("certify.c: must lie in (0, 1)")
    if cfg.experiment == "mnist":
        d = Path(ds.mnist_dir) if ds.mnist_dir else None
        if d is None or not d.is_dir():
            raise ConfigError(f"dataset.mnist_dir: directory {ds.mnist_dir!r} not found")
    return cfg


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)


def echo(cfg: ExperimentConfig) -> str:
    """Resolved configuration (every default spelled out) in the input syntax."""
    lines = [f"experiment = {_fmt(cfg.experiment)}", f"seed = {cfg.seed}", f"out = {_fmt(cfg.out)}",
             f"methods = {_fmt(cfg.methods)}"]
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"{f.name} = {_fmt(getattr(sec, f.name))}")
    lines.append("")
    lines.append(f"# config hash {cfg.config_hash}")
    return "\n".join(lines) + "\n"
