"""Experiment configuration: a versioned YAML/JSON document with strict keys.

Absent fields take the federated-simulation table defaults (MNIST:
K=100, k=30, b=32, i=10, eta=0.01; consumption: b=7, eta=0.1).  The
short table symbols (``K``, ``k``, ``b``, ``i``, ``eta``, ``tau``, ``T``)
are accepted as aliases of the long ``fl`` keys, and validation errors
name the key exactly as the user spelled it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackProfile
from .defense import RLConfig
from .federated import FLConfig

SCHEMA_VERSION = 1

CLASSIFICATION_KINDS = ("mnist", "synthetic_classification")
REGRESSION_KINDS = ("power_consumption", "synthetic_regression")
DATASET_KINDS = CLASSIFICATION_KINDS + REGRESSION_KINDS

FL_ALIASES = {
    "K": "total_clients",
    "k": "clients_per_round",
    "b": "batch_size",
    "i": "local_epochs",
    "eta": "learning_rate",
    "tau": "accuracy_threshold",
    "T": "max_rounds",
}
TABLE_DEFAULTS = {
    "classification": {"batch_size": 32, "learning_rate": 0.01},
    "regression": {"batch_size": 7, "learning_rate": 0.1},
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "mnist"
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    path: str | None = None
    target: str = "Global_active_power"
    n: int = 2000
    dim: int = 8
    classes: int = 10
    margin: float = 6.0
    noise_std: float = 0.1
    test_fraction: float = 0.2
    partition: str | None = None
    shards_per_client: int = 2

    @property
    def task(self) -> str:
        return "classification" if self.kind in CLASSIFICATION_KINDS else "regression"

    @property
    def partition_scheme(self) -> str:
        if self.partition is not None:
            return self.partition
        return "noniid" if self.task == "classification" else "iid"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int | None = None

    def width(self, task: str) -> int:
        if self.hidden is not None:
            return self.hidden
        return 64 if task == "classification" else 32


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = math.inf
    delta_round: float = 1e-5
    sensitivity: float = 1.0
    budget: float = 0.001


@dataclass(frozen=True)
class SweepConfig:
    epsilons: tuple[float, ...] = (8.0, 4.0, 1.0)
    gammas: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1)
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class DetectConfig:
    margin: float = 0.2
    eval_runs: int = 5


@dataclass(frozen=True)
class RLSection:
    agent: RLConfig = field(default_factory=RLConfig)
    environment: str = "fl"
    fixed_seed: bool = False
    # off: the agent trains attack-free (building the detection baseline) and
    # the attack section only applies to detection replays
    train_under_attack: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    fl: FLConfig = field(default_factory=FLConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    attack: AttackProfile = field(default_factory=AttackProfile)
    rl: RLSection | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    output_dir: str | None = None


def _epsilon(value, key):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", "none", "off")):
        return math.inf
    try:
        eps = float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"not a number: {value!r}") from None
    if not eps > 0:
        raise ConfigError(key, "epsilon must be positive (use 'inf' to disable DP)")
    return eps


def _coerce(value, typ, key):
    try:
        if typ is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if typ is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if typ is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {typ.__name__}, got {value!r}") from None
    return value


_SCALARS = {"int": int, "float": float, "str": str, "bool": bool}


def _scalar_type(annotation) -> tuple[type | None, bool]:
    """(scalar type, optional?) for a field annotation, whether a string or a real type."""
    if isinstance(annotation, type):
        text = annotation.__name__
    else:
        text = str(annotation)
    parts = [p.strip() for p in text.split("|")]
    optional = "None" in parts
    parts = [p for p in parts if p != "None"]
    return (_SCALARS.get(parts[0]) if len(parts) == 1 else None), optional


def _section(cls, raw, key, aliases=None, overrides=None, skip=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(key, "expected a mapping")
    names = {f.name: f for f in fields(cls)}
    spelled: dict[str, str] = {}
    values: dict[str, Any] = dict(overrides or {})
    for k, v in raw.items():
        name = (aliases or {}).get(k, k)
        if name not in names or name in skip:
            raise ConfigError(f"{key}.{k}", "unknown key")
        if name in spelled:
            raise ConfigError(f"{key}.{k}", f"duplicates {key}.{spelled[name]}")
        spelled[name] = k
        typ, optional = _scalar_type(names[name].type)
        if v is None and optional:
            values[name] = None
        elif typ is not None:
            values[name] = _coerce(v, typ, f"{key}.{k}")
        else:
            values[name] = v
    return values, spelled


def _build(cls, values, spelled, key, blame=None):
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        culprit = None
        msg = str(exc)
        for name in blame or spelled:
            if name in msg:
                culprit = spelled.get(name, name)
                break
        if culprit is None and blame:
            culprit = spelled.get(blame[0], blame[0])
        raise ConfigError(f"{key}.{culprit}" if culprit else key, msg) from None


def parse_config_dict(doc: dict | None) -> ExperimentConfig:
    doc = {} if doc is None else dict(doc)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a mapping")
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    for k in doc:
        if k not in known:
            raise ConfigError(k, "unknown key")

    seed = _coerce(doc.get("seed", 0), int, "seed")
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")

    ds_vals, ds_spelled = _section(DatasetSpec, doc.get("dataset"), "dataset")
    dataset = _build(DatasetSpec, ds_vals, ds_spelled, "dataset")
    if dataset.kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}")
    if dataset.partition not in (None, "iid", "noniid"):
        raise ConfigError("dataset.partition", "must be 'iid' or 'noniid'")
    if not 0 < dataset.test_fraction < 1:
        raise ConfigError("dataset.test_fraction", "must lie in (0, 1)")
    if dataset.kind == "power_consumption" and not dataset.path:
        raise ConfigError("dataset.path", "power_consumption needs a path")

    fl_vals, fl_spelled = _section(FLConfig, doc.get("fl"), "fl", aliases=FL_ALIASES,
                                   overrides=TABLE_DEFAULTS[dataset.task], skip=("master_seed",))
    fl_vals["master_seed"] = seed
    order = ["clients_per_round", "total_clients", "batch_size", "local_epochs",
             "max_rounds", "learning_rate"]
    fl = _build(FLConfig, fl_vals, fl_spelled, "fl", blame=order)

    m_vals, m_spelled = _section(ModelConfig, doc.get("model"), "model")
    model = _build(ModelConfig, m_vals, m_spelled, "model")
    if model.hidden is not None and model.hidden < 1:
        raise ConfigError("model.hidden", "must be positive")

    raw_priv = dict(doc.get("privacy") or {})
    eps_raw = raw_priv.pop("epsilon", math.inf)
    p_vals, p_spelled = _section(PrivacyConfig, raw_priv, "privacy", skip=("epsilon",))
    p_vals["epsilon"] = _epsilon(eps_raw, "privacy.epsilon")
    privacy = _build(PrivacyConfig, p_vals, p_spelled, "privacy")
    if not 0 < privacy.delta_round < 1:
        raise ConfigError("privacy.delta_round", "must lie in (0, 1)")
    if not privacy.sensitivity > 0:
        raise ConfigError("privacy.sensitivity", "must be positive")
    if privacy.budget < 0:
        raise ConfigError("privacy.budget", "must be non-negative")

    a_vals, a_spelled = _section(AttackProfile, doc.get("attack"), "attack")
    attack = _build(AttackProfile, a_vals, a_spelled, "attack", blame=["gamma", "target"])

    rl = None
    if doc.get("rl") is not None:
        raw_rl = dict(doc["rl"])
        env = raw_rl.pop("environment", "fl")
        fixed = raw_rl.pop("fixed_seed", False)
        under_attack = raw_rl.pop("train_under_attack", False)
        if env not in ("fl", "toy"):
            raise ConfigError("rl.environment", "must be 'fl' or 'toy'")
        if "psi" in raw_rl:
            raw_rl["psi"] = tuple(_coerce(v, float, "rl.psi") for v in raw_rl["psi"])
        if "eps_grid" in raw_rl:
            raw_rl["eps_grid"] = tuple(_coerce(v, float, "rl.eps_grid") for v in raw_rl["eps_grid"])
        r_vals, r_spelled = _section(RLConfig, raw_rl, "rl")
        agent = _build(RLConfig, r_vals, r_spelled, "rl")
        rl = RLSection(agent, env, _coerce(fixed, bool, "rl.fixed_seed"),
                       _coerce(under_attack, bool, "rl.train_under_attack"))

    raw_sweep = dict(doc.get("sweep") or {})
    for k in raw_sweep:
        if k not in ("epsilons", "gammas", "seeds"):
            raise ConfigError(f"sweep.{k}", "unknown key")
    sweep = SweepConfig()
    if "epsilons" in raw_sweep:
        sweep = replace(sweep, epsilons=tuple(_epsilon(v, "sweep.epsilons") for v in raw_sweep["epsilons"]))
    if "gammas" in raw_sweep:
        gs = tuple(_coerce(v, float, "sweep.gammas") for v in raw_sweep["gammas"])
        if any(g < 0 for g in gs):
            raise ConfigError("sweep.gammas", "gamma must be non-negative")
        sweep = replace(sweep, gammas=gs)
    if "seeds" in raw_sweep:
        sweep = replace(sweep, seeds=tuple(_coerce(v, int, "sweep.seeds") for v in raw_sweep["seeds"]))
    for name in ("epsilons", "gammas", "seeds"):
        if not getattr(sweep, name):
            raise ConfigError(f"sweep.{name}", "must not be empty")

    d_vals, d_spelled = _section(DetectConfig, doc.get("detect"), "detect")
    detect = _build(DetectConfig, d_vals, d_spelled, "detect")
    if not detect.margin >= 0:
        raise ConfigError("detect.margin", "must be non-negative")
    if detect.eval_runs < 1:
        raise ConfigError("detect.eval_runs", "must be positive")

    out = doc.get("output_dir")
    if out is not None:
        out = _coerce(out, str, "output_dir")

    return ExperimentConfig(seed, fl, model, privacy, attack, rl, dataset, sweep, detect, out)


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML/JSON: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a mapping")
    return parse_config_dict(doc)


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical document; ``parse_config_dict`` of it rebuilds an equal config."""
    fl = asdict(cfg.fl)
    fl.pop("master_seed")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "fl": fl,
        "model": asdict(cfg.model),
        "privacy": asdict(cfg.privacy),
        "attack": asdict(cfg.attack),
        "dataset": asdict(cfg.dataset),
        "sweep": asdict(cfg.sweep),
        "detect": asdict(cfg.detect),
        "output_dir": cfg.output_dir,
    }
    if cfg.rl is not None:
        doc["rl"] = {**asdict(cfg.rl.agent), "environment": cfg.rl.environment,
                     "fixed_seed": cfg.rl.fixed_seed,
                     "train_under_attack": cfg.rl.train_under_attack}
    return _plain(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
