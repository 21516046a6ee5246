"""Pipeline configuration: one versioned YAML document.

Sections map onto the dataclasses of each module. Unknown keys are rejected
with the dotted field name so typos fail loudly.
"""
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import yaml

from hallulrp.detector import MlpHyper
from hallulrp.lrp import LrpConfig
from hallulrp.model.training import TrainConfig
from hallulrp.perturb import GenConfig, Thresholds
from hallulrp.toydata import ToyTaskConfig

CONFIG_VERSION = 1

# stage ids for seed derivation; never renumber
STAGES = {"corpus": 1, "train": 2, "generate": 3, "detector": 4, "random": 5, "stress": 6, "heldout": 7}


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"config field {field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class CorpusConfig:
    size: int = 20000
    heldout: int = 300
    vocab_min_count: int = 2
    vocab_max_size: int = 200


@dataclass(frozen=True)
class ModelDims:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_src_len: int = 32
    max_tgt_len: int = 32
    label_smoothing: float = 0.1


@dataclass(frozen=True)
class FeatureConfig:
    K1: int = 3
    K2: int = 3
    k_max: int = 3
    lambda_grid: tuple = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0)


@dataclass(frozen=True)
class DetectorConfig:
    hidden: int = 16
    lr: float = 0.5
    epochs: int = 1500
    patience: int = 300
    n_seeds: int = 20
    runs: int = 3
    k_grid: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)

    def hyper(self):
        return MlpHyper(hidden=self.hidden, lr=self.lr, epochs=self.epochs, patience=self.patience)


@dataclass(frozen=True)
class EvalConfig:
    top_k: int = 20
    rate: float = 0.01
    stress_size: int = 2000


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    toy: ToyTaskConfig = ToyTaskConfig()
    corpus: CorpusConfig = CorpusConfig()
    model: ModelDims = ModelDims()
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = GenConfig()
    lrp: LrpConfig = LrpConfig()
    features: FeatureConfig = FeatureConfig()
    detector: DetectorConfig = DetectorConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self):
        return _plain(asdict(self))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage_seed(self, stage):
        """Per-stage seed derived from the master seed and a fixed stage id."""
        ss = np.random.SeedSequence([self.seed, STAGES[stage]])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def gen_config(self):
        return dataclasses.replace(self.gen, seed=self.stage_seed("generate"))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NESTED = {Thresholds}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(name, "unknown field")
        default = _default(known[key])
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            value = _build(type(default), value, name)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(path or "<root>", str(e)) from None


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def config_from_dict(data):
    data = dict(data or {})
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version}")
    return _build(PipelineConfig, data, "")


def load_config(path=None):
    if path is None:
        text = resources.files("hallulrp").joinpath("configs/default.yaml").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"invalid YAML: {e}") from None
    return config_from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
