"""Experiment configuration and dataset assembly for the command line."""
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import data
from .errors import ConfigError, MissingFileError
from .netgraph import ArchitectureConfig, preset
from .optim import TrainPlan

DATA_DIR_ENV = "PSSP_DATA_DIR"
CULLPDB_FILE = "cullpdb+profile_6133_filtered.npy.gz"
CB513_FILE = "cb513+profile_split1.npy.gz"


def data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


@dataclass
class ToySpec:
    seed: int = 0
    n_proteins: int = 64
    length: int = 100
    rule: str = "local-window"
    val_proteins: int = 16
    test_proteins: int = 16


@dataclass
class DataSpec:
    train_path: str = None
    test_path: str = None
    layout_path: str = None
    toy: ToySpec = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        toy = d.pop("toy", None)
        _reject_unknown(cls, d, "data")
        return cls(toy=ToySpec(**toy) if toy else None, **d)


@dataclass
class DecodeSpec:
    beam: int = 8
    blend: float = 0.45


@dataclass
class ExperimentConfig:
    architecture: ArchitectureConfig = field(default_factory=lambda: preset("final"))
    train: TrainPlan = field(default_factory=TrainPlan)
    data: DataSpec = field(default_factory=DataSpec)
    decode: DecodeSpec = field(default_factory=DecodeSpec)
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        self.architecture.validate()
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        if not 0.0 <= self.decode.blend <= 1.0:
            raise ConfigError("decode.blend must lie in [0, 1]")
        if self.data.toy is None and self.data.train_path is None:
            raise ConfigError("config needs data.train_path or data.toy")
        if self.data.toy is not None and self.data.toy.rule not in ("local-window", "copy-prone"):
            raise ConfigError(f"unknown toy rule {self.data.toy.rule!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _reject_unknown(cls, d, "experiment")
        arch = d.get("architecture", "final")
        if isinstance(arch, str):
            arch = preset(arch) if not Path(arch).exists() else ArchitectureConfig.load(arch)
        else:
            arch = ArchitectureConfig.from_dict(arch)
        try:
            cfg = cls(
                architecture=arch,
                train=TrainPlan.from_dict(d.get("train", {})),
                data=DataSpec.from_dict(d.get("data", {})),
                decode=DecodeSpec(**d.get("decode", {})),
                seed=d.get("seed", 0),
                deterministic=d.get("deterministic", True),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"no such config: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self):
        return {
            "architecture": self.architecture.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "decode": asdict(self.decode),
            "seed": self.seed,
            "deterministic": self.deterministic,
        }


def _reject_unknown(cls, d, what):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


def _resolve(path):
    p = Path(path)
    if p.exists():
        return p
    alt = data_dir() / p
    if alt.exists():
        return alt
    raise MissingFileError(f"data file not found: {path} (also looked in ${DATA_DIR_ENV}={data_dir()})")


def load_datasets(spec, seed):
    """Return ``(train, val, test, norm_stats)`` for a :class:`DataSpec`.

    Real data is standardised with statistics from the training split; toy
    data is used as generated. ``test`` is empty when no test source is set.
    """
    if spec.toy is not None:
        t = spec.toy
        train = data.synth_toy_dataset(t.seed, t.n_proteins, t.length, t.rule)
        val = data.synth_toy_dataset(t.seed + 1, t.val_proteins, t.length, t.rule)
        test = data.synth_toy_dataset(t.seed + 2, t.test_proteins, t.length, t.rule)
        return train, val, test, None
    layout = data.ColumnLayout.from_json(spec.layout_path) if spec.layout_path else data.DEFAULT_LAYOUT
    records = data.load_records(_resolve(spec.train_path), layout, prefix="cullpdb")
    train, val = data.split_train_val(records, seed)
    stats = data.normalize_pssm(train)
    train = data.apply_normalization(stats, train)
    val = data.apply_normalization(stats, val)
    test = []
    if spec.test_path:
        test = data.apply_normalization(stats, data.load_records(_resolve(spec.test_path), layout, prefix="cb513"))
    return train, val, test, stats
