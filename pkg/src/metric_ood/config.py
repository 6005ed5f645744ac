"""Experiment configuration: an INI file plus ``section.key=value`` overrides."""

import configparser
import io
from dataclasses import dataclass

from .data import SplitConfig
from .errors import ConfigurationError
from .losses import PairSchedule

MODES = ("ce", "ml", "odm")

DEFAULTS = {
    "experiment": {
        "mode": "odm",
        "seed": "0",
        "output_dir": "runs/default",
    },
    "data": {
        "dataset": "mnist",
        "mnist_dir": "",
        "cifar10_paths": "",
        "noise_count": "2000",
        "noise_mean": "0.5",
        "noise_stddev": "1.0",
        "validation_fraction": "0.1",
        "blob_n_per_class": "200",
        "blob_dims": "16",
        "blob_separation": "10",
        "blob_ood_separation": "30",
        "embeddings_per_source": "500",
    },
    "split": {
        "in_classes": "2,6,7",
        "seen_out_classes": "0,3,4,8",
        "unseen_out_classes": "5,9,1",
        "anomaly_sources": "cifar10,gaussian_noise",
        "seen_anomalies": "",
    },
    "model": {
        "architecture": "lenet",
        "embedding_dim": "5",
    },
    "train": {
        "optimizer": "adam",
        "learning_rate": "1e-4",
        "batch_size": "64",
        "steps": "5000",
        "margin": "10",
    },
    "pairs": {
        "cross_ratio": "0.25",
        "period": "2",
        "same_ratio": "0.5",
    },
}


def _ints(text):
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _names(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # section -> key -> string, after overrides
    mode: str
    seed: int
    output_dir: str
    split: SplitConfig
    pairs: PairSchedule
    architecture: str
    embedding_dim: int
    optimizer: str
    learning_rate: float
    batch_size: int
    steps: int
    margin: float

    def get(self, section, key):
        return self.raw[section][key]

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for section in sorted(self.raw):
            cp[section] = {k: self.raw[section][k] for k in sorted(self.raw[section])}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _typed(raw, section, key, conv):
    text = raw[section][key]
    try:
        return conv(text)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{section}.{key}: cannot parse {text!r}") from None


def parse_overrides(overrides):
    out = []
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        out.append((section, name, value.strip()))
    return out


def load_config(path=None, overrides=(), seed=None, output_dir=None, text=None):
    """Read defaults, then ``path`` (or ``text``), then overrides; validate."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                cp.read_file(f)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    if text is not None:
        cp.read_string(text)
    for section, key, value in parse_overrides(overrides):
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = value
    if seed is not None:
        cp["experiment"]["seed"] = str(int(seed))
    if output_dir is not None:
        cp["experiment"]["output_dir"] = str(output_dir)

    raw = {s: dict(cp[s]) for s in cp.sections()}
    for section, keys in raw.items():
        unknown = set(keys) - set(DEFAULTS.get(section, {}))
        if section not in DEFAULTS:
            raise ConfigurationError(f"unknown section [{section}]")
        if unknown:
            raise ConfigurationError(f"{section}.{sorted(unknown)[0]}: unknown key")
    return build_config(raw)


def build_config(raw):
    mode = raw["experiment"]["mode"].strip().lower()
    if mode not in MODES:
        raise ConfigurationError(f"experiment.mode: expected one of {MODES}, got {mode!r}")
    split = SplitConfig(
        in_classes=_typed(raw, "split", "in_classes", _ints),
        seen_out_classes=_typed(raw, "split", "seen_out_classes", _ints),
        unseen_out_classes=_typed(raw, "split", "unseen_out_classes", _ints),
        anomaly_sources=_names(raw["split"]["anomaly_sources"]),
        seen_anomalies=_names(raw["split"]["seen_anomalies"]),
    )
    if mode == "odm" and not (split.seen_out_classes or split.seen_anomalies):
        raise ConfigurationError("split.seen_out_classes: odm mode needs seen out-distribution data")
    embedding_dim = _typed(raw, "model", "embedding_dim", int)
    if mode == "ce":
        embedding_dim = len(split.in_classes)
        raw["model"]["embedding_dim"] = str(embedding_dim)
    try:
        pairs = PairSchedule(
            cross_ratio=_typed(raw, "pairs", "cross_ratio", float),
            period=_typed(raw, "pairs", "period", int),
            same_ratio=_typed(raw, "pairs", "same_ratio", float),
        )
    except ValueError as exc:
        raise ConfigurationError(f"pairs: {exc}") from None
    cfg = ExperimentConfig(
        raw=raw,
        mode=mode,
        seed=_typed(raw, "experiment", "seed", int),
        output_dir=raw["experiment"]["output_dir"],
        split=split,
        pairs=pairs,
        architecture=raw["model"]["architecture"],
        embedding_dim=embedding_dim,
        optimizer=raw["train"]["optimizer"].strip().lower(),
        learning_rate=_typed(raw, "train", "learning_rate", float),
        batch_size=_typed(raw, "train", "batch_size", int),
        steps=_typed(raw, "train", "steps", int),
        margin=_typed(raw, "train", "margin", float),
    )
    if cfg.embedding_dim < 1:
        raise ConfigurationError("model.embedding_dim: must be positive")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigurationError(f"train.optimizer: unknown optimizer {cfg.optimizer!r}")
    if not cfg.learning_rate > 0:
        raise ConfigurationError("train.learning_rate: must be positive")
    if cfg.batch_size < 2:
        raise ConfigurationError("train.batch_size: must be at least 2")
    if cfg.steps < 1:
        raise ConfigurationError("train.steps: must be positive")
    if not cfg.margin > 0:
        raise ConfigurationError("train.margin: must be positive")
    dataset = raw["data"]["dataset"]
    if dataset not in ("mnist", "blobs"):
        raise ConfigurationError(f"data.dataset: expected mnist or blobs, got {dataset!r}")
    return cfg
