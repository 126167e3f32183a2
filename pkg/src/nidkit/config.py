"""Experiment configuration: YAML documents with stable content hashes.

A config fully determines an experiment; the hash of its canonical JSON
form (sorted keys, ``output_dir`` excluded) names the experiment directory,
so re-running an unchanged config lands in the same place.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import KINDS as AUG_KINDS
from .augment import AugmentationSpec
from .encoders import ENCODER_KINDS, EncoderConfig
from .nn import ConfigError
from .ssl_models import MODEL_KINDS

CONFIG_VERSION = 1
BASELINE_KINDS = ("autoencoder", "deep_svdd")
CONVENTIONAL_LRS = (1e-2, 1e-3, 1e-4, 1e-5)


@dataclass
class ExperimentConfig:
    document: dict                 # normalized config (relative paths resolved)
    dataset: dict
    model: str
    encoder: dict
    augmentation: Optional[dict]
    learning_rate: float
    epochs: int
    batch_size: int
    projection_dim: int
    loss_params: dict = field(default_factory=dict)
    n_runs: int = 1
    base_seed: int = 0
    train_fraction: float = 0.5
    output_dir: Path = Path("runs")

    @property
    def hash(self) -> str:
        return config_hash(self.document)


def config_hash(document: dict) -> str:
    doc = {k: v for k, v in document.items() if k != "output_dir"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def _require(doc, key, path):
    if key not in doc:
        raise ConfigError(f"{path}: missing required field {key!r}")
    return doc[key]


def validate_config(doc: dict, base_dir=".", source="config") -> ExperimentConfig:
    """Check a parsed config document and resolve file references.

    Relative dataset paths are resolved against ``base_dir`` (normally the
    directory containing the config file) and must exist.
    """
    base_dir = Path(base_dir)
    if int(doc.get("version", -1)) != CONFIG_VERSION:
        raise ConfigError(f"{source}: unsupported config version {doc.get('version')!r}")

    dataset = dict(_require(doc, "dataset", source))
    modes = [k for k in ("synth", "csv", "cache") if k in dataset]
    if len(modes) != 1:
        raise ConfigError(f"{source}: dataset needs exactly one of synth/csv/cache")
    if modes[0] == "csv":
        for key in ("csv", "schema"):
            p = base_dir / _require(dataset, key, source)
            if not p.exists():
                raise ConfigError(f"{source}: dataset file not found: {p}")
            dataset[key] = str(p)
    elif modes[0] == "cache":
        p = base_dir / dataset["cache"]
        if not p.exists():
            raise ConfigError(f"{source}: dataset cache not found: {p}")
        dataset["cache"] = str(p)

    model = _require(doc, "model", source)
    if model not in MODEL_KINDS + BASELINE_KINDS:
        raise ConfigError(f"{source}: unknown model {model!r}")

    encoder = dict(doc.get("encoder", {"kind": "mlp"}))
    if model in MODEL_KINDS:
        if encoder.get("kind") not in ENCODER_KINDS:
            raise ConfigError(f"{source}: unknown encoder kind {encoder.get('kind')!r}")
        aug = dict(_require(doc, "augmentation", source))
        if aug.get("kind") not in AUG_KINDS:
            raise ConfigError(f"{source}: unknown augmentation kind {aug.get('kind')!r}")
        AugmentationSpec(**aug)  # reuse the hyperparameter validation
    else:
        aug = dict(doc["augmentation"]) if doc.get("augmentation") else None

    training = dict(doc.get("training", {}))
    lr = float(training.get("learning_rate", 1e-3))
    if lr <= 0:
        raise ConfigError(f"{source}: learning_rate must be positive")
    if not any(abs(lr - c) < 1e-12 for c in CONVENTIONAL_LRS):
        warnings.warn(f"learning_rate {lr} is outside the usual grid {CONVENTIONAL_LRS}")
    epochs = int(training.get("epochs", 10))
    batch_size = int(training.get("batch_size", 128))
    if epochs < 1 or batch_size < 2:
        raise ConfigError(f"{source}: need epochs >= 1 and batch_size >= 2")

    n_runs = int(doc.get("runs", 1))
    if n_runs < 1:
        raise ConfigError(f"{source}: runs must be >= 1")

    normalized = dict(doc)
    normalized["dataset"] = dataset
    return ExperimentConfig(
        document=normalized,
        dataset=dataset,
        model=model,
        encoder=encoder,
        augmentation=aug,
        learning_rate=lr,
        epochs=epochs,
        batch_size=batch_size,
        projection_dim=int(training.get("projection_dim", 256)),
        loss_params=dict(doc.get("loss", {})),
        n_runs=n_runs,
        base_seed=int(doc.get("base_seed", 0)),
        train_fraction=float(doc.get("train_fraction", 0.5)),
        output_dir=base_dir / str(doc.get("output_dir", "runs")),
    )


def encoder_config_for(encoder: dict, input_width: int,
                       numeric_cols=(), cat_groups=None) -> EncoderConfig:
    """Materialize the encoder section for a concrete input width."""
    known = {"hidden_dim", "token_dim", "heads", "layers", "dropout"}
    extra = {k: v for k, v in encoder.items() if k in known}
    return EncoderConfig(kind=encoder.get("kind", "mlp"), input_width=input_width,
                         numeric_cols=list(numeric_cols),
                         cat_groups=dict(cat_groups or {}), **extra)
