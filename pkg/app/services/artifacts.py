"""
Run directory: everything ``train`` persists and every later command
reloads, plus the provenance envelope wrapped around command outputs.

Layout of ``output_dir``::

    schema.json   feature schema with bin edges
    model.json    built-in forest (absent for external models)
    split.json    train/test row indices
    <command outputs>
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.config import RunConfig
from app.errors import ConfigError, DataError, ModelError
from app.models.schema import Dataset, FeatureSchema, Provenance, SchemaDocument
from app.services.external_model import ExternalModel
from app.services.forest import ForestModel, accuracy, train_forest
from app.services.model import ModelHandle
from app.services.tabular import discretize, load_csv, load_schema, save_schema, train_test_split

logger = logging.getLogger(__name__)

SCHEMA_FILE = "schema.json"
MODEL_FILE = "model.json"
SPLIT_FILE = "split.json"


class SplitDocument(BaseModel):
    seed: int
    fraction: float
    train: List[int]
    test: List[int]
    provenance: Optional[Provenance] = None


class Envelope(Provenance):
    """Provenance wrapper of every JSON command output."""

    payload: Any


class TrainReport(BaseModel):
    n_train: int
    n_test: int
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    model_path: Optional[str] = None
    schema_path: str


@dataclass
class RunContext:
    """Loaded run: full data, split and a live model handle. Hold ``lock`` while using the model."""

    config: RunConfig
    dataset: Dataset
    train: Dataset
    test: Dataset
    test_indices: np.ndarray
    model: ModelHandle
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def close(self) -> None:
        self.model.close()


def provenance(config: RunConfig, command: str) -> Provenance:
    return Provenance(tool=config.app_name, version=config.app_version, command=command, config=config.echo())


def write_output(config: RunConfig, command: str, name: str, payload: Any) -> Path:
    """Write ``payload`` wrapped in an envelope to ``output_dir/name``."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    envelope = Envelope(**provenance(config, command).model_dump(), payload=payload)
    path = config.output_dir / name
    path.write_text(envelope.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def provenance_line(config: RunConfig, command: str, comment: str = "#") -> str:
    """Single comment line carrying tool, version and config echo."""
    stamp = provenance(config, command)
    config_json = json.dumps(stamp.config, sort_keys=True, separators=(",", ":"))
    return f"{comment} tool={stamp.tool} version={stamp.version} command={command} config={config_json}\n"


def write_text(config: RunConfig, command: str, name: str, text: str, comment: str = "#") -> Path:
    """Write a plain-text export headed by its provenance comment line."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    path = config.output_dir / name
    path.write_text(provenance_line(config, command, comment) + text, encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def load_dataset(config: RunConfig) -> Dataset:
    if config.data_path is None or config.target_column is None:
        raise ConfigError("data_path and target_column must be configured")
    return load_csv(
        config.data_path,
        config.target_column,
        config.kind_overrides,
        delimiter=config.delimiter,
        ordinal_threshold=config.ordinal_threshold,
        immutable=config.immutable_features,
    )


def train_run(config: RunConfig) -> TrainReport:
    """
    Split the data, persist schema and split, and train the built-in
    forest unless an external model is configured.
    """
    dataset = load_dataset(config)
    train_idx, test_idx = train_test_split(dataset.n_rows, config.split_fraction, config.split_seed)
    if len(train_idx) == 0:
        raise DataError("the training split is empty")
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)

    config.output_dir.mkdir(parents=True, exist_ok=True)
    view = discretize(train, config.attack.n_bins)
    stamp = provenance(config, "train")
    document = SchemaDocument(
        target=dataset.target,
        classes=dataset.class_names,
        features=view.features,
        provenance=stamp,
    )
    schema_path = config.output_dir / SCHEMA_FILE
    save_schema(document, schema_path)
    split = SplitDocument(
        seed=config.split_seed,
        fraction=config.split_fraction,
        train=train_idx.tolist(),
        test=test_idx.tolist(),
        provenance=stamp,
    )
    (config.output_dir / SPLIT_FILE).write_text(split.model_dump_json(indent=2), encoding="utf-8")

    report = TrainReport(n_train=train.n_rows, n_test=test.n_rows, schema_path=str(schema_path))
    if config.uses_external_model:
        logger.info("External model configured; skipping forest training")
        return report

    p = config.forest
    forest = train_forest(train, p.n_trees, p.max_depth, p.min_leaf, p.seed, p.max_features)
    model_path = config.output_dir / MODEL_FILE
    forest.save(model_path, stamp)
    report.model_path = str(model_path)
    report.train_accuracy = accuracy(forest, train)
    if test.n_rows:
        report.test_accuracy = accuracy(forest, test)
    logger.info(
        "Accuracy: train %.3f, test %s",
        report.train_accuracy,
        "n/a" if report.test_accuracy is None else f"{report.test_accuracy:.3f}",
    )
    return report


def _same_encoding(stored: SchemaDocument, dataset: Dataset) -> bool:
    return [(f.name, f.kind, f.levels) for f in stored.features] == [
        (f.name, f.kind, f.levels) for f in dataset.features
    ]


def open_model(config: RunConfig, features: Sequence[FeatureSchema]) -> ModelHandle:
    if config.uses_external_model:
        external = ExternalModel(config.external_command, timeout=config.external_timeout)
        try:
            return ModelHandle.from_external(external, features)
        except Exception:
            external.close()
            raise
    return ModelHandle.from_forest(ForestModel.load(config.output_dir / MODEL_FILE), features)


def open_run(config: RunConfig) -> RunContext:
    """
    Reload data, split and model saved by ``train_run``.

    Raises:
        DataError: missing artifacts or a data file that no longer
            matches the stored schema.
        ModelError: model file missing or inconsistent with the schema.
    """
    split_path = config.output_dir / SPLIT_FILE
    if not split_path.is_file():
        raise DataError(f"no trained run in {config.output_dir}; run 'train' first")
    stored = load_schema(config.output_dir / SCHEMA_FILE)
    dataset = load_dataset(config)
    if not _same_encoding(stored, dataset):
        raise DataError("data file no longer matches the stored schema; retrain")
    dataset = dataset.with_schema(stored.features)

    split = SplitDocument.model_validate_json(split_path.read_text(encoding="utf-8"))
    if max(split.train + split.test, default=-1) >= dataset.n_rows:
        raise DataError("stored split refers to rows beyond the data file")
    test_indices = np.asarray(split.test, dtype=np.int64)
    model = open_model(config, dataset.features)
    if model.n_classes != dataset.n_classes:
        model.close()
        raise ModelError(f"model has {model.n_classes} classes, data has {dataset.n_classes}")
    return RunContext(
        config=config,
        dataset=dataset,
        train=dataset.subset(np.asarray(split.train, dtype=np.int64)),
        test=dataset.subset(test_indices),
        test_indices=test_indices,
        model=model,
    )
