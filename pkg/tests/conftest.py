"""
Shared fixtures: a seeded credit-like dataset, a small trained forest and
helpers wrapping plain functions as black-box models.
"""

import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import pytest

from app.models.attack import AttackConfig
from app.models.schema import Dataset, FeatureKind, FeatureSchema
from app.services.forest import train_forest
from app.services.model import Backend, Encoding, ModelHandle
from app.services.tabular import load_csv, train_test_split

STUB_MODEL = Path(__file__).parent / "stubs" / "stub_model.py"

CHECKING = ["0<=X<200", "<0", ">=200", "none"]
HOUSING = ["free", "own", "rent"]
PURPOSE = ["business", "car", "education", "furniture"]


def make_credit_frame(n_rows: int = 400, seed: int = 0) -> pd.DataFrame:
    """Credit-like table whose default label depends on amount, duration, checking and housing."""
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame(
        {
            "age": rng.integers(19, 76, n_rows),
            "credit_amount": rng.integers(250, 15000, n_rows),
            "duration": rng.choice([6, 12, 18, 24, 36, 48], n_rows),
            "installment_rate": rng.integers(1, 5, n_rows),
            "checking": rng.choice(CHECKING, n_rows),
            "housing": rng.choice(HOUSING, n_rows),
            "purpose": rng.choice(PURPOSE, n_rows),
        }
    )
    risk = (
        0.0002 * frame["credit_amount"]
        + 0.04 * frame["duration"]
        + 1.5 * (frame["checking"] == "<0")
        - 1.2 * (frame["checking"] == "none")
        + 0.6 * (frame["housing"] == "rent")
        - 0.02 * (frame["age"] - 19)
        + rng.normal(0.0, 0.4, n_rows)
    )
    frame["default"] = (risk > np.median(risk)).astype(int)
    return frame


class FunctionPredictor:
    """Black box backed by a row function returning a probability vector."""

    def __init__(self, fn: Callable[[np.ndarray], Sequence[float]]) -> None:
        self.fn = fn

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.fn(row) for row in np.atleast_2d(X)], dtype=np.float64)


def function_model(features: Sequence[FeatureSchema], fn, n_classes: int = 2) -> ModelHandle:
    """Handle around ``fn`` applied to ordinal-side rows."""
    return ModelHandle(FunctionPredictor(fn), features, Backend.BUILTIN_FOREST, Encoding.ORDINAL, n_classes)


def stub_command(*args: str) -> list:
    return [sys.executable, str(STUB_MODEL), *args]


@pytest.fixture(scope="session")
def credit_frame() -> pd.DataFrame:
    return make_credit_frame()


@pytest.fixture(scope="session")
def credit_csv(tmp_path_factory, credit_frame) -> Path:
    path = tmp_path_factory.mktemp("data") / "credit.csv"
    credit_frame.to_csv(path, index=False)
    return path


@pytest.fixture(scope="session")
def credit_dataset(credit_csv) -> Dataset:
    return load_csv(credit_csv, "default")


@pytest.fixture(scope="session")
def credit_split(credit_dataset):
    train_idx, test_idx = train_test_split(credit_dataset.n_rows, 0.6, 0)
    return credit_dataset.subset(train_idx), credit_dataset.subset(test_idx)


@pytest.fixture(scope="session")
def credit_forest(credit_split):
    train, _ = credit_split
    return train_forest(train, n_trees=10, max_depth=12, min_leaf=1, seed=0)


@pytest.fixture(scope="session")
def credit_model(credit_forest, credit_split) -> ModelHandle:
    train, _ = credit_split
    return ModelHandle.from_forest(credit_forest, train.features)


@pytest.fixture
def fast_config() -> AttackConfig:
    return AttackConfig(generations=40, seed=0)


@pytest.fixture(scope="session")
def threshold_dataset() -> Dataset:
    """x1 continuous on [0, 10], x2 categorical, x3 ordinal; class 1 iff x1 > 0.5."""
    n = 60
    x1 = np.linspace(0.0, 10.0, n)
    x2 = np.arange(n) % 3
    x3 = np.arange(n) % 4 + 1
    features = [
        FeatureSchema(name="x1", kind=FeatureKind.CONTINUOUS, minimum=0.0, maximum=10.0),
        FeatureSchema(name="x2", kind=FeatureKind.CATEGORICAL, levels=["a", "b", "c"]),
        FeatureSchema(name="x3", kind=FeatureKind.ORDINAL, levels=[1.0, 2.0, 3.0, 4.0]),
    ]
    return Dataset(
        features=features,
        rows=np.column_stack([x1, x2, x3]).astype(np.float64),
        labels=(x1 > 0.5).astype(np.int64),
        target="y",
        class_names=["0", "1"],
    )


@pytest.fixture(scope="session")
def threshold_model(threshold_dataset) -> ModelHandle:
    return function_model(
        threshold_dataset.features,
        lambda row: [0.0, 1.0] if row[0] > 0.5 else [1.0, 0.0],
    )


@pytest.fixture(scope="session")
def constant_model(threshold_dataset) -> ModelHandle:
    return function_model(threshold_dataset.features, lambda row: [0.8, 0.2])
