"""
End-to-end runs on the German Credit data. Slow; skipped unless
GERMAN_CREDIT_CSV names the data file (target column ``default``).
"""

import os

import pytest

from app.models.attack import AttackConfig
from app.services.analysis import excluded_attack, realism_report, restricted_attack, run_batch
from app.services.forest import accuracy, train_forest
from app.services.model import ModelHandle
from app.services.tabular import load_csv, onehot_width, train_test_split

DATA = os.environ.get("GERMAN_CREDIT_CSV")
WORKERS = os.cpu_count() or 1

pytestmark = [
    pytest.mark.german_credit,
    pytest.mark.skipif(not DATA, reason="GERMAN_CREDIT_CSV is not set"),
]


@pytest.fixture(scope="module")
def german():
    dataset = load_csv(DATA, "default")
    train_idx, test_idx = train_test_split(dataset.n_rows, 0.6, 0)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    forest = train_forest(train, n_trees=10, seed=0)
    return dataset, train, test, forest, ModelHandle.from_forest(forest, train.features)


@pytest.fixture(scope="module")
def batch(german):
    _, train, test, _, model = german
    return run_batch(test.rows, model, train, AttackConfig(), workers=WORKERS)


def test_schema(german):
    dataset = german[0]
    assert dataset.n_features == 20
    assert sum(f.is_categorical for f in dataset.features) == 13
    assert onehot_width(dataset.features) == 61


def test_forest_accuracy(german):
    _, _, test, forest, _ = german
    assert 0.70 <= accuracy(forest, test) <= 0.80


def test_flip_rate_and_sparsity(batch):
    _, summary = batch
    assert summary.n_attacked == 400
    assert summary.success_rate >= 0.95
    assert 1.5 <= summary.mean_changed_features <= 3.5


def test_excluding_frequent_features_needs_more_changes(german, batch):
    _, train, test, _, model = german
    _, summary = batch
    top = list(summary.per_feature_change_count)[:3]
    excluded = excluded_attack(test.rows, top, model, train, AttackConfig(), workers=WORKERS)
    assert excluded.mean_changed_features > summary.mean_changed_features


def test_sensitive_attributes_only(german):
    _, train, test, _, model = german
    allowed = ["age", "personal_status_sex", "foreign_worker"]
    if not set(allowed) <= set(train.feature_names):
        pytest.skip("data file uses different column names")
    summary = restricted_attack(test.rows, allowed, model, train, AttackConfig(), workers=WORKERS)
    assert 0.10 <= summary.success_rate <= 0.45


def test_conditional_sampling_is_more_realistic(german):
    _, train, test, _, model = german
    report = realism_report(test.rows, AttackConfig(), model, train, 0, 1, workers=WORKERS)
    assert report.fail_rate["gibbs_on"] >= report.fail_rate["gibbs_off"]
