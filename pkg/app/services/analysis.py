"""
Batch experiments over many instances and the analytics built on them:
change statistics, feature co-occurrence, restricted-feature attacks and
the realism discriminator.
"""

import itertools
import logging
from collections import Counter, defaultdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.errors import AnalysisError, ConfigError, PermuteAttackError
from app.models.analysis import BatchSummary, CoOccurrenceGraph, FeatureDirection, RealismReport
from app.models.attack import AttackConfig, AttackResult
from app.models.forest import ForestParams
from app.models.schema import Dataset, FeatureSchema
from app.services.forest import ForestModel, train_forest
from app.services.ga_core import PermuteAttack
from app.services.model import Backend, ModelHandle
from app.services.sampler import ConditionalIndex
from app.services.tabular import onehot_matrix

logger = logging.getLogger(__name__)


def _attack_one(
    runner: PermuteAttack,
    x: np.ndarray,
    target_class: Optional[int],
    seed: int,
    instance_id: int,
) -> AttackResult:
    try:
        return runner.run(x, target_class, seed=seed, instance_id=instance_id)
    except PermuteAttackError as exc:
        logger.warning("Attack on instance %d failed: %s", instance_id, exc)
        return AttackResult(
            success=False,
            instance_id=instance_id,
            seed=seed,
            config=runner.config,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_batch(
    instances: np.ndarray,
    model: ModelHandle,
    dataset: Dataset,
    config: AttackConfig,
    target_class: Optional[int] = None,
    instance_ids: Optional[Sequence[int]] = None,
    workers: int = 1,
    index: Optional[ConditionalIndex] = None,
) -> Tuple[List[AttackResult], BatchSummary]:
    """
    Attack every instance and summarize the outcome.

    Instance k uses seed ``config.seed + k``, so its result does not
    depend on the batch order or the number of workers. Errors are
    recorded on the failing result and do not abort the batch.

    Args:
        instances: n × m ordinal-side rows.
        model: attacked model.
        dataset: training data that defines the permutation domain.
        config: attack hyperparameters.
        target_class: fixed target; None flips each binary prediction.
        instance_ids: identifiers stored on the results (default 0..n-1).
        workers: parallel workers; external models always run serially.
        index: prebuilt conditional index, reused across batches.
    """
    instances = np.atleast_2d(np.asarray(instances, dtype=np.float64))
    if instances.shape[0] == 0:
        raise ConfigError("run_batch needs at least one instance")
    ids = list(range(len(instances))) if instance_ids is None else [int(i) for i in instance_ids]

    runner = PermuteAttack(model, dataset, config, index=index)
    if model.backend is Backend.EXTERNAL_PROCESS:
        workers = 1
    jobs = (
        delayed(_attack_one)(runner, x, target_class, config.seed + k, ids[k])
        for k, x in enumerate(instances)
    )
    results = list(Parallel(n_jobs=workers)(jobs))

    summary = summarize(results, dataset.features)
    logger.info(
        "Batch: %d/%d successful (%.1f%%), %.2f features changed on average",
        summary.n_success,
        summary.n_attacked,
        100 * summary.success_rate,
        summary.mean_changed_features,
    )
    return results, summary


def _directions(results: Iterable[AttackResult], features: Sequence[FeatureSchema]) -> Dict[str, FeatureDirection]:
    categorical = {f.name for f in features if f.is_categorical}
    directions: Dict[str, FeatureDirection] = {}
    for result in results:
        for change in result.changed_features:
            entry = directions.setdefault(change.name, FeatureDirection())
            if change.name in categorical:
                key = f"{change.old} -> {change.new}"
                entry.transitions[key] = entry.transitions.get(key, 0) + 1
            elif float(change.new) > float(change.old):
                entry.increases += 1
            else:
                entry.decreases += 1
    return dict(sorted(directions.items()))


def summarize(results: Sequence[AttackResult], features: Sequence[FeatureSchema]) -> BatchSummary:
    """
    Aggregate a result list; a pure function of its input.

    Rows already predicted as the target are counted apart and stay out
    of the success rate, the histogram and the mean.
    """
    attacked = [r for r in results if not r.already_target]
    successes = [r for r in attacked if r.success]
    n = len(attacked)
    l0 = [r.l0 for r in successes]
    counts = Counter(name for r in successes for name in r.changed_names)

    by_flip: Dict[str, List[AttackResult]] = defaultdict(list)
    for result in successes:
        by_flip[f"{result.original_class}->{result.target_class}"].append(result)

    return BatchSummary(
        n_attacked=n,
        n_already_target=len(results) - n,
        n_success=len(successes),
        n_failed=sum(r.error is not None for r in attacked),
        success_rate=len(successes) / n if n else 0.0,
        mean_changed_features=float(np.mean(l0)) if l0 else 0.0,
        histogram=dict(sorted(Counter(l0).items())),
        per_feature_change_count=dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))),
        per_feature_direction=_directions(successes, features),
        direction_by_flip={key: _directions(group, features) for key, group in sorted(by_flip.items())},
    )


def cooccurrence(results: Iterable[AttackResult]) -> CoOccurrenceGraph:
    """Features changed in successful results, and how often pairs changed together."""
    nodes: Counter = Counter()
    edges: Counter = Counter()
    for result in results:
        if not result.success:
            continue
        names = sorted(set(result.changed_names))
        nodes.update(names)
        edges.update(itertools.combinations(names, 2))
    return CoOccurrenceGraph(nodes=dict(nodes), edges=dict(edges))


def restricted_config(config: AttackConfig, allowed: Iterable[str], dataset: Dataset) -> AttackConfig:
    allowed = list(dict.fromkeys(allowed))
    if not allowed:
        raise ConfigError("at least one feature must be allowed")
    unknown = sorted(set(allowed) - set(dataset.feature_names))
    if unknown:
        raise ConfigError(f"unknown feature(s): {', '.join(unknown)}")
    return config.model_copy(update={"mutable_features": allowed})


def excluded_config(config: AttackConfig, excluded: Iterable[str], dataset: Dataset) -> AttackConfig:
    """Mutable features (config or schema flags) minus ``excluded``."""
    excluded = set(excluded)
    unknown = sorted(excluded - set(dataset.feature_names))
    if unknown:
        raise ConfigError(f"unknown feature(s): {', '.join(unknown)}")
    mutable = config.mutable_features
    if mutable is None:
        mutable = [f.name for f in dataset.features if f.mutable]
    return restricted_config(config, [name for name in mutable if name not in excluded], dataset)


def restricted_attack(
    instances: np.ndarray,
    allowed_features: Iterable[str],
    model: ModelHandle,
    dataset: Dataset,
    config: AttackConfig,
    **batch_options,
) -> BatchSummary:
    """Batch attack that may only change ``allowed_features``."""
    _, summary = run_batch(
        instances, model, dataset, restricted_config(config, allowed_features, dataset), **batch_options
    )
    return summary


def excluded_attack(
    instances: np.ndarray,
    excluded_features: Iterable[str],
    model: ModelHandle,
    dataset: Dataset,
    config: AttackConfig,
    **batch_options,
) -> BatchSummary:
    """Batch attack that may change every mutable feature except ``excluded_features``."""
    _, summary = run_batch(
        instances, model, dataset, excluded_config(config, excluded_features, dataset), **batch_options
    )
    return summary


def counterfactual_rows(results: Iterable[AttackResult]) -> np.ndarray:
    """Elite counterfactual of every successful, non-degenerate result."""
    rows = [r.counterfactual for r in results if r.success and not r.already_target]
    return np.array(rows, dtype=np.float64)


def train_discriminator(
    real: np.ndarray,
    generated: np.ndarray,
    features: Sequence[FeatureSchema],
    params: Optional[ForestParams] = None,
) -> ForestModel:
    """Forest separating real rows (class 1) from generated ones (class 0)."""
    params = params or ForestParams()
    rows = np.vstack([real, generated])
    labels = np.concatenate([np.ones(len(real), dtype=np.int64), np.zeros(len(generated), dtype=np.int64)])
    dataset = Dataset(
        features=list(features),
        rows=rows,
        labels=labels,
        target="real",
        class_names=["generated", "real"],
    )
    return train_forest(
        dataset,
        n_trees=params.n_trees,
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
        seed=params.seed,
        max_features=params.max_features,
    )


def discriminator_fail_rate(
    discriminator: ForestModel,
    generated: np.ndarray,
    features: Sequence[FeatureSchema],
) -> float:
    """Fraction of generated rows the discriminator takes for real; ties count half."""
    p_real = discriminator.predict_proba(onehot_matrix(generated, features))[:, 1]
    return float(np.mean((p_real > 0.5) + 0.5 * (p_real == 0.5)))


def realism_discriminator(
    real_test: np.ndarray,
    generator_config: AttackConfig,
    model: ModelHandle,
    dataset: Dataset,
    seed_a: int,
    seed_b: int,
    forest_params: Optional[ForestParams] = None,
    **batch_options,
) -> float:
    """
    Train a discriminator on real rows versus counterfactuals generated
    with ``seed_a``, then report the fail rate on counterfactuals
    generated with ``seed_b``. Higher means more realistic.

    Raises:
        AnalysisError: equal seeds, or a seed produced no counterfactuals.
    """
    if seed_a == seed_b:
        raise AnalysisError("realism_discriminator needs two distinct seeds")
    if forest_params is None and isinstance(model.predictor, ForestModel):
        forest_params = model.predictor.params

    generated = []
    for seed in (seed_a, seed_b):
        results, _ = run_batch(
            real_test, model, dataset, generator_config.model_copy(update={"seed": seed}), **batch_options
        )
        rows = counterfactual_rows(results)
        if len(rows) == 0:
            raise AnalysisError(f"no successful counterfactuals with seed {seed}")
        generated.append(rows)

    discriminator = train_discriminator(real_test, generated[0], dataset.features, forest_params)
    fail_rate = discriminator_fail_rate(discriminator, generated[1], dataset.features)
    logger.info(
        "Discriminator (gibbs %s) fails on %.1f%% of %d held-out counterfactuals",
        "on" if generator_config.gibbs else "off",
        100 * fail_rate,
        len(generated[1]),
    )
    return fail_rate


def realism_report(
    real_test: np.ndarray,
    config: AttackConfig,
    model: ModelHandle,
    dataset: Dataset,
    seed_a: int,
    seed_b: int,
    forest_params: Optional[ForestParams] = None,
    **batch_options,
) -> RealismReport:
    """Fail rates with Gibbs sampling off and on, under the same seeds."""
    rates = {}
    index = ConditionalIndex.build(dataset, config.n_bins)
    for label, gibbs in (("gibbs_off", False), ("gibbs_on", True)):
        rates[label] = realism_discriminator(
            real_test,
            config.model_copy(update={"gibbs": gibbs}),
            model,
            dataset,
            seed_a,
            seed_b,
            forest_params,
            index=index if gibbs else None,
            **batch_options,
        )
    return RealismReport(seed_a=seed_a, seed_b=seed_b, fail_rate=rates)


def histogram_csv(summary: BatchSummary) -> str:
    frame = pd.DataFrame(sorted(summary.histogram.items()), columns=["bin", "count"])
    return frame.to_csv(index=False)


def feature_changes_csv(summary: BatchSummary) -> str:
    frame = pd.DataFrame(list(summary.per_feature_change_count.items()), columns=["feature", "count"])
    return frame.to_csv(index=False)


def outcomes_csv(results: Iterable[AttackResult]) -> str:
    """Target-class probability before and after, one row per attacked instance."""
    records = [
        {
            "instance_id": r.instance_id,
            "success": r.success,
            "original_target_probability": r.original_probs[r.target_class],
            "counterfactual_target_probability": r.final_probs[r.target_class],
        }
        for r in results
        if r.original_probs and r.final_probs
    ]
    columns = ["instance_id", "success", "original_target_probability", "counterfactual_target_probability"]
    return pd.DataFrame(records, columns=columns).to_csv(index=False)
