import numpy as np
import pytest

from app.errors import BackendError, ConfigError
from app.models.attack import AttackConfig, Candidate
from app.models.schema import Dataset, FeatureKind, FeatureSchema
from app.services.ga_core import (
    DistanceScaler,
    PermuteAttack,
    _fitness,
    alternative_counterfactuals,
    attack,
    compute_fitness,
    crossover,
    elite_order,
    exhaustive_search,
    feature_importance,
    mutate,
    resolve_mutable,
    resolve_target,
    select_parents,
    selection_probabilities,
    update_parameters,
)
from app.services.forest import train_forest
from app.services.model import ModelHandle
from app.services.sampler import ConditionalIndex, PermutationDomain

from conftest import function_model


class TestFitness:
    def test_categorical_change_costs_one_unit(self, threshold_dataset):
        model = function_model(threshold_dataset.features, lambda row: [0.3, 0.7] if row[1] == 1 else [0.8, 0.2])
        scaler = DistanceScaler(threshold_dataset.features, threshold_dataset.rows)
        x_orig = np.array([0.0, 0.0, 1.0])
        x = np.array([0.0, 1.0, 1.0])

        assert compute_fitness(x, x_orig, 1, 0.6, 0.2, model, scaler) == pytest.approx(-0.3)

    def test_extra_change_costs_rho0(self):
        fitness = _fitness(np.array([0.9, 0.9]), 0.1, np.array([1, 2]), np.array([0.5, 0.5]), 0.6, 0.2)
        assert fitness[0] - fitness[1] == pytest.approx(0.6)

    def test_unchanged_candidate_scores_zero(self, threshold_dataset):
        scaler = DistanceScaler(threshold_dataset.features, threshold_dataset.rows)
        model = function_model(threshold_dataset.features, lambda row: [0.4, 0.6])
        x = threshold_dataset.rows[0]
        assert compute_fitness(x, x, 1, 0.6, 0.2, model, scaler) == 0.0
        assert scaler.l0(x, x)[0] == 0
        assert scaler.l2(x, x)[0] == 0.0

    def test_numeric_distance_is_scaled_by_std(self, threshold_dataset):
        scaler = DistanceScaler(threshold_dataset.features, threshold_dataset.rows)
        std = threshold_dataset.rows[:, 0].std()
        x_orig = np.array([0.0, 0.0, 1.0])
        assert scaler.l2(np.array([std, 0.0, 1.0]), x_orig)[0] == pytest.approx(1.0)

    def test_constant_column_has_unit_scale(self):
        features = [FeatureSchema(name="c", kind=FeatureKind.CONTINUOUS, minimum=1.0, maximum=1.0)]
        scaler = DistanceScaler(features, np.ones((5, 1)))
        assert scaler.scale.tolist() == [1.0]


class TestSelection:
    def test_equal_fitness_is_uniform(self):
        assert selection_probabilities(np.array([0.5, 0.5]), 0.5).tolist() == pytest.approx([0.5, 0.5])

    def test_large_gap_concentrates(self):
        assert selection_probabilities(np.array([10.0, 0.0]), 1.0)[0] > 0.9999

    def test_high_temperature_is_near_uniform(self):
        probs = selection_probabilities(np.array([1.0, -3.0, 0.2]), 1e4)
        assert np.allclose(probs, 1 / 3, atol=1e-3)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        probs = selection_probabilities(rng.normal(size=35) * 100, 0.5)
        assert probs.sum() == pytest.approx(1.0)
        assert (probs >= 0).all()

    def test_select_parents_draws_from_population(self):
        population = ["a", "b", "c"]
        pairs = select_parents(population, np.array([0.0, 0.0, 50.0]), 0.5, 20, np.random.default_rng(0))
        assert len(pairs) == 20
        assert all(pair == ("c", "c") for pair in pairs)


class TestOperators:
    def test_crossover_of_identical_parents(self):
        parent = np.array([1.0, 2.0, 3.0, 4.0])
        assert crossover(parent, parent.copy(), np.random.default_rng(0)).tolist() == parent.tolist()

    def test_crossover_takes_each_value_from_a_parent(self):
        p1, p2 = np.zeros(50), np.ones(50)
        child = crossover(p1, p2, np.random.default_rng(1))
        assert set(child) == {0.0, 1.0}

    def test_conditional_crossover_respects_dependency(self):
        # x2 = x1 mod 2 in every training row
        rng = np.random.default_rng(0)
        x1 = rng.integers(0, 4, 400)
        features = [
            FeatureSchema(name="x1", kind=FeatureKind.CATEGORICAL, levels=["a", "b", "c", "d"]),
            FeatureSchema(name="x2", kind=FeatureKind.CATEGORICAL, levels=["even", "odd"]),
            FeatureSchema(name="x3", kind=FeatureKind.CATEGORICAL, levels=["p", "q", "r"]),
        ]
        rows = np.column_stack([x1, x1 % 2, rng.integers(0, 3, 400)]).astype(np.float64)
        dataset = Dataset(features=features, rows=rows, labels=np.zeros(400, dtype=np.int64))
        index = ConditionalIndex.build(dataset, 5)

        consistent = 0
        for _ in range(1000):
            a, b = rows[rng.integers(400)], rows[rng.integers(400)]
            child = crossover(a, b, rng, index)
            consistent += int(child[1] == child[0] % 2)
        assert consistent >= 950

    def test_mutate_never_touches_immutable(self):
        domain = PermutationDomain(np.arange(30.0).reshape(10, 3), np.array([True, False, True]))
        config = AttackConfig(mutation_probability=1.0)
        child = np.array([-1.0, -1.0, -1.0])
        rng = np.random.default_rng(0)
        for _ in range(200):
            assert mutate(child, np.zeros(3), config, rng, domain)[1] == -1.0

    def test_mutate_changes_at_least_one_feature(self):
        domain = PermutationDomain(np.arange(30.0).reshape(10, 3), np.ones(3, dtype=bool))
        config = AttackConfig(mutation_probability=0.0)
        rng = np.random.default_rng(0)
        for _ in range(100):
            mutated = mutate(np.full(3, -1.0), np.zeros(3), config, rng, domain)
            assert np.count_nonzero(mutated != -1.0) == 1

    def test_mutation_follows_importance_softmax(self):
        domain = PermutationDomain(np.arange(50.0).reshape(10, 5), np.ones(5, dtype=bool))
        config = AttackConfig(mutation_probability=0.0)
        importance = np.array([0.9, 0.1, 0.1, 0.1, 0.1])
        rng = np.random.default_rng(0)
        hits = sum(mutate(np.full(5, -1.0), importance, config, rng, domain)[0] != -1.0 for _ in range(4000))
        assert hits / 4000 == pytest.approx(0.357, abs=0.03)

    def test_nothing_mutable(self):
        domain = PermutationDomain(np.zeros((3, 2)), np.zeros(2, dtype=bool))
        with pytest.raises(ConfigError):
            mutate(np.zeros(2), np.zeros(2), AttackConfig(), np.random.default_rng(0), domain)

    def test_feature_importance(self):
        mask = np.array([[True, False, False], [True, True, False]])
        importance = feature_importance(mask, np.array([0.2, 0.4]))
        assert importance.tolist() == pytest.approx([0.3, 0.4, 0.0])

    def test_update_parameters(self):
        assert update_parameters(0.6, 0.2, True, 0.96) == (0.6, 0.2)
        rho0, rho1 = update_parameters(0.6, 0.2, False, 0.96)
        assert (rho0, rho1) == (pytest.approx(0.576), pytest.approx(0.192))

    def test_fifty_stalled_generations(self):
        rho0, rho1 = 0.6, 0.2
        for _ in range(50):
            rho0, rho1 = update_parameters(rho0, rho1, False, 0.96)
        assert rho0 == pytest.approx(0.0779, abs=1e-4)

    def test_elite_order_tie_breaks(self):
        fitness = np.array([0.5, 0.5, 0.5, 0.9])
        l0 = np.array([2, 1, 1, 3])
        l2 = np.array([0.1, 0.4, 0.2, 0.0])
        assert elite_order(fitness, l0, l2).tolist() == [3, 2, 1, 0]


class TestResolution:
    def test_binary_target_flips(self):
        assert resolve_target(0, 2, None) == 1
        assert resolve_target(1, 2, None) == 0

    def test_multiclass_needs_target(self):
        with pytest.raises(ConfigError):
            resolve_target(0, 3, None)

    def test_target_out_of_range(self):
        with pytest.raises(ConfigError):
            resolve_target(0, 2, 2)

    def test_unknown_mutable_name(self, threshold_dataset):
        with pytest.raises(ConfigError, match="bogus"):
            resolve_mutable(threshold_dataset.features, ["x1", "bogus"])


class TestPermuteAttack:
    def test_threshold_model_flips_with_one_change(self, threshold_dataset, threshold_model):
        x_orig = threshold_dataset.rows[0]
        result = PermuteAttack(threshold_model, threshold_dataset, AttackConfig(seed=0)).run(x_orig)

        assert result.success
        assert result.target_class == 1
        assert result.changed_names == ["x1"]
        assert result.l0 == 1
        assert result.counterfactual[0] > 0.5
        assert result.counterfactual[0] in set(threshold_dataset.rows[:, 0])

    def test_already_target(self, threshold_dataset, threshold_model):
        result = attack(threshold_dataset.rows[-1], 1, threshold_model, threshold_dataset, AttackConfig())

        assert result.success and result.already_target
        assert result.changed_features == []
        assert result.generations_used == 0
        assert result.counterfactual == threshold_dataset.rows[-1].tolist()

    def test_constant_model_does_not_converge(self, threshold_dataset, constant_model):
        config = AttackConfig(generations=10, seed=0)
        result = PermuteAttack(constant_model, threshold_dataset, config).run(threshold_dataset.rows[0])

        assert not result.success
        assert result.generations_used == 10
        assert len(result.trace) == 10
        assert result.counterfactual is None
        assert result.trace[1].rho0 == pytest.approx(0.6 * 0.96)
        assert result.trace[-1].rho0 == pytest.approx(0.6 * 0.96**9)

    def test_same_seed_same_result(self, credit_model, credit_split, fast_config):
        train, test = credit_split
        runner = PermuteAttack(credit_model, train, fast_config)
        first = runner.run(test.rows[0], instance_id=0)
        second = runner.run(test.rows[0], instance_id=0)
        assert first.model_dump_json() == second.model_dump_json()

    def test_success_predicts_target(self, credit_model, credit_split, fast_config):
        train, test = credit_split
        runner = PermuteAttack(credit_model, train, fast_config)
        for k in range(5):
            result = runner.run(test.rows[k], seed=k)
            if result.success:
                assert credit_model.predict_class(np.array(result.counterfactual))[0] == result.target_class
                assert result.l0 == len(result.changed_features)

    def test_elite_survives_and_fitness_never_drops(self, credit_model, credit_split):
        train, test = credit_split
        records = []

        def record(generation, population, fitness, elite, rho0, rho1):
            records.append((population.copy(), float(fitness[elite]), population[elite].copy()))

        config = AttackConfig(generations=30, seed=3)
        PermuteAttack(credit_model, train, config).run(test.rows[1], on_generation=record)

        for (_, best, elite), (population, next_best, _) in zip(records, records[1:]):
            assert np.array_equal(population[0], elite)
            assert next_best >= best - 1e-12

    def test_mutable_features_are_respected(self, threshold_dataset, threshold_model):
        original = threshold_dataset.rows[0]
        seen = []
        config = AttackConfig(generations=10, mutable_features=["x2", "x3"], seed=0)
        result = PermuteAttack(threshold_model, threshold_dataset, config).run(
            original,
            on_generation=lambda g, population, *rest: seen.append(population[:, 0].copy()),
        )
        assert not result.success
        assert all((column == original[0]).all() for column in seen)

    def test_unknown_mutable_feature(self, threshold_dataset, threshold_model):
        with pytest.raises(ConfigError):
            PermuteAttack(threshold_model, threshold_dataset, AttackConfig(mutable_features=["nope"]))

    @pytest.mark.parametrize("delta0_max, expected", [(None, None), (0.5, False), (1, True)])
    def test_budget_flag(self, threshold_dataset, threshold_model, delta0_max, expected):
        config = AttackConfig(delta0_max=delta0_max, seed=0)
        result = PermuteAttack(threshold_model, threshold_dataset, config).run(threshold_dataset.rows[0])
        assert result.within_budget is expected

    def test_multiclass_without_target(self, threshold_dataset):
        model = function_model(threshold_dataset.features, lambda row: [0.5, 0.3, 0.2], n_classes=3)
        with pytest.raises(ConfigError):
            PermuteAttack(model, threshold_dataset, AttackConfig()).run(threshold_dataset.rows[0])

    def test_backend_failure_propagates(self, threshold_dataset):
        def broken(row):
            raise BackendError("model went away")

        model = function_model(threshold_dataset.features, broken)
        with pytest.raises(BackendError):
            PermuteAttack(model, threshold_dataset, AttackConfig()).run(threshold_dataset.rows[0])

    def test_gibbs_values_come_from_training_data(self, credit_model, credit_split):
        train, test = credit_split
        observed = [set(train.rows[:, i]) for i in range(train.n_features)]
        config = AttackConfig(generations=10, gibbs=True, seed=0)

        def check(generation, population, *rest):
            for row in population:
                assert all(row[i] in observed[i] for i in range(len(row)))

        PermuteAttack(credit_model, train, config).run(train.rows[0], on_generation=check)


def tiny_problem(seed):
    """
    Four categorical features with three levels, labelled by a random
    two-condition rule, and a forest trained on them. None when the rule
    leaves a single class.
    """
    rng = np.random.default_rng(seed)
    features = [
        FeatureSchema(name=f"f{i}", kind=FeatureKind.CATEGORICAL, levels=["a", "b", "c"]) for i in range(4)
    ]
    rows = rng.integers(0, 3, (60, 4)).astype(np.float64)
    (j, k), (a, b) = rng.choice(4, 2, replace=False), rng.integers(0, 3, 2)
    hit_j, hit_k = rows[:, j] == a, rows[:, k] == b
    labels = (hit_j & hit_k) if rng.random() < 0.5 else (hit_j | hit_k)
    if labels.all() or not labels.any():
        return None
    dataset = Dataset(features=features, rows=rows, labels=labels.astype(np.int64), class_names=["0", "1"])
    forest = train_forest(dataset, n_trees=10, seed=seed)
    return dataset, ModelHandle.from_forest(forest, features)


def test_close_to_exhaustive_optimum():
    solvable = close = 0
    for seed in range(200):
        problem = tiny_problem(seed)
        if problem is None:
            continue
        dataset, model = problem
        classes = model.predict_class(dataset.rows)
        if not (classes == 0).any():
            continue
        x_orig = dataset.rows[np.flatnonzero(classes == 0)[0]]
        oracle = exhaustive_search(x_orig, 1, model, PermutationDomain.from_dataset(dataset), max_changes=2)
        if oracle is None:
            continue
        solvable += 1
        result = PermuteAttack(model, dataset, AttackConfig(seed=seed)).run(x_orig, target_class=1)
        close += int(result.success and result.l0 <= oracle[1] + 1)
        if solvable == 20:
            break
    assert solvable >= 20
    assert close >= 0.95 * solvable


class TestExhaustiveSearch:
    def test_finds_single_change(self, threshold_dataset, threshold_model):
        x_orig = threshold_dataset.rows[0]
        candidate, size = exhaustive_search(
            x_orig, 1, threshold_model, PermutationDomain.from_dataset(threshold_dataset)
        )
        assert size == 1
        assert np.flatnonzero(candidate != x_orig).tolist() == [0]

    def test_unreachable_target(self, threshold_dataset, constant_model):
        domain = PermutationDomain.from_dataset(threshold_dataset)
        assert exhaustive_search(threshold_dataset.rows[0], 1, constant_model, domain) is None


class TestAlternatives:
    def test_distinct_feature_sets(self, threshold_dataset, threshold_model):
        runner = PermuteAttack(threshold_model, threshold_dataset, AttackConfig(seed=0))
        results = alternative_counterfactuals(runner, threshold_dataset.rows[0], k=3, max_attempts=4)

        keys = [frozenset(r.changed_names) for r in results]
        assert 1 <= len(results) <= 3
        assert len(set(keys)) == len(keys)
        assert all(r.success and "x1" in r.changed_names for r in results)

    def test_already_target_returns_single_result(self, threshold_dataset, threshold_model):
        runner = PermuteAttack(threshold_model, threshold_dataset, AttackConfig())
        results = alternative_counterfactuals(runner, threshold_dataset.rows[-1], k=3, target_class=1)
        assert len(results) == 1 and results[0].already_target


def test_candidate_fitness_must_be_finite():
    with pytest.raises(ValueError):
        Candidate(
            instance=np.zeros(2),
            fitness=float("nan"),
            probs=np.array([0.5, 0.5]),
            changed_mask=np.zeros(2, dtype=bool),
        )
