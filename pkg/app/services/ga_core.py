"""
Permutation genetic attack.

A population of perturbed copies of the original instance evolves under
the fitness

    |f(x)_t - f(x_orig)_t| - rho0 * ||x_orig - x||_0 - rho1 * ||x_orig - x||_2

with softmax selection, uniform crossover, importance-weighted mutation
and elitism. Mutation replaces feature values with values observed in
the training column, so every counterfactual stays inside the data's
value domain. When the best target probability stalls, the penalties
are relaxed by ``decay``.
"""

import itertools
import logging
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy.special import softmax

from app.errors import BackendError, ConfigError
from app.models.attack import AttackConfig, AttackResult, Candidate, ChangedFeature, GenerationTrace
from app.models.schema import Dataset, FeatureSchema
from app.services.model import ModelHandle
from app.services.sampler import (
    ConditionalIndex,
    PermutationDomain,
    gibbs_perturb,
    nearest_conditional_value,
    permute_feature,
)
from app.services.tabular import decode_instance, validate_instance

logger = logging.getLogger(__name__)

T = TypeVar("T")

PROGRESS_TOLERANCE = 1e-9
ALTERNATIVE_SEED_STRIDE = 7919

GenerationCallback = Callable[[int, np.ndarray, np.ndarray, int, float, float], None]


class DistanceScaler:
    """
    Mixed-type distances to the original instance.

    Numeric features are divided by the training standard deviation; a
    changed categorical feature contributes 1.
    """

    def __init__(self, features: Sequence[FeatureSchema], columns: np.ndarray) -> None:
        self.categorical = np.array([f.is_categorical for f in features], dtype=bool)
        scale = np.asarray(columns, dtype=np.float64).std(axis=0)
        scale[(scale == 0) | self.categorical] = 1.0
        self.scale = scale

    def l0(self, population: np.ndarray, x_orig: np.ndarray) -> np.ndarray:
        return np.count_nonzero(np.atleast_2d(population) != x_orig, axis=1)

    def l2(self, population: np.ndarray, x_orig: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(population) - x_orig
        terms = np.where(self.categorical, (diff != 0).astype(np.float64), diff / self.scale)
        return np.sqrt(np.sum(terms**2, axis=1))


def _fitness(
    target_probs: np.ndarray,
    original_target_prob: float,
    l0: np.ndarray,
    l2: np.ndarray,
    rho0: float,
    rho1: float,
) -> np.ndarray:
    return np.abs(target_probs - original_target_prob) - rho0 * l0 - rho1 * l2


def compute_fitness(
    x: np.ndarray,
    x_orig: np.ndarray,
    t: int,
    rho0: float,
    rho1: float,
    model: ModelHandle,
    scaler: DistanceScaler,
) -> float:
    """Fitness of a single candidate; model failures propagate."""
    probs = model.predict_proba(np.vstack([x, x_orig]))
    return float(
        _fitness(
            probs[:1, t],
            probs[1, t],
            scaler.l0(x, x_orig),
            scaler.l2(x, x_orig),
            rho0,
            rho1,
        )[0]
    )


def selection_probabilities(fitnesses: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(fitness / temperature); scipy subtracts the max before exponentiating."""
    return softmax(np.asarray(fitnesses, dtype=np.float64) / temperature)


def select_parents(
    population: Sequence[T],
    fitnesses: np.ndarray,
    temperature: float,
    k: int,
    rng: np.random.Generator,
) -> List[Tuple[T, T]]:
    """k parent pairs drawn with replacement, weighted by softmax(fitness / temperature)."""
    probs = selection_probabilities(fitnesses, temperature)
    picks = rng.choice(len(population), size=(k, 2), p=probs)
    return [(population[a], population[b]) for a, b in picks]


def crossover(
    parent1: np.ndarray,
    parent2: np.ndarray,
    rng: np.random.Generator,
    index: Optional[ConditionalIndex] = None,
) -> np.ndarray:
    """
    Uniform crossover. With a conditional index, every value donated by
    parent2 is replaced by the conditional value closest to it given the
    child's other features.
    """
    from_second = rng.random(len(parent1)) < 0.5
    child = np.where(from_second, parent2, parent1).astype(np.float64)
    if index is not None:
        for i in np.flatnonzero(from_second & (parent1 != parent2)):
            child[i] = nearest_conditional_value(index, child, int(i), float(parent2[i]), rng)
    return child


def feature_importance(changed_mask: np.ndarray, target_shift: np.ndarray) -> np.ndarray:
    """Mean |Δf_t| over the candidates in which each feature changed (0 if never)."""
    counts = changed_mask.sum(axis=0).astype(np.float64)
    sums = changed_mask.T.astype(np.float64) @ target_shift
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def mutate(
    child: np.ndarray,
    importance: np.ndarray,
    config: AttackConfig,
    rng: np.random.Generator,
    domain: PermutationDomain,
    index: Optional[ConditionalIndex] = None,
) -> np.ndarray:
    """
    Perturb at least one mutable feature. The count is
    Binomial(n_mutable, mutation_probability) clamped to >= 1; features
    are picked without replacement with softmax(importance) weights.
    """
    mutable = np.flatnonzero(domain.mutable)
    if len(mutable) == 0:
        raise ConfigError("no mutable features to mutate")
    n_changes = max(1, int(rng.binomial(len(mutable), config.mutation_probability)))
    chosen = rng.choice(mutable, size=n_changes, replace=False, p=softmax(importance[mutable]))
    if config.gibbs and index is not None:
        return gibbs_perturb(index, child, chosen, config.gibbs_iters, rng)
    mutated = child
    for i in chosen:
        mutated = permute_feature(mutated, int(i), domain, rng)
    return mutated


def update_parameters(rho0: float, rho1: float, progress: bool, decay: float) -> Tuple[float, float]:
    """Relax both penalties by ``decay`` when the generation made no progress."""
    if progress:
        return rho0, rho1
    return rho0 * decay, rho1 * decay


def elite_order(fitness: np.ndarray, l0: np.ndarray, l2: np.ndarray) -> np.ndarray:
    """Population indices best first: fitness, then fewer changes, then smaller L2."""
    return np.lexsort((np.arange(len(fitness)), l2, l0, -fitness))


def resolve_mutable(features: Sequence[FeatureSchema], names: Optional[Sequence[str]]) -> np.ndarray:
    if names is None:
        return np.array([f.mutable for f in features], dtype=bool)
    known = {f.name for f in features}
    unknown = sorted(set(names) - known)
    if unknown:
        raise ConfigError(f"unknown mutable feature(s): {', '.join(unknown)}")
    return np.array([f.name in names for f in features], dtype=bool)


def resolve_target(original_class: int, n_classes: int, target_class: Optional[int]) -> int:
    if target_class is not None:
        if not 0 <= target_class < n_classes:
            raise ConfigError(f"target class {target_class} outside 0..{n_classes - 1}")
        return target_class
    if n_classes != 2:
        raise ConfigError("target_class is required for models with more than two classes")
    return 1 - original_class


class PermuteAttack:
    """
    Attack runner bound to one model, training set and configuration.

    Building the runner precomputes the permutation domain, distance
    scales and (with Gibbs sampling on) the conditional index, so a
    runner can be reused across many instances.
    """

    def __init__(
        self,
        model: ModelHandle,
        dataset: Dataset,
        config: AttackConfig,
        index: Optional[ConditionalIndex] = None,
    ) -> None:
        self.model = model
        self.dataset = dataset
        self.config = config
        self.features = dataset.features
        self.mutable = resolve_mutable(self.features, config.mutable_features)
        if not self.mutable.any():
            raise ConfigError("the attack needs at least one mutable feature")
        self.domain = PermutationDomain(dataset.rows, self.mutable)
        self.scaler = DistanceScaler(self.features, dataset.rows)
        self.index: Optional[ConditionalIndex] = None
        if config.gibbs:
            index = index or ConditionalIndex.build(dataset, config.n_bins)
            self.index = index.with_domain(self.domain)

    def _initial_population(self, x_orig: np.ndarray, seed: int) -> np.ndarray:
        mutable = np.flatnonzero(self.mutable)
        population = []
        for slot in range(self.config.population_size):
            rng = np.random.default_rng((seed, 0, slot))
            feature = int(rng.choice(mutable))
            if self.index is not None:
                population.append(gibbs_perturb(self.index, x_orig, [feature], self.config.gibbs_iters, rng))
            else:
                population.append(permute_feature(x_orig, feature, self.domain, rng))
        return np.vstack(population)

    def _changes(self, x_orig: np.ndarray, x: np.ndarray) -> List[ChangedFeature]:
        return [
            ChangedFeature(
                index=int(i),
                name=self.features[i].name,
                old=self.features[i].decode(x_orig[i]),
                new=self.features[i].decode(x[i]),
            )
            for i in np.flatnonzero(x != x_orig)
        ]

    def _within_budget(self, l0: int, l2: float) -> Optional[bool]:
        cfg = self.config
        if cfg.delta0_max is None and cfg.delta2_max is None:
            return None
        ok0 = cfg.delta0_max is None or l0 <= cfg.delta0_max
        ok2 = cfg.delta2_max is None or l2 <= cfg.delta2_max
        return ok0 and ok2

    def run(
        self,
        x_orig: np.ndarray,
        target_class: Optional[int] = None,
        seed: Optional[int] = None,
        instance_id: Optional[int] = None,
        on_generation: Optional[GenerationCallback] = None,
    ) -> AttackResult:
        """
        Search for a counterfactual of ``x_orig`` classified as the target.

        Raises:
            BackendError: the model failed.
            ConfigError: unusable target or mutability configuration.
        """
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        x_orig = validate_instance(x_orig, self.features)
        original_probs = self.model.predict_proba(x_orig)[0]
        original_class = int(np.argmax(original_probs))
        target = resolve_target(
            original_class,
            self.model.n_classes,
            cfg.target_class if target_class is None else target_class,
        )
        t_orig = float(original_probs[target])
        base = dict(
            instance_id=instance_id,
            target_class=target,
            original_class=original_class,
            original_probs=original_probs.tolist(),
            seed=seed,
            config=cfg,
        )

        if original_class == target:
            return AttackResult(
                success=True,
                already_target=True,
                final_probs=original_probs.tolist(),
                counterfactual=x_orig.tolist(),
                counterfactual_raw=decode_instance(x_orig, self.features),
                within_budget=self._within_budget(0, 0.0),
                **base,
            )

        rho0, rho1 = cfg.rho0, cfg.rho1
        best_seen = t_orig
        population = self._initial_population(x_orig, seed)
        trace: List[GenerationTrace] = []
        elite = Candidate(
            instance=x_orig,
            fitness=0.0,
            probs=original_probs,
            changed_mask=np.zeros(len(x_orig), dtype=bool),
        )

        for generation in range(1, cfg.generations + 1):
            probs = self.model.predict_proba(population)
            changed = population != x_orig
            l0 = changed.sum(axis=1)
            l2 = self.scaler.l2(population, x_orig)
            shift = np.abs(probs[:, target] - t_orig)
            fitness = _fitness(probs[:, target], t_orig, l0, l2, rho0, rho1)
            order = elite_order(fitness, l0, l2)
            slot = int(order[0])
            elite = Candidate(
                instance=population[slot],
                fitness=float(fitness[slot]),
                probs=probs[slot],
                changed_mask=changed[slot],
            )
            best_target = float(probs[:, target].max())

            trace.append(
                GenerationTrace(
                    generation=generation,
                    best_fitness=elite.fitness,
                    best_target_probability=best_target,
                    elite_target_probability=float(elite.probs[target]),
                    elite_changes=int(elite.changed_mask.sum()),
                    rho0=rho0,
                    rho1=rho1,
                )
            )
            if on_generation is not None:
                on_generation(generation, population, fitness, slot, rho0, rho1)
            logger.debug(
                "generation %d: fitness %.4f, target p %.4f, %d change(s)",
                generation,
                elite.fitness,
                elite.probs[target],
                l0[slot],
            )

            if int(np.argmax(elite.probs)) == target:
                return self._success(x_orig, elite.instance, target, generation, trace, base)

            progress = best_target > best_seen + PROGRESS_TOLERANCE
            best_seen = max(best_seen, best_target)
            importance = feature_importance(changed, shift)
            pool = order[: cfg.mating_pool_size]

            children = [elite.instance]
            for child_slot in range(1, cfg.population_size):
                rng = np.random.default_rng((seed, generation, child_slot))
                [(a, b)] = select_parents(pool, fitness[pool], cfg.temperature, 1, rng)
                child = crossover(population[a], population[b], rng, self.index)
                children.append(mutate(child, importance, cfg, rng, self.domain, self.index))
            population = np.vstack(children)
            rho0, rho1 = update_parameters(rho0, rho1, progress, cfg.decay)

        l0_final = int(elite.changed_mask.sum())
        l2_final = float(self.scaler.l2(elite.instance, x_orig)[0])
        logger.info("Attack on instance %s did not converge in %d generations", instance_id, cfg.generations)
        return AttackResult(
            success=False,
            final_probs=elite.probs.tolist(),
            changed_features=self._changes(x_orig, elite.instance),
            l0=l0_final,
            l2=l2_final,
            within_budget=self._within_budget(l0_final, l2_final),
            generations_used=cfg.generations,
            trace=trace,
            **base,
        )

    def _success(
        self,
        x_orig: np.ndarray,
        counterfactual: np.ndarray,
        target: int,
        generation: int,
        trace: List[GenerationTrace],
        base: dict,
    ) -> AttackResult:
        # Independent re-check of the returned counterfactual.
        final_probs = self.model.predict_proba(counterfactual)[0]
        if int(np.argmax(final_probs)) != target:
            raise BackendError("model answered differently when re-checking the counterfactual")
        l0 = int(np.count_nonzero(counterfactual != x_orig))
        l2 = float(self.scaler.l2(counterfactual, x_orig)[0])
        result = AttackResult(
            success=True,
            final_probs=final_probs.tolist(),
            counterfactual=counterfactual.tolist(),
            counterfactual_raw=decode_instance(counterfactual, self.features),
            changed_features=self._changes(x_orig, counterfactual),
            l0=l0,
            l2=l2,
            within_budget=self._within_budget(l0, l2),
            generations_used=generation,
            trace=trace,
            **base,
        )
        logger.info(
            "Attack on instance %s succeeded in %d generation(s), changed %s",
            base["instance_id"],
            generation,
            ", ".join(result.changed_names),
        )
        return result


def attack(
    x_orig: np.ndarray,
    target_class: Optional[int],
    model: ModelHandle,
    dataset: Dataset,
    config: AttackConfig,
    on_generation: Optional[GenerationCallback] = None,
) -> AttackResult:
    return PermuteAttack(model, dataset, config).run(x_orig, target_class, on_generation=on_generation)


def alternative_counterfactuals(
    runner: PermuteAttack,
    x_orig: np.ndarray,
    k: int,
    target_class: Optional[int] = None,
    max_attempts: Optional[int] = None,
    instance_id: Optional[int] = None,
) -> List[AttackResult]:
    """
    Up to k successful results with distinct changed-feature sets, from
    repeated runs with derived seeds.
    """
    max_attempts = max_attempts or 5 * k
    found: List[AttackResult] = []
    seen = set()
    for attempt in range(max_attempts):
        seed = runner.config.seed + ALTERNATIVE_SEED_STRIDE * attempt
        result = runner.run(x_orig, target_class, seed=seed, instance_id=instance_id)
        if result.already_target:
            return [result]
        key = frozenset(result.changed_names)
        if result.success and key not in seen:
            seen.add(key)
            found.append(result)
            if len(found) == k:
                break
    return found


def exhaustive_search(
    x_orig: np.ndarray,
    target_class: int,
    model: ModelHandle,
    domain: PermutationDomain,
    max_changes: int = 2,
) -> Optional[Tuple[np.ndarray, int]]:
    """
    Minimal-L0 counterfactual among all substitutions of up to
    ``max_changes`` mutable features with observed values. Only practical
    for tiny schemas.
    """
    x_orig = np.asarray(x_orig, dtype=np.float64)
    mutable = np.flatnonzero(domain.mutable)
    for size in range(1, max_changes + 1):
        batch = []
        for combo in itertools.combinations(mutable, size):
            choices = [domain.distinct(i)[domain.distinct(i) != x_orig[i]] for i in combo]
            for values in itertools.product(*choices):
                candidate = x_orig.copy()
                candidate[list(combo)] = values
                batch.append(candidate)
        if not batch:
            continue
        batch_array = np.vstack(batch)
        hits = np.flatnonzero(model.predict_class(batch_array) == target_class)
        if len(hits):
            return batch_array[hits[0]], size
    return None
