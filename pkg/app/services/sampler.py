"""
Perturbation-value generation.

Every value written into an instance here is copied from the training
column it belongs to: marginal draws pick a random training row, the
conditional draws pick among training rows that share the instance's
discretized context.
"""

import copy
import logging
from collections import OrderedDict, defaultdict
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.models.schema import Dataset, DiscretizedView
from app.services.tabular import discretize

logger = logging.getLogger(__name__)

RELAXED_CACHE_SIZE = 4096


class PermutationDomain:
    """Admissible values per feature: the training column itself."""

    def __init__(self, columns: np.ndarray, mutable: np.ndarray) -> None:
        self.columns = np.asarray(columns, dtype=np.float64)
        self.mutable = np.asarray(mutable, dtype=bool)
        if self.columns.shape[0] == 0:
            raise ValueError("permutation domain needs at least one training row")

    @classmethod
    def from_dataset(cls, dataset: Dataset, mutable: Optional[np.ndarray] = None) -> "PermutationDomain":
        if mutable is None:
            mutable = np.array([f.mutable for f in dataset.features], dtype=bool)
        return cls(dataset.rows, mutable)

    def distinct(self, i: int) -> np.ndarray:
        return np.unique(self.columns[:, i])

    def draw(self, i: int, rng: np.random.Generator) -> float:
        """Uniform draw from the column's empirical distribution."""
        return float(self.columns[rng.integers(self.columns.shape[0]), i])


def permute_feature(
    instance: np.ndarray,
    i: int,
    domain: PermutationDomain,
    rng: np.random.Generator,
) -> np.ndarray:
    """Copy of ``instance`` with feature i replaced by a marginal draw."""
    if not domain.mutable[i]:
        raise ValueError(f"feature {i} is immutable")
    perturbed = np.array(instance, dtype=np.float64, copy=True)
    perturbed[i] = domain.draw(i, rng)
    return perturbed


class ConditionalIndex:
    """
    Rows grouped by their discretized context for every feature.

    For feature i the context of a row is its bin vector with entry i
    removed; ``rows_for(instance, i)`` returns the training rows sharing
    the instance's context, relaxing conditions when none do.
    """

    def __init__(
        self,
        dataset: Dataset,
        view: DiscretizedView,
        domain: PermutationDomain,
        cache_size: int = RELAXED_CACHE_SIZE,
    ) -> None:
        self.view = view
        self.domain = domain
        self.values = dataset.rows
        self.bins = np.ascontiguousarray(view.rows, dtype=np.int64)
        self.spans = np.maximum(np.asarray(view.bins_per_feature, dtype=np.float64) - 1.0, 1.0)
        self._all_rows = np.arange(self.bins.shape[0])
        self._contexts: List[Dict[bytes, np.ndarray]] = []
        # LRU of relaxed lookups for contexts absent from the training data
        self._relaxed: "OrderedDict[Tuple[int, bytes], np.ndarray]" = OrderedDict()
        self.cache_size = cache_size

        m = self.bins.shape[1]
        for i in range(m):
            others = self.bins[:, np.arange(m) != i]
            groups: Dict[bytes, List[int]] = defaultdict(list)
            for r, context in enumerate(others):
                groups[context.tobytes()].append(r)
            self._contexts.append({k: np.asarray(v) for k, v in groups.items()})

    @classmethod
    def build(
        cls,
        dataset: Dataset,
        n_bins: int,
        domain: Optional[PermutationDomain] = None,
        cache_size: int = RELAXED_CACHE_SIZE,
    ) -> "ConditionalIndex":
        view = discretize(dataset, n_bins)
        return cls(dataset, view, domain or PermutationDomain.from_dataset(dataset), cache_size)

    def with_domain(self, domain: PermutationDomain) -> "ConditionalIndex":
        """Same contexts, different mutability mask."""
        clone = copy.copy(self)
        clone.domain = domain
        return clone

    def _context_key(self, bins: np.ndarray, i: int) -> bytes:
        return np.delete(bins, i).tobytes()

    def rows_for(self, instance: np.ndarray, i: int) -> np.ndarray:
        bins = self.view.bin_instance(instance)
        key = self._context_key(bins, i)
        rows = self._contexts[i].get(key)
        if rows is not None:
            return rows
        cached = self._relaxed.get((i, key))
        if cached is not None:
            self._relaxed.move_to_end((i, key))
            return cached
        cached = self._relax(bins, i)
        self._relaxed[(i, key)] = cached
        while len(self._relaxed) > self.cache_size:
            self._relaxed.popitem(last=False)
        return cached

    def _relax(self, bins: np.ndarray, i: int) -> np.ndarray:
        """Drop the least typical conditions first until some row matches."""
        active = [j for j in range(len(bins)) if j != i]
        distance = np.abs(self.bins - bins) / self.spans
        atypical = distance.mean(axis=0)
        # Stable sort keeps the lowest feature index first among equal distances.
        order = sorted(active, key=lambda j: -atypical[j])
        for step, dropped in enumerate(order):
            active.remove(dropped)
            if not active:
                break
            match = np.all(self.bins[:, active] == bins[active], axis=1)
            if match.any():
                logger.debug("Context for feature %d relaxed after %d dropped condition(s)", i, step + 1)
                return self._all_rows[match]
        logger.debug("Context for feature %d relaxed to the marginal", i)
        return self._all_rows

    def conditional_values(self, instance: np.ndarray, i: int) -> np.ndarray:
        """Feature-i values of the training rows sharing the instance's context."""
        return self.values[self.rows_for(instance, i), i]


def conditional_values(index: ConditionalIndex, instance: np.ndarray, i: int) -> np.ndarray:
    return index.conditional_values(instance, i)


def gibbs_perturb(
    index: ConditionalIndex,
    instance: np.ndarray,
    features: Iterable[int],
    n_iter: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Jointly resample ``features`` from p(x_S | x_-S) by Gibbs sweeps.

    Each feature is first replaced by a marginal draw; every sweep then
    visits the features in random order and redraws each one from its
    conditional given the current state.
    """
    features = sorted(set(int(f) for f in features))
    if not features:
        raise ValueError("gibbs_perturb needs at least one feature")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")

    x = np.array(instance, dtype=np.float64, copy=True)
    for i in features:
        x = permute_feature(x, i, index.domain, rng)
    for _ in range(n_iter):
        for i in rng.permutation(features):
            candidates = index.conditional_values(x, int(i))
            x[i] = candidates[rng.integers(len(candidates))]
    return x


def nearest_conditional_value(
    index: ConditionalIndex,
    instance: np.ndarray,
    i: int,
    target_value: float,
    rng: np.random.Generator,
) -> float:
    """
    Conditional value of feature i closest to ``target_value``.

    Numeric features use absolute difference (smaller value on ties).
    Categorical features have no metric: the target itself if it is in
    the conditional set, otherwise a uniform member of the set.
    """
    candidates = np.unique(index.conditional_values(instance, i))
    if index.view.features[i].is_categorical:
        if target_value in candidates:
            return float(target_value)
        return float(candidates[rng.integers(len(candidates))])
    return float(candidates[np.argmin(np.abs(candidates - target_value))])
