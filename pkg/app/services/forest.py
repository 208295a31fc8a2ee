"""
Reference random forest: bootstrap CART trees with Gini splits over the
one-hot encoded input, soft-voting probabilities.

The attack only needs black-box ``predict_proba`` access; this forest
exists so the pipeline runs without an external model.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.errors import ModelError
from app.models.forest import ForestDocument, ForestParams, TreeDocument
from app.models.schema import Dataset, Provenance
from app.services.tabular import onehot_matrix

logger = logging.getLogger(__name__)

_GAIN_EPS = 1e-12


def gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity of class-count vectors (last axis)."""
    totals = counts.sum(axis=-1, keepdims=True)
    shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return 1.0 - np.sum(shares**2, axis=-1)


class DecisionTree:
    """One CART tree stored as flat node arrays."""

    def __init__(
        self,
        feature: np.ndarray,
        threshold: np.ndarray,
        left: np.ndarray,
        right: np.ndarray,
        counts: np.ndarray,
    ) -> None:
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.counts = counts

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            split_on = self.feature[node]
            internal = split_on >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, split_on, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        counts = self.counts[self.apply(X)]
        return counts / counts.sum(axis=1, keepdims=True)

    def to_document(self) -> TreeDocument:
        return TreeDocument(
            feature=self.feature.tolist(),
            threshold=self.threshold.tolist(),
            left=self.left.tolist(),
            right=self.right.tolist(),
            counts=self.counts.tolist(),
        )

    @classmethod
    def from_document(cls, document: TreeDocument) -> "DecisionTree":
        return cls(
            feature=np.asarray(document.feature, dtype=np.int64),
            threshold=np.asarray(document.threshold, dtype=np.float64),
            left=np.asarray(document.left, dtype=np.int64),
            right=np.asarray(document.right, dtype=np.int64),
            counts=np.asarray(document.counts, dtype=np.float64),
        )


class _TreeBuilder:
    """Grows one tree depth-first from a bootstrap sample."""

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        n_classes: int,
        params: ForestParams,
        max_features: int,
        rng: np.random.Generator,
    ) -> None:
        self.X = X
        self.y = y
        self.n_classes = n_classes
        self.params = params
        self.max_features = max_features
        self.rng = rng
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.counts: List[np.ndarray] = []

    def _new_node(self, indices: np.ndarray) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append(np.bincount(self.y[indices], minlength=self.n_classes).astype(np.float64))
        return len(self.feature) - 1

    def _feature_split(self, indices: np.ndarray, f: int) -> Optional[Tuple[float, float]]:
        """Best (gain, threshold) for one feature, lowest threshold on ties."""
        values = self.X[indices, f]
        order = np.argsort(values, kind="stable")
        xs = values[order]
        one_hot = np.eye(self.n_classes)[self.y[indices][order]]

        n = len(xs)
        left_counts = np.cumsum(one_hot, axis=0)[:-1]
        right_counts = left_counts[-1] + one_hot[-1] - left_counts
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left

        min_leaf = self.params.min_leaf
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            return None

        parent = gini(left_counts[-1] + one_hot[-1])
        weighted = (n_left * gini(left_counts) + n_right * gini(right_counts)) / n
        gain = np.where(valid, parent - weighted, -np.inf)
        p = int(np.argmax(gain))
        return float(gain[p]), float((xs[p] + xs[p + 1]) / 2.0)

    def _best_split(self, indices: np.ndarray) -> Optional[Tuple[int, float]]:
        width = self.X.shape[1]
        order = self.rng.permutation(width)
        # Keep drawing candidate features past max_features until a valid split shows up.
        for start in range(0, width, self.max_features):
            candidates = np.sort(order[start : start + self.max_features])
            best: Optional[Tuple[float, int, float]] = None
            for f in candidates:
                found = self._feature_split(indices, int(f))
                if found is None:
                    continue
                gain, threshold = found
                if best is None or gain > best[0] + _GAIN_EPS:
                    best = (gain, int(f), threshold)
            if best is not None and best[0] > _GAIN_EPS:
                return best[1], best[2]
        return None

    def build(self, indices: np.ndarray) -> DecisionTree:
        root = self._new_node(indices)
        stack = [(root, indices, 0)]
        while stack:
            node, idx, depth = stack.pop()
            if depth >= self.params.max_depth or len(idx) < 2 * self.params.min_leaf:
                continue
            if np.count_nonzero(self.counts[node]) < 2:
                continue
            split = self._best_split(idx)
            if split is None:
                continue
            f, threshold = split
            mask = self.X[idx, f] <= threshold
            left = self._new_node(idx[mask])
            right = self._new_node(idx[~mask])
            self.feature[node] = f
            self.threshold[node] = threshold
            self.left[node] = left
            self.right[node] = right
            stack.append((right, idx[~mask], depth + 1))
            stack.append((left, idx[mask], depth + 1))

        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            counts=np.vstack(self.counts),
        )


class ForestModel:
    """Immutable trained forest over one-hot input."""

    encoding = "onehot"

    def __init__(
        self,
        trees: List[DecisionTree],
        params: ForestParams,
        feature_width: int,
        n_classes: int,
    ) -> None:
        self.trees = trees
        self.params = params
        self.feature_width = feature_width
        self.n_classes = n_classes

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams) -> "ForestModel":
        """Train on an already encoded matrix X with class indices y."""
        if X.shape[0] == 0:
            raise ModelError("cannot train on an empty dataset")
        if len(np.unique(y)) < 2:
            raise ModelError("training data must contain at least two classes")

        width = X.shape[1]
        max_features = params.max_features or max(1, int(np.sqrt(width)))
        max_features = min(max_features, width)
        rng = np.random.default_rng(params.seed)
        trees = []
        for _ in range(params.n_trees):
            tree_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
            bootstrap = tree_rng.integers(0, X.shape[0], X.shape[0])
            builder = _TreeBuilder(X, y, n_classes, params, max_features, tree_rng)
            trees.append(builder.build(bootstrap))
        return cls(trees, params, width, n_classes)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Average of per-tree leaf class frequencies."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_width:
            raise ModelError(f"expected {self.feature_width} input columns, got {X.shape[1]}")
        return np.mean([tree.predict_proba(X) for tree in self.trees], axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_document(self, provenance: Optional[Provenance] = None) -> ForestDocument:
        return ForestDocument(
            params=self.params,
            feature_width=self.feature_width,
            n_classes=self.n_classes,
            trees=[tree.to_document() for tree in self.trees],
            provenance=provenance,
        )

    @classmethod
    def from_document(cls, document: ForestDocument) -> "ForestModel":
        trees = [DecisionTree.from_document(t) for t in document.trees]
        for tree in trees:
            if tree.feature.max(initial=-1) >= document.feature_width:
                raise ModelError("split feature index exceeds the feature width")
        return cls(trees, document.params, document.feature_width, document.n_classes)

    def save(self, path: Union[str, Path], provenance: Optional[Provenance] = None) -> None:
        Path(path).write_text(self.to_document(provenance).model_dump_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ForestModel":
        path = Path(path)
        if not path.is_file():
            raise ModelError(f"model file not found: {path}")
        return cls.from_document(ForestDocument.model_validate_json(path.read_text(encoding="utf-8")))


def train_forest(
    dataset: Dataset,
    n_trees: int = 10,
    max_depth: int = 12,
    min_leaf: int = 1,
    seed: int = 0,
    max_features: Optional[int] = None,
) -> ForestModel:
    """
    Train the reference forest on the one-hot encoding of ``dataset``.

    Raises:
        ModelError: single-class or empty dataset, non-positive hyperparameters.
    """
    try:
        params = ForestParams(
            n_trees=n_trees,
            max_depth=max_depth,
            min_leaf=min_leaf,
            max_features=max_features,
            seed=seed,
        )
    except ValidationError as exc:
        raise ModelError(f"invalid forest hyperparameters: {exc}") from exc

    X = onehot_matrix(dataset.rows, dataset.features)
    model = ForestModel.fit(X, dataset.labels, dataset.n_classes, params)
    logger.info(
        "Trained forest: %d trees on %d rows x %d one-hot columns",
        model.n_trees,
        dataset.n_rows,
        model.feature_width,
    )
    return model


def accuracy(model: ForestModel, dataset: Dataset) -> float:
    X = onehot_matrix(dataset.rows, dataset.features)
    return float(np.mean(model.predict(X) == dataset.labels))
