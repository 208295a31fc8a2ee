"""
Tabular representation layer: CSV ingestion, schema inference,
one-hot/ordinal encoding and quantile discretization.

Every other service consumes the ordinal-side ``Dataset`` produced here.
Categorical cells hold level indices, ordinal and continuous cells hold
their numeric value; one-hot vectors only exist at the model boundary.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.errors import DataError
from app.models.schema import (
    Dataset,
    DiscretizedView,
    FeatureKind,
    FeatureSchema,
    SchemaDocument,
)

logger = logging.getLogger(__name__)

DEFAULT_ORDINAL_THRESHOLD = 12


def _numeric_sort_key(value: str) -> Tuple[int, Union[float, str]]:
    try:
        return (0, float(value))
    except ValueError:
        return (1, value)


def _infer_feature(
    name: str,
    column: pd.Series,
    override: Optional[FeatureKind],
    ordinal_threshold: int,
    mutable: bool,
) -> Tuple[FeatureSchema, np.ndarray]:
    """Infer one column's schema and return it with the encoded values."""
    numeric = pd.to_numeric(column, errors="coerce")
    is_numeric = bool(numeric.notna().all())

    if override is not None:
        kind = override
    elif not is_numeric:
        kind = FeatureKind.CATEGORICAL
    elif numeric.nunique() > ordinal_threshold:
        kind = FeatureKind.CONTINUOUS
    else:
        kind = FeatureKind.ORDINAL

    if kind is FeatureKind.CATEGORICAL:
        levels = sorted(column.unique().tolist())
        lookup = {level: i for i, level in enumerate(levels)}
        values = column.map(lookup).to_numpy(dtype=np.float64)
        return FeatureSchema(name=name, kind=kind, levels=levels, mutable=mutable), values

    if not is_numeric:
        bad = column[numeric.isna()].iloc[0]
        raise DataError(f"non-numeric value {bad!r} in numeric column {name!r}")

    values = numeric.to_numpy(dtype=np.float64)
    if not np.isfinite(values).all():
        raise DataError(f"non-finite value in numeric column {name!r}")

    if kind is FeatureKind.ORDINAL:
        levels = np.unique(values).tolist()
        return FeatureSchema(name=name, kind=kind, levels=levels, mutable=mutable), values

    schema = FeatureSchema(
        name=name,
        kind=kind,
        minimum=float(values.min()),
        maximum=float(values.max()),
        mutable=mutable,
    )
    if values.min() == values.max():
        logger.warning("Column %s is constant (%s)", name, values[0])
    return schema, values


def load_csv(
    path: Union[str, Path],
    target_column: str,
    kind_overrides: Optional[Mapping[str, Union[str, FeatureKind]]] = None,
    *,
    delimiter: str = ",",
    ordinal_threshold: int = DEFAULT_ORDINAL_THRESHOLD,
    immutable: Sequence[str] = (),
) -> Dataset:
    """
    Load a delimited text file with a header row into a Dataset.

    Numeric columns with more than ``ordinal_threshold`` distinct values
    become continuous, other numeric columns ordinal, text columns
    categorical (levels sorted lexicographically). ``kind_overrides``
    wins over inference.

    Raises:
        DataError: missing file, missing target column, missing values,
            non-numeric value in a numeric column, or an empty dataset.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")

    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"dataset is empty: {path}") from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed delimited file {path}: {exc}") from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    if target_column not in frame.columns:
        raise DataError(f"target column {target_column!r} not found in {path}")
    if frame.empty:
        raise DataError(f"dataset is empty: {path}")

    frame = frame.apply(lambda col: col.str.strip())
    frame = frame.replace("", np.nan)
    missing = frame.columns[frame.isna().any()].tolist()
    if missing:
        raise DataError(f"missing values in column(s): {', '.join(missing)}")

    overrides = {name: FeatureKind(kind) for name, kind in (kind_overrides or {}).items()}
    feature_names = [c for c in frame.columns if c != target_column]
    unknown = (set(overrides) | set(immutable)) - set(feature_names)
    if unknown:
        raise DataError(f"unknown feature(s) in configuration: {', '.join(sorted(unknown))}")

    features: List[FeatureSchema] = []
    columns: List[np.ndarray] = []
    for name in feature_names:
        feature, values = _infer_feature(
            name,
            frame[name],
            overrides.get(name),
            ordinal_threshold,
            mutable=name not in immutable,
        )
        features.append(feature)
        columns.append(values)

    target = frame[target_column]
    class_names = sorted(target.unique().tolist(), key=_numeric_sort_key)
    class_lookup = {value: i for i, value in enumerate(class_names)}
    labels = target.map(class_lookup).to_numpy(dtype=np.int64)

    dataset = Dataset(
        features=features,
        rows=np.column_stack(columns) if columns else np.empty((len(frame), 0)),
        labels=labels,
        target=target_column,
        class_names=class_names,
    )
    kinds = [f.kind for f in features]
    logger.info(
        "Loaded %d rows x %d features from %s (%d categorical, %d ordinal, %d continuous)",
        dataset.n_rows,
        dataset.n_features,
        path,
        kinds.count(FeatureKind.CATEGORICAL),
        kinds.count(FeatureKind.ORDINAL),
        kinds.count(FeatureKind.CONTINUOUS),
    )
    return dataset


def validate_instance(values: Any, features: Sequence[FeatureSchema]) -> np.ndarray:
    """Check an ordinal-side vector against the schema and return it as floats."""
    array = np.asarray(values, dtype=np.float64)
    if array.shape != (len(features),):
        raise DataError(f"instance has shape {array.shape}, expected ({len(features)},)")
    if not np.isfinite(array).all():
        raise DataError("instance contains non-finite values")
    for feature, value in zip(features, array):
        if feature.is_categorical:
            if not value.is_integer() or not 0 <= value < len(feature.levels):
                raise DataError(f"level index {value} out of range for {feature.name!r}")
        elif feature.kind is FeatureKind.ORDINAL and value not in feature.levels:
            raise DataError(f"{value} is not a level of ordinal feature {feature.name!r}")
    return array


def encode_instance(raw: Mapping[str, Any], features: Sequence[FeatureSchema]) -> np.ndarray:
    """Raw ``{feature: value}`` mapping → ordinal-side instance."""
    missing = [f.name for f in features if f.name not in raw]
    if missing:
        raise DataError(f"instance is missing feature(s): {', '.join(missing)}")
    try:
        return np.array([f.encode(raw[f.name]) for f in features], dtype=np.float64)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def decode_instance(values: np.ndarray, features: Sequence[FeatureSchema]) -> Dict[str, Any]:
    return {f.name: f.decode(v) for f, v in zip(features, values)}


def onehot_width(features: Sequence[FeatureSchema]) -> int:
    return sum(f.onehot_width for f in features)


def onehot_matrix(rows: np.ndarray, features: Sequence[FeatureSchema]) -> np.ndarray:
    """Batch version of ``to_onehot``: n × m ordinal rows → n × width."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != len(features):
        raise DataError(f"rows have {rows.shape[1]} columns, schema has {len(features)}")
    blocks = []
    for i, feature in enumerate(features):
        column = rows[:, i]
        if not feature.is_categorical:
            blocks.append(column[:, None])
            continue
        index = column.astype(np.int64)
        if (index != column).any() or (index < 0).any() or (index >= len(feature.levels)).any():
            raise DataError(f"level index out of range for {feature.name!r}")
        blocks.append(np.eye(len(feature.levels))[index])
    return np.hstack(blocks) if blocks else np.empty((rows.shape[0], 0))


def to_onehot(instance: np.ndarray, features: Sequence[FeatureSchema]) -> np.ndarray:
    """Expand categorical features into indicator blocks; others pass through."""
    return onehot_matrix(np.asarray(instance)[None, :], features)[0]


def from_onehot(vector: np.ndarray, features: Sequence[FeatureSchema]) -> np.ndarray:
    """
    Inverse of ``to_onehot``.

    Raises:
        DataError: wrong length, or a categorical block without exactly
            one set indicator.
    """
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (onehot_width(features),):
        raise DataError(f"one-hot vector has shape {vector.shape}, expected ({onehot_width(features)},)")

    values = np.empty(len(features))
    offset = 0
    for i, feature in enumerate(features):
        width = feature.onehot_width
        block = vector[offset : offset + width]
        offset += width
        if not feature.is_categorical:
            values[i] = block[0]
            continue
        set_bits = np.flatnonzero(block == 1.0)
        if len(set_bits) != 1 or not np.isin(block, (0.0, 1.0)).all():
            raise DataError(f"malformed indicator block for {feature.name!r}: {block.tolist()}")
        values[i] = set_bits[0]
    return values


def quantile_edges(column: np.ndarray, n_bins: int) -> List[float]:
    """
    Equal-population bin boundaries for one continuous column.

    Bin k holds the values ``edges[k-1] < v <= edges[k]``. A column with at
    most ``n_bins`` distinct values gets one bin per distinct value.
    """
    values = np.sort(np.asarray(column, dtype=np.float64))
    distinct = np.unique(values)
    if len(distinct) <= n_bins:
        return distinct[:-1].tolist()

    positions = np.ceil(np.arange(1, n_bins) * len(values) / n_bins).astype(np.int64) - 1
    edges = np.unique(values[positions])
    return edges[edges < distinct[-1]].tolist()


def discretize(dataset: Dataset, n_bins: int) -> DiscretizedView:
    """
    Map continuous columns to quantile-bin indices and discrete columns to
    level indices. The returned view carries the schema with bin edges.
    """
    if n_bins < 2:
        raise DataError(f"n_bins must be >= 2, got {n_bins}")
    if dataset.n_rows == 0:
        raise DataError("cannot discretize an empty dataset")

    features: List[FeatureSchema] = []
    bins = np.empty(dataset.rows.shape, dtype=np.int64)
    for i, feature in enumerate(dataset.features):
        column = dataset.rows[:, i]
        if feature.kind is FeatureKind.CONTINUOUS:
            feature = feature.model_copy(update={"bin_edges": quantile_edges(column, n_bins)})
            bins[:, i] = np.searchsorted(feature.bin_edges, column, side="left")
        elif feature.kind is FeatureKind.ORDINAL:
            bins[:, i] = np.searchsorted(np.asarray(feature.levels, dtype=float), column)
        else:
            bins[:, i] = column.astype(np.int64)
        features.append(feature)

    return DiscretizedView(
        features=features,
        rows=bins,
        bins_per_feature=[f.n_bins for f in features],
    )


def train_test_split(n_rows: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split; returns sorted (train, test) row indices."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(round(fraction * n_rows))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def save_schema(document: SchemaDocument, path: Union[str, Path]) -> None:
    Path(path).write_text(document.model_dump_json(indent=2), encoding="utf-8")


def load_schema(path: Union[str, Path]) -> SchemaDocument:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"schema file not found: {path}")
    return SchemaDocument.model_validate_json(path.read_text(encoding="utf-8"))
