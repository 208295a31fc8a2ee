"""
Pydantic models for the tabular representation layer.

FeatureSchema is the contract between raw CSV data and the optimizer:
categorical cells are stored as indices into ``levels``, ordinal and
continuous cells keep their numeric value.
"""

from enum import Enum
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_FORMAT = "permute-attack-schema"
SCHEMA_VERSION = 1


class FeatureKind(str, Enum):
    """How a column is represented and perturbed."""

    CONTINUOUS = "continuous"
    ORDINAL = "ordinal"
    CATEGORICAL = "categorical"


class FeatureSchema(BaseModel):
    """Per-column metadata: kind, domain and (after discretization) bin edges."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(description="Column name in the source file")
    kind: FeatureKind = Field(description="Representation kind")
    levels: List[Union[str, float]] = Field(
        default_factory=list,
        description="Distinct raw values: strings for categorical, sorted numbers for ordinal",
    )
    bin_edges: List[float] = Field(
        default_factory=list,
        description="Ascending quantile boundaries (continuous only)",
    )
    minimum: Optional[float] = Field(default=None, description="Training minimum")
    maximum: Optional[float] = Field(default=None, description="Training maximum")
    mutable: bool = Field(default=True, description="May the attack change this feature")

    @field_validator("bin_edges")
    @classmethod
    def _edges_ascending(cls, edges: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin_edges must be strictly ascending")
        return edges

    @model_validator(mode="after")
    def _check_levels(self) -> "FeatureSchema":
        if self.kind is FeatureKind.CONTINUOUS:
            if self.levels:
                raise ValueError(f"continuous feature {self.name!r} cannot carry levels")
            return self
        if not self.levels:
            raise ValueError(f"feature {self.name!r} needs at least one level")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"feature {self.name!r} has duplicate levels")
        if self.bin_edges:
            raise ValueError(f"discrete feature {self.name!r} cannot carry bin edges")
        return self

    @property
    def is_categorical(self) -> bool:
        return self.kind is FeatureKind.CATEGORICAL

    @property
    def onehot_width(self) -> int:
        """Number of one-hot columns this feature expands to."""
        return len(self.levels) if self.is_categorical else 1

    @property
    def n_bins(self) -> int:
        if self.kind is FeatureKind.CONTINUOUS:
            return len(self.bin_edges) + 1
        return len(self.levels)

    def bin_of(self, value: float) -> int:
        """Bin index of a stored value; values equal to an edge go to the lower bin."""
        if self.kind is FeatureKind.CONTINUOUS:
            return int(np.searchsorted(self.bin_edges, value, side="left"))
        if self.is_categorical:
            return int(value)
        return int(np.searchsorted(np.asarray(self.levels, dtype=float), value, side="left"))

    def decode(self, value: float) -> Union[str, float, int]:
        """Stored value → raw value as it appeared in the source file."""
        if self.is_categorical:
            return str(self.levels[int(value)])
        if float(value).is_integer():
            return int(value)
        return float(value)

    def encode(self, raw: Union[str, float, int]) -> float:
        """Raw value → stored value. Raises ValueError for unknown levels."""
        if self.is_categorical:
            try:
                return float(self.levels.index(str(raw)))
            except ValueError:
                raise ValueError(
                    f"{raw!r} is not a level of categorical feature {self.name!r}"
                ) from None
        value = float(raw)
        if self.kind is FeatureKind.ORDINAL and value not in self.levels:
            raise ValueError(f"{raw!r} is not a level of ordinal feature {self.name!r}")
        return value


class Provenance(BaseModel):
    """Tool, version and configuration that produced a file."""

    tool: str
    version: str
    command: str
    config: dict = Field(description="Echo of the run configuration")


class SchemaDocument(BaseModel):
    """JSON contract file consumed by the CLI and the model adapters."""

    format: Literal["permute-attack-schema"] = SCHEMA_FORMAT
    version: int = SCHEMA_VERSION
    target: str
    classes: List[str] = Field(description="Raw target values, index = class id")
    features: List[FeatureSchema]
    provenance: Optional[Provenance] = None


class Dataset(BaseModel):
    """Ordinal-encoded d × m matrix plus class indices."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: List[FeatureSchema]
    rows: np.ndarray
    labels: np.ndarray
    target: str = "target"
    class_names: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shapes(self) -> "Dataset":
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.features):
            raise ValueError("rows must be a d × m matrix matching the schema")
        if self.labels.shape != (self.rows.shape[0],):
            raise ValueError("row count must equal label count")
        for i, feature in enumerate(self.features):
            if feature.is_categorical and len(self.rows):
                column = self.rows[:, i]
                if column.min() < 0 or column.max() >= len(feature.levels):
                    raise ValueError(f"invalid level index in column {feature.name!r}")
        return self

    @property
    def n_rows(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.rows.shape[1])

    @property
    def n_classes(self) -> int:
        return max(len(self.class_names), int(self.labels.max()) + 1 if len(self.labels) else 0)

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.features]

    def feature_index(self, name: str) -> int:
        for i, feature in enumerate(self.features):
            if feature.name == name:
                return i
        raise KeyError(name)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features,
            rows=self.rows[indices],
            labels=self.labels[indices],
            target=self.target,
            class_names=self.class_names,
        )

    def with_schema(self, schema: List[FeatureSchema]) -> "Dataset":
        return Dataset(
            features=schema,
            rows=self.rows,
            labels=self.labels,
            target=self.target,
            class_names=self.class_names,
        )

    def to_document(self) -> SchemaDocument:
        return SchemaDocument(target=self.target, classes=self.class_names, features=self.features)


class DiscretizedView(BaseModel):
    """Bin indices of every training cell, used as conditioning contexts."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: List[FeatureSchema]
    rows: np.ndarray
    bins_per_feature: List[int]

    def bin_instance(self, values: np.ndarray) -> np.ndarray:
        return np.array(
            [feature.bin_of(v) for feature, v in zip(self.features, values)],
            dtype=np.int64,
        )
