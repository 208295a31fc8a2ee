"""
Pydantic models for the built-in reference random forest and its
versioned JSON document.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, Field

from app.models.schema import Provenance

FOREST_FORMAT = "permute-attack-forest"
FOREST_VERSION = 1


class ForestParams(BaseModel):
    """Hyperparameters of the reference forest."""

    n_trees: int = Field(default=10, gt=0, description="Number of bootstrap trees")
    max_depth: int = Field(default=12, gt=0, description="Maximum tree depth")
    min_leaf: int = Field(default=1, gt=0, description="Minimum samples per leaf")
    max_features: Optional[int] = Field(
        default=None,
        gt=0,
        description="Candidate features per split; defaults to sqrt(feature_width)",
    )
    seed: int = Field(default=0, description="Seed for bootstrap and feature sampling")


class TreeDocument(BaseModel):
    """Flat node arrays of one tree. Leaves have ``feature == -1``."""

    feature: List[int]
    threshold: List[float]
    left: List[int]
    right: List[int]
    counts: List[List[float]] = Field(description="Class counts per node")


class ForestDocument(BaseModel):
    format: Literal["permute-attack-forest"] = FOREST_FORMAT
    version: int = FOREST_VERSION
    params: ForestParams
    feature_width: int
    n_classes: int
    trees: List[TreeDocument]
    provenance: Optional[Provenance] = None
