"""
Pydantic models for the permutation genetic attack: hyperparameters,
population members, per-generation trace and the persisted result.
"""

from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

RawValue = Union[int, float, str]


class AttackConfig(BaseModel):
    """Hyperparameters of the attack plus constraint budgets and mutability."""

    rho0: float = Field(default=0.6, ge=0, description="Penalty weight on changed-feature count")
    rho1: float = Field(default=0.2, ge=0, description="Penalty weight on normalized L2 distance")
    decay: float = Field(default=0.96, gt=0, lt=1, description="Penalty relaxation factor")
    population_size: int = Field(default=35, ge=2)
    mating_pool_size: int = Field(default=15, ge=2)
    generations: int = Field(default=100, ge=1)
    temperature: float = Field(default=0.5, gt=0, description="Softmax selection temperature")
    target_class: Optional[int] = Field(
        default=None,
        ge=0,
        description="Class to reach; None flips a binary prediction",
    )
    delta0_max: Optional[float] = Field(default=None, ge=0, description="Changed-feature budget")
    delta2_max: Optional[float] = Field(default=None, ge=0, description="L2 budget")
    mutable_features: Optional[List[str]] = Field(
        default=None,
        description="Features the attack may change; None uses the schema flags",
    )
    gibbs: bool = Field(default=False, description="Conditional (Gibbs) sampling on/off")
    gibbs_iters: int = Field(default=5, ge=1)
    n_bins: int = Field(default=5, ge=2, description="Quantile bins for conditioning contexts")
    mutation_probability: float = Field(default=0.3, ge=0, le=1)
    mutation_range: float = Field(
        default=1.0,
        description="Kept for completeness; permutation mutation has no range",
    )
    seed: int = Field(default=0, ge=0)

    @field_validator("gibbs", mode="before")
    @classmethod
    def _on_off(cls, value: Any) -> Any:
        if isinstance(value, str) and value.lower() in ("on", "off"):
            return value.lower() == "on"
        return value

    @model_validator(mode="after")
    def _pool_fits(self) -> "AttackConfig":
        if self.mating_pool_size > self.population_size:
            raise ValueError("mating_pool_size must not exceed population_size")
        return self


class Candidate(BaseModel):
    """One population member."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    instance: np.ndarray
    fitness: float
    probs: np.ndarray
    changed_mask: np.ndarray

    @model_validator(mode="after")
    def _finite(self) -> "Candidate":
        if not np.isfinite(self.fitness):
            raise ValueError("fitness must be finite")
        return self


class GenerationTrace(BaseModel):
    generation: int
    best_fitness: float = Field(description="Elite fitness under this generation's penalties")
    best_target_probability: float = Field(description="Highest target-class probability in the population")
    elite_target_probability: float
    elite_changes: int
    rho0: float
    rho1: float


class ChangedFeature(BaseModel):
    index: int
    name: str
    old: RawValue
    new: RawValue


class AttackResult(BaseModel):
    """Outcome of one attack; the unit of persistence and analysis."""

    success: bool
    already_target: bool = Field(default=False, description="Original prediction was the target")
    instance_id: Optional[int] = None
    target_class: int = -1
    original_class: int = -1
    original_probs: List[float] = Field(default_factory=list)
    final_probs: List[float] = Field(default_factory=list)
    counterfactual: Optional[List[float]] = Field(
        default=None, description="Ordinal-side values of the counterfactual"
    )
    counterfactual_raw: Optional[Dict[str, RawValue]] = None
    changed_features: List[ChangedFeature] = Field(default_factory=list)
    l0: int = 0
    l2: float = 0.0
    within_budget: Optional[bool] = Field(
        default=None, description="Whether delta0_max / delta2_max hold; None when unset"
    )
    generations_used: int = 0
    trace: List[GenerationTrace] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0)
    config: Optional[AttackConfig] = None
    error: Optional[str] = None

    @model_validator(mode="after")
    def _sound(self) -> "AttackResult":
        if self.success:
            if int(np.argmax(self.final_probs)) != self.target_class:
                raise ValueError("successful result must predict the target class")
            if not self.already_target and not self.changed_features:
                raise ValueError("successful result must change at least one feature")
        return self

    @property
    def changed_names(self) -> List[str]:
        return [c.name for c in self.changed_features]
