"""
Pydantic models for batch experiments and their aggregates.
"""

from typing import Dict, List, Tuple

from pydantic import BaseModel, Field, model_validator


class FeatureDirection(BaseModel):
    """How a feature moved across successful counterfactuals."""

    increases: int = 0
    decreases: int = 0
    transitions: Dict[str, int] = Field(
        default_factory=dict,
        description="Categorical 'old -> new' tallies",
    )


class BatchSummary(BaseModel):
    n_attacked: int = Field(ge=0, description="Results that needed a class change")
    n_already_target: int = Field(default=0, ge=0, description="Results already predicted as the target; not attacked")
    n_success: int = Field(ge=0)
    n_failed: int = Field(default=0, ge=0, description="Instances whose attack raised an error")
    success_rate: float
    mean_changed_features: float = Field(description="Mean L0 over successful attacks (0 if none)")
    histogram: Dict[int, int] = Field(default_factory=dict, description="Changed-feature count -> frequency")
    per_feature_change_count: Dict[str, int] = Field(default_factory=dict)
    per_feature_direction: Dict[str, FeatureDirection] = Field(default_factory=dict)
    direction_by_flip: Dict[str, Dict[str, FeatureDirection]] = Field(
        default_factory=dict,
        description="'<original class>-><target class>' -> per-feature directions",
    )

    @model_validator(mode="after")
    def _consistent(self) -> "BatchSummary":
        if sum(self.histogram.values()) != self.n_success:
            raise ValueError("histogram frequencies must sum to n_success")
        if self.n_attacked and abs(self.success_rate - self.n_success / self.n_attacked) > 1e-12:
            raise ValueError("success_rate must equal n_success / n_attacked")
        return self


class CoOccurrenceGraph(BaseModel):
    nodes: Dict[str, int] = Field(default_factory=dict, description="Feature -> results it changed in")
    edges: Dict[Tuple[str, str], int] = Field(
        default_factory=dict,
        description="Lexicographically ordered pair -> results changing both",
    )

    @model_validator(mode="after")
    def _sound(self) -> "CoOccurrenceGraph":
        for (a, b), weight in self.edges.items():
            if a >= b:
                raise ValueError(f"edge ({a}, {b}) must be ordered and not a self-edge")
            if weight < 1 or weight > min(self.nodes.get(a, 0), self.nodes.get(b, 0)):
                raise ValueError(f"edge ({a}, {b}) weight {weight} is inconsistent with node counts")
        return self

    def weight(self, a: str, b: str) -> int:
        return self.edges.get((min(a, b), max(a, b)), 0)

    def sorted_edges(self) -> List[Tuple[str, str, int]]:
        return [(a, b, w) for (a, b), w in sorted(self.edges.items())]

    def to_edge_list(self) -> str:
        return "".join(f"{a}\t{b}\t{w}\n" for a, b, w in self.sorted_edges())

    def to_dot(self) -> str:
        lines = ["graph cooccurrence {"]
        for name in sorted(self.nodes):
            lines.append(f'  "{name}" [label="{name} ({self.nodes[name]})"];')
        for a, b, w in self.sorted_edges():
            lines.append(f'  "{a}" -- "{b}" [weight={w}, penwidth={w}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_payload(self) -> Dict[str, object]:
        return {
            "nodes": dict(sorted(self.nodes.items())),
            "edges": [{"a": a, "b": b, "weight": w} for a, b, w in self.sorted_edges()],
        }


class RealismReport(BaseModel):
    """Discriminator fail rates: fraction of held-out counterfactuals judged real."""

    seed_a: int
    seed_b: int
    fail_rate: Dict[str, float] = Field(description="'gibbs_off' / 'gibbs_on' -> fail rate")
