"""
Pydantic models for the credit-score reporting layer.
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field


class Rounding(str, Enum):
    FLOOR = "floor"
    NEAREST = "nearest"


class ScorecardConfig(BaseModel):
    """Probability-of-default to score transform parameters."""

    base_score: float = Field(default=600.0, description="Score at the baseline odds")
    pdo: float = Field(default=15.0, gt=0, description="Points to double the odds")
    base_odds: float = Field(default=20.0, gt=0, description="Good:bad odds scoring base_score")
    rounding: Rounding = Field(default=Rounding.FLOOR)


class ScoreRow(BaseModel):
    label: str = Field(description="'original' or 'counterfactual N'")
    pd: float = Field(description="Probability of the default class")
    score: int
    changes: List[str] = Field(default_factory=list, description="'feature: old -> new' entries")


class ScoreReport(BaseModel):
    rows: List[ScoreRow]
    config: ScorecardConfig
    default_class: int = 1

    def render(self) -> str:
        """Aligned plain-text table, original row first."""
        header = ("", "P(default)", "Score", "Changed features")
        lines = [
            (row.label, f"{row.pd:.2f}", str(row.score), "; ".join(row.changes) or "—")
            for row in self.rows
        ]
        widths = [max(len(r[c]) for r in [header, *lines]) for c in range(3)]
        out = []
        for cells in [header, *lines]:
            out.append(
                "  ".join(
                    [cells[0].ljust(widths[0]), cells[1].rjust(widths[1]), cells[2].rjust(widths[2]), cells[3]]
                ).rstrip()
            )
        return "\n".join(out)


class ScoreRequest(BaseModel):
    pds: List[float] = Field(min_length=1)
    scorecard: Optional[ScorecardConfig] = None


class ScoreResponse(BaseModel):
    scores: List[int]
