"""
Request and response bodies of the HTTP API.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from app.models.attack import RawValue


class AttackRequest(BaseModel):
    instance: Dict[str, RawValue] = Field(description="Raw feature values keyed by column name")
    target_class: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = Field(default=None, ge=0)


class PredictRequest(BaseModel):
    instances: List[Dict[str, RawValue]] = Field(min_length=1)


class PredictResponse(BaseModel):
    probs: List[List[float]]
    classes: List[str]
