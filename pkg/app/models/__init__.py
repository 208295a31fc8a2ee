from .attack import AttackConfig, AttackResult, ChangedFeature, GenerationTrace
from .schema import Dataset, FeatureKind, FeatureSchema, SchemaDocument
from .scorecard import ScorecardConfig, ScoreReport

__all__ = [
    "AttackConfig",
    "AttackResult",
    "ChangedFeature",
    "GenerationTrace",
    "Dataset",
    "FeatureKind",
    "FeatureSchema",
    "SchemaDocument",
    "ScorecardConfig",
    "ScoreReport",
]
