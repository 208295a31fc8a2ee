"""
Probability-of-default to credit-score transform.

    odds  = (1 - pd) / pd
    score = base_score + pdo / ln 2 * ln(odds / base_odds)

Doubling the odds adds exactly ``pdo`` points before rounding.
"""

import math
from typing import Iterable, List, Optional, Sequence

import numpy as np

from app.errors import DataError
from app.models.attack import AttackResult
from app.models.scorecard import Rounding, ScorecardConfig, ScoreReport, ScoreRow

REPORT_PD_CLIP = 1e-6


def raw_score(pd: float, config: Optional[ScorecardConfig] = None) -> float:
    """Score before rounding."""
    config = config or ScorecardConfig()
    if not 0.0 < pd < 1.0:
        raise DataError(f"probability of default must lie in (0, 1), got {pd}")
    odds = (1.0 - pd) / pd
    return config.base_score + config.pdo / math.log(2) * math.log(odds / config.base_odds)


def pd_to_score(pd: float, config: Optional[ScorecardConfig] = None) -> int:
    config = config or ScorecardConfig()
    score = raw_score(pd, config)
    if config.rounding is Rounding.FLOOR:
        return math.floor(score)
    return int(round(score))


def score_to_pd(score: float, config: Optional[ScorecardConfig] = None) -> float:
    """Inverse of ``raw_score``."""
    config = config or ScorecardConfig()
    odds = config.base_odds * 2.0 ** ((score - config.base_score) / config.pdo)
    return 1.0 / (1.0 + odds)


def pds_to_scores(pds: Iterable[float], config: Optional[ScorecardConfig] = None) -> List[int]:
    return [pd_to_score(pd, config) for pd in pds]


def _reportable(pd: float) -> float:
    # Forest votes can be exactly 0 or 1, which have no finite score.
    return float(np.clip(pd, REPORT_PD_CLIP, 1.0 - REPORT_PD_CLIP))


def _change_strings(result: AttackResult) -> List[str]:
    return [f"{c.name}: {c.old} -> {c.new}" for c in result.changed_features]


def score_report(
    original: Sequence[float],
    counterfactuals: Sequence[AttackResult],
    config: Optional[ScorecardConfig] = None,
    default_class: int = 1,
) -> ScoreReport:
    """
    Score the original prediction and each counterfactual.

    ``original`` is the original probability vector; the default
    probability is read from ``default_class``.
    """
    config = config or ScorecardConfig()
    if not counterfactuals:
        raise DataError("score_report needs at least one counterfactual")
    original = np.asarray(original, dtype=np.float64)
    pd = _reportable(original[default_class])
    rows = [ScoreRow(label="original", pd=pd, score=pd_to_score(pd, config))]
    for n, result in enumerate(counterfactuals, start=1):
        pd = _reportable(result.final_probs[default_class])
        rows.append(
            ScoreRow(
                label=f"counterfactual {n}",
                pd=pd,
                score=pd_to_score(pd, config),
                changes=_change_strings(result),
            )
        )
    return ScoreReport(rows=rows, config=config, default_class=default_class)
