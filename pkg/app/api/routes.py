"""
API routes for scoring, prediction and counterfactual search.
"""

import logging
from typing import Annotated

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, Request, status

from app.config import RunConfig
from app.errors import BackendError, PermuteAttackError
from app.models.api import AttackRequest, PredictRequest, PredictResponse
from app.models.attack import AttackResult
from app.models.schema import SchemaDocument
from app.models.scorecard import ScoreRequest, ScoreResponse
from app.services.artifacts import RunContext
from app.services.ga_core import PermuteAttack
from app.services.scorecard import pds_to_scores
from app.services.tabular import encode_instance

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["counterfactuals"])


def get_app_settings(request: Request) -> RunConfig:
    return request.app.state.settings


def get_run(request: Request) -> RunContext:
    """Dependency that provides the run loaded at startup."""
    context = getattr(request.app.state, "run", None)
    if context is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No trained run is loaded; run 'train' and restart the service.",
        )
    return context


def _http_error(exc: Exception) -> HTTPException:
    if isinstance(exc, BackendError):
        logger.error("Model backend error: %s", exc)
        return HTTPException(status_code=status.HTTP_502_BAD_GATEWAY, detail=f"Model backend error: {exc}")
    if isinstance(exc, (PermuteAttackError, ValueError)):
        return HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(exc))
    logger.exception("Unexpected error")
    return HTTPException(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        detail=f"An unexpected error occurred: {type(exc).__name__}: {exc}",
    )


@router.post(
    "/score",
    response_model=ScoreResponse,
    summary="Convert probabilities of default to credit scores",
)
async def score(
    request: ScoreRequest,
    settings: Annotated[RunConfig, Depends(get_app_settings)],
) -> ScoreResponse:
    try:
        return ScoreResponse(scores=pds_to_scores(request.pds, request.scorecard or settings.scorecard))
    except ValueError as e:
        raise _http_error(e) from e


@router.get("/schema", response_model=SchemaDocument, summary="Feature schema of the loaded run")
async def schema(context: Annotated[RunContext, Depends(get_run)]) -> SchemaDocument:
    return context.dataset.to_document()


@router.post("/predict", response_model=PredictResponse, summary="Class probabilities for raw instances")
def predict(
    request: PredictRequest,
    context: Annotated[RunContext, Depends(get_run)],
) -> PredictResponse:
    try:
        batch = np.vstack([encode_instance(raw, context.dataset.features) for raw in request.instances])
        with context.lock:
            probs = context.model.predict_proba(batch)
    except Exception as e:
        raise _http_error(e) from e
    return PredictResponse(probs=probs.tolist(), classes=context.dataset.class_names)


@router.post(
    "/attack",
    response_model=AttackResult,
    summary="Search for a counterfactual",
    description="Run the permutation genetic attack on one raw instance.",
)
def attack(
    request: AttackRequest,
    context: Annotated[RunContext, Depends(get_run)],
) -> AttackResult:
    """
    Find a counterfactual for the instance.

    A result with ``success`` false is still a 200 response; the search
    simply did not converge within the configured generations.
    """
    logger.info("Received attack request for %d feature(s)", len(request.instance))
    try:
        x = encode_instance(request.instance, context.dataset.features)
        runner = PermuteAttack(context.model, context.train, context.config.attack)
        with context.lock:
            return runner.run(x, request.target_class, seed=request.seed)
    except Exception as e:
        raise _http_error(e) from e
