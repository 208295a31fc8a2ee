"""
PermuteAttack API - FastAPI application entry point.

Serves credit scores, predictions and counterfactual explanations for
the run stored in the configured output directory.
"""

import logging
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api import router
from app.config import RunConfig, get_settings
from app.errors import PermuteAttackError
from app.services.artifacts import open_run

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Load the trained run at startup and release the model at shutdown.

    Scoring works without a run; the other routes answer 503 until one
    has been trained.
    """
    settings = app.state.settings
    logger.info("Starting %s v%s", settings.app_name, settings.app_version)
    app.state.run = None
    try:
        app.state.run = open_run(settings)
        logger.info("Loaded run from %s", settings.output_dir)
    except PermuteAttackError as exc:
        logger.warning("No run loaded: %s", exc)
    yield
    if app.state.run is not None:
        app.state.run.close()
    logger.info("Shutting down %s", settings.app_name)


def create_app(settings: Optional[RunConfig] = None) -> FastAPI:
    """
    Create and configure the FastAPI application.

    Args:
        settings: run configuration; defaults to ``get_settings()``.
    """
    settings = settings or get_settings()

    app = FastAPI(
        title=settings.app_name,
        version=settings.app_version,
        description="Counterfactual explanations for tabular classifiers by permutation genetic search.",
        lifespan=lifespan,
    )
    app.state.settings = settings

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    app.include_router(router)

    @app.get("/health", tags=["health"])
    async def health_check() -> dict:
        """Basic status for monitoring and load balancers."""
        return {
            "status": "healthy",
            "app": settings.app_name,
            "version": settings.app_version,
            "run_loaded": getattr(app.state, "run", None) is not None,
        }

    @app.get("/", tags=["root"])
    async def root() -> dict:
        return {
            "name": settings.app_name,
            "version": settings.app_version,
            "docs": "/docs",
            "health": "/health",
        }

    return app


app = create_app()
