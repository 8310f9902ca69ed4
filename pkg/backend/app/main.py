import logging

from fastapi import FastAPI

from .config import settings
from .schemas import HealthResponse
from .database import init_db
from .routers import experiments


def create_app() -> FastAPI:
    logging.basicConfig(level=settings.LOG_LEVEL.upper())
    # Invariant-set cache and run ledger tables
    init_db()

    app = FastAPI(
        title=settings.PROJECT_NAME,
        version="0.1.0",
        description="System level tube MPC experiments: region of attraction, closed-loop and asynchronous runs.",
    )

    @app.get("/health", response_model=HealthResponse, tags=["health"])
    def health_check() -> HealthResponse:
        """
        Simple health check to verify that the API is running.
        """
        return HealthResponse(status="ok", project=settings.PROJECT_NAME)

    app.include_router(experiments.router, prefix=settings.API_V1_PREFIX)
    app.include_router(experiments.systems_router, prefix=settings.API_V1_PREFIX)

    return app


app = create_app()
