from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    PROJECT_NAME: str = "SLTMPC Toolkit"
    API_V1_PREFIX: str = "/api/v1"

    # Invariant-set cache and run ledger; SQLite by default
    SQLALCHEMY_DATABASE_URI: str = "sqlite:///./sltmpc.db"

    # Convex solver used by every MPC template (CLARABEL | OSQP | SCS)
    SOLVER: str = "CLARABEL"
    SOLVER_EPS: float = 1e-8
    SOLVER_MAX_ITER: int = 20000

    # Post-solve verification tolerances: memberships, then equality residuals
    CHECK_TOL: float = 1e-6
    EQ_TOL: float = 1e-7
    # Lower bound on every filter scaling sigma_i
    SIGMA_MIN: float = 1e-9
    # Support-term encoding for decision-variable matrices: auto | vertex | dual
    SUPPORT_FORM: str = "auto"

    LQR_MAX_ITER: int = 10000
    RPI_MAX_ITER: int = 500
    RCI_MAX_ITER: int = 200

    OUTPUT_DIR: str = "results"
    LOG_LEVEL: str = "INFO"

    class Config:
        env_file = ".env"


settings = Settings()
