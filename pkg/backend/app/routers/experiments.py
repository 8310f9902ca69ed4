from typing import List

from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy import select
from sqlalchemy.orm import Session

from .. import models, schemas
from ..cli import run_experiment
from ..deps import get_db_session
from ..errors import ConfigInvalid, SltmpcError
from ..sysmodel import SYSTEMS, build_system

router = APIRouter(
    prefix="/experiments",
    tags=["experiments"],
)

systems_router = APIRouter(
    prefix="/systems",
    tags=["systems"],
)


@router.post(
    "",
    response_model=schemas.ExperimentRunOut,
    status_code=status.HTTP_201_CREATED,
)
def create_experiment(
    config_in: schemas.ExperimentConfig,
    db: Session = Depends(get_db_session),
) -> schemas.ExperimentRunOut:
    """
    Run an experiment synchronously through the CLI pipeline.

    - The body is validated as an ExperimentConfig (unknown keys give 422).
    - Artifacts go to `out_dir` or OUTPUT_DIR/<name>.
    - A failed audit is reported through the run status, not an error code.
    """
    try:
        run = run_experiment(config_in, session=db, raise_on_audit=False)
    except ConfigInvalid as exc:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(exc),
        )
    except SltmpcError as exc:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"{type(exc).__name__}: {exc}",
        )

    return schemas.ExperimentRunOut.model_validate(run)


@router.get("", response_model=List[schemas.ExperimentRunOut])
def list_experiments(
    db: Session = Depends(get_db_session),
) -> List[schemas.ExperimentRunOut]:
    """
    List all recorded runs, newest first.
    """
    stmt = select(models.ExperimentRun).order_by(models.ExperimentRun.id.desc())
    runs = db.execute(stmt).scalars().all()
    return [schemas.ExperimentRunOut.model_validate(r) for r in runs]


@router.get("/{run_id}", response_model=schemas.ExperimentRunOut)
def get_experiment(
    run_id: int,
    db: Session = Depends(get_db_session),
) -> schemas.ExperimentRunOut:
    run = db.get(models.ExperimentRun, run_id)

    if run is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Experiment run not found.",
        )

    return schemas.ExperimentRunOut.model_validate(run)


@systems_router.get("/{system_id}", response_model=schemas.SystemOut)
def get_system(system_id: str) -> schemas.SystemOut:
    """
    Benchmark data with default parameters, polytopes as H-representation records.
    """
    if system_id not in SYSTEMS:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Unknown system '{system_id}'.",
        )

    sys, cost = build_system(system_id)
    return schemas.SystemOut(
        **sys.to_record(),
        Q=cost.Q.tolist(),
        R=cost.R.tolist(),
        P_f=cost.P_f.tolist(),
    )
