from datetime import datetime
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator
from pydantic.config import ConfigDict

from .models import RunStatus


class HealthResponse(BaseModel):
    status: str
    project: str


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ==== EXPERIMENT CONFIG ====


class SystemConfig(_Strict):
    id: Literal["double_integrator", "double_integrator_skewed", "vtol"] = "double_integrator"
    overrides: dict[str, Any] = Field(default_factory=dict)


class ControllerConfig(_Strict):
    kind: Literal["receding", "shrinking", "async"] = "receding"
    N: int = Field(5, ge=1)
    sigma_mode: Literal["scalar", "diagonal"] = "scalar"
    # weight c of the alpha reward in the secondary objective
    alpha_weight: float = Field(1.0, ge=0.0)


class SamplerConfig(_Strict):
    w_law: Literal["uniform", "vertex"] = "uniform"
    delta_law: Literal["per_step", "fixed"] = "per_step"
    delta_vertex: bool = False


class SeedAnchor(_Strict):
    slot: int = Field(..., ge=0)
    state: List[float]


class MemoryConfig(_Strict):
    capacity: int = Field(4, ge=2)
    cadence: int = Field(10, ge=1)
    policy: Literal["score", "rotate"] = "score"
    concurrent: bool = False
    seed_anchors: List[SeedAnchor] = Field(default_factory=list)
    fixed_anchors: List[List[float]] = Field(default_factory=list)


class SweepConfig(_Strict):
    parameter: str
    values: List[float]


class RoaConfig(_Strict):
    nx: int = Field(101, ge=2)
    ny: int = Field(101, ge=2)
    mode: Literal["row", "grid"] = "row"
    lb: Optional[List[float]] = None
    ub: Optional[List[float]] = None
    horizons: List[int] = Field(default_factory=lambda: [5])
    sweeps: List[SweepConfig] = Field(default_factory=list)


class ExperimentConfig(_Strict):
    """One experiment file; unknown keys anywhere are rejected."""

    name: str = "experiment"
    kind: Literal["roa", "closedloop", "async"]
    system: SystemConfig = Field(default_factory=SystemConfig)
    controllers: List[ControllerConfig] = Field(default_factory=lambda: [ControllerConfig()])
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    roa: RoaConfig = Field(default_factory=RoaConfig)
    x0: Optional[List[float]] = None
    T: int = Field(25, ge=1)
    runs: int = Field(1, ge=1)
    seed: int = 0
    verify: bool = True
    eta_samples: int = Field(0, ge=0)
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.kind != "roa" and self.x0 is None:
            raise ValueError("closed-loop experiments need an initial state x0")
        if self.kind == "async" and not any(c.kind == "async" for c in self.controllers):
            raise ValueError("async experiments need an async controller")
        return self


# ==== RUN LEDGER ====


class ExperimentRunOut(BaseModel):
    id: int
    name: str
    kind: str
    config_hash: str
    seed: int
    status: RunStatus
    out_dir: str
    summary_json: Optional[dict] = None
    error: Optional[str] = None
    created_at: datetime
    finished_at: Optional[datetime] = None

    model_config = ConfigDict(from_attributes=True)


class PolytopeOut(BaseModel):
    H: List[List[float]]
    h: List[float]


class SystemOut(BaseModel):
    name: str
    params: dict
    A: List[List[float]]
    B: List[List[float]]
    delta_vertices: List[List[List[List[float]]]]
    W: dict
    Wbar: dict
    X: dict
    U: dict
    Q: List[List[float]]
    R: List[List[float]]
    P_f: List[List[float]]
