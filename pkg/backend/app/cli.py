"""
Experiment runner.

    python -m app.cli roa        --config configs/roa_eps_a.toml [--jobs 4]
    python -m app.cli closedloop --config configs/di_closedloop.toml
    python -m app.cli async      --config configs/vtol_async.toml
    python -m app.cli selftest
    python -m app.cli schema

Every data-producing command writes its files plus a ``manifest.json``
(config hash, package versions, seeds, sha256 of each file) and records
the run in the database. Exit codes: 0 success, 2 invalid config,
3 audit failure, 1 any other error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError
from sqlalchemy.orm import Session

from . import models
from .config import settings
from .controllers import AsyncController, RecedingController, ShrinkingController
from .database import SessionLocal, init_db
from .errors import AuditFailed, ConfigInvalid, SltmpcError
from .invariant import TerminalIngredients, rci_set, terminal_ingredients
from .polytope import Polytope
from .schemas import ControllerConfig, ExperimentConfig
from .selftest import run_selftest
from .sim import (
    GridSpec,
    RunRecord,
    SamplerSpec,
    closed_loop,
    mc_stats,
    roa_estimate,
    timing_report,
    write_jsonl,
    write_summary_csv,
    write_timing_csv,
)
from .sltmpc import MPCTemplate, build_generic, build_receding
from .sysmodel import CostSpec, UncertainLTI, build_system

logger = logging.getLogger("app.cli")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2, 3
VERSIONED_PACKAGES = ("numpy", "scipy", "cvxpy", "clarabel", "pydantic", "pydantic-settings", "SQLAlchemy", "fastapi")


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ==== CONFIG ====


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"Cannot read config {path}: {exc}") from exc
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigInvalid(str(exc)) from exc


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _system(system_id: str, overrides: dict) -> tuple[UncertainLTI, CostSpec]:
    try:
        return build_system(system_id, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"System '{system_id}' rejects overrides {overrides}: {exc}") from exc


# ==== PIPELINE PIECES ====


def make_template(
    sys: UncertainLTI,
    cost: CostSpec,
    kind: str,
    N: int,
    sigma_mode: str,
    term: TerminalIngredients,
    S_f: Polytope,
) -> MPCTemplate:
    """Template whose feasible set defines the region of attraction of a controller kind."""
    if kind == "receding":
        return build_receding(sys, cost, N, term, sigma_mode)
    if kind == "shrinking":
        return build_generic(sys, cost, N, S_f, sigma_mode)
    raise ConfigInvalid(f"No region of attraction is defined for '{kind}' controllers.")


def make_controller(
    cc: ControllerConfig,
    cfg: ExperimentConfig,
    sys: UncertainLTI,
    cost: CostSpec,
    term: TerminalIngredients,
    S_f: Optional[Polytope] = None,
):
    if cc.kind == "receding":
        return RecedingController(sys, cost, cc.N, term, cc.sigma_mode, verify=cfg.verify, eta_samples=cfg.eta_samples)
    if cc.kind == "shrinking":
        if S_f is None:
            S_f = rci_set(sys)
        return ShrinkingController(sys, cost, cc.N, S_f, cc.sigma_mode)
    mem = cfg.memory
    return AsyncController(
        sys,
        cost,
        cc.N,
        term,
        capacity=mem.capacity,
        cadence=mem.cadence,
        policy=mem.policy,
        sigma_mode=cc.sigma_mode,
        alpha_weight=cc.alpha_weight,
        seed_anchors=[(a.slot, a.state) for a in mem.seed_anchors],
        fixed_anchors=mem.fixed_anchors,
        concurrent=mem.concurrent,
        verify=cfg.verify,
    )


def _label(cc: ControllerConfig) -> str:
    return f"{cc.kind}_N{cc.N}_{cc.sigma_mode}"


def _simulate_chunk(cfg_json: str, controller_index: int, run_ids: Sequence[int], memory_dir: Optional[str]) -> list[RunRecord]:
    """Worker body: rebuild the problem from the config and run a slice of Monte-Carlo runs."""
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    cc = cfg.controllers[controller_index]
    sys, cost = _system(cfg.system.id, cfg.system.overrides)
    term = terminal_ingredients(sys, cost)
    controller = make_controller(cc, cfg, sys, cost, term)
    sampler = SamplerSpec(**cfg.sampler.model_dump())
    records = []
    try:
        for r in run_ids:
            record = closed_loop(controller, sys, cost, cfg.T, cfg.x0, sampler, seed=cfg.seed + r, run_id=r)
            records.append(record)
            if r == 0 and memory_dir and isinstance(controller, AsyncController):
                controller.memory.dump(memory_dir)
    finally:
        if isinstance(controller, AsyncController):
            controller.close()
    return records


def _run_controller(cfg: ExperimentConfig, index: int, jobs: int, memory_dir: Optional[Path]) -> list[RunRecord]:
    run_ids = list(range(cfg.runs))
    cfg_json = cfg.model_dump_json()
    mem = str(memory_dir) if memory_dir else None
    if jobs <= 1 or cfg.runs == 1:
        return _simulate_chunk(cfg_json, index, run_ids, mem)
    chunks = [[int(i) for i in c] for c in np.array_split(run_ids, min(jobs, cfg.runs))]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_simulate_chunk, [cfg_json] * len(chunks), [index] * len(chunks), chunks, [mem] * len(chunks))
        records = [r for part in parts for r in part]
    return sorted(records, key=lambda r: r.run_id)


def _audit(stats: dict[str, dict]) -> list[str]:
    problems = []
    for label, s in stats.items():
        for key in ("violations", "aborted_runs", "wbar_outside", "decrease_violations", "eta_failures"):
            if s.get(key):
                problems.append(f"{label}: {key}={s[key]}")
        if s.get("max_candidate_violation", 0.0) > settings.CHECK_TOL:
            problems.append(f"{label}: candidate violation {s['max_candidate_violation']:.3e}")
    return problems


# ==== COMMANDS ====


def cmd_closedloop(cfg: ExperimentConfig, out: Path, jobs: int = 1, recompute: bool = False, session: Session | None = None) -> dict:
    sys, cost = _system(cfg.system.id, cfg.system.overrides)
    # populate the invariant cache once before any worker reads it
    terminal_ingredients(sys, cost, recompute=recompute, session=session)
    if any(c.kind == "shrinking" for c in cfg.controllers):
        rci_set(sys, recompute=recompute, session=session)
    capacity = cfg.memory.capacity if any(c.kind == "async" for c in cfg.controllers) else 0

    stats: dict[str, dict] = {}
    everything: list[RunRecord] = []
    for index, cc in enumerate(cfg.controllers):
        label = _label(cc)
        memory_dir = out / f"memory_{label}" if cc.kind == "async" else None
        records = _run_controller(cfg, index, jobs, memory_dir)
        everything += records
        write_jsonl(records, out / f"runs_{label}.jsonl")
        write_summary_csv(records, out / f"summary_{label}.csv", sys.n, sys.m, capacity)
        stats[label] = mc_stats(records)
        if cc.kind == "async":
            write_lambda_trace(records, out / f"lambda_{label}.csv", capacity)
        logger.info("%s: mean cost %s over %d runs", label, stats[label]["cost_mean"], len(records))
    write_timing_csv(timing_report(everything), out / "timing.csv")
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return {"stats": stats, "audit": _audit(stats)}


def cmd_async(cfg: ExperimentConfig, out: Path, jobs: int = 1, recompute: bool = False, session: Session | None = None) -> dict:
    if cfg.kind != "async":
        raise ConfigInvalid("The async command needs a config of kind 'async'.")
    return cmd_closedloop(cfg, out, jobs, recompute, session)


def write_lambda_trace(records: Sequence[RunRecord], path: Path, M: int) -> Path:
    """Fusion weights per step plus the slot written by a secondary update, if any."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "step", *[f"lam{k}" for k in range(M)], "update_slot", "event"])
        for r in records:
            for k, lam in enumerate(r.lam):
                slot = r.infos[k].get("memory_update_slot")
                writer.writerow([r.run_id, k, *(lam or [""] * M), "" if slot is None else slot, r.events[k] or ""])
    return path


def cmd_roa(cfg: ExperimentConfig, out: Path, jobs: int = 1, recompute: bool = False, session: Session | None = None) -> dict:
    roa = cfg.roa
    rows: list[dict] = []
    masks: dict[str, dict] = {}
    for sweep in roa.sweeps or [None]:
        for value in sweep.values if sweep else [None]:
            overrides = dict(cfg.system.overrides)
            if sweep is not None:
                overrides[sweep.parameter] = value
            sys, cost = _system(cfg.system.id, overrides)
            term = terminal_ingredients(sys, cost, recompute=recompute, session=session)
            denom = rci_set(sys, recompute=recompute, session=session)
            grid = GridSpec(roa.nx, roa.ny, roa.lb, roa.ub)
            for cc in cfg.controllers:
                for N in roa.horizons:
                    factory = partial(make_template, sys, cost, cc.kind, N, cc.sigma_mode, term, denom)
                    result = roa_estimate(factory, grid, denom, sys.X.bounding_box(), roa.mode, jobs)
                    row = {
                        "parameter": sweep.parameter if sweep else "",
                        "value": value if sweep else "",
                        "controller": cc.kind,
                        "sigma_mode": cc.sigma_mode,
                        "N": N,
                        "fraction": result.fraction,
                    }
                    rows.append(row)
                    masks[f"{row['parameter']}={row['value']}|{cc.kind}|{cc.sigma_mode}|N={N}"] = result.to_record()
    with (out / "roa_table.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["parameter", "value", "controller", "sigma_mode", "N", "fraction"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "roa_masks.json").write_text(json.dumps(masks, sort_keys=True))
    return {"roa": rows, "audit": []}


COMMANDS = {"roa": cmd_roa, "closedloop": cmd_closedloop, "async": cmd_async}


# ==== ARTIFACTS ====


def package_versions() -> dict[str, Optional[str]]:
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, command: str) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "name": cfg.name,
        "config_hash": config_hash(cfg),
        "config": cfg.model_dump(mode="json"),
        "seeds": [cfg.seed + r for r in range(cfg.runs)],
        "versions": package_versions(),
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


PLOT_SCRIPTS = {
    "roa": '''import json
import matplotlib.pyplot as plt
import numpy as np

masks = json.load(open("roa_masks.json"))
for key, rec in masks.items():
    xs, ys = np.array(rec["xs"]), np.array(rec["ys"])
    inside, mask = np.array(rec["inside"]), np.array(rec["mask"])
    plt.figure()
    plt.contourf(xs, ys, inside, levels=[0.5, 1.5], alpha=0.2)
    plt.contourf(xs, ys, mask * inside, levels=[0.5, 1.5], alpha=0.6)
    plt.title(f"{key}: {rec['fraction']:.1%}")
    plt.savefig(key.replace("|", "_").replace("=", "") + ".png", dpi=120)
''',
    "closedloop": '''import glob
import json
import matplotlib.pyplot as plt
import numpy as np

for name in glob.glob("runs_*.jsonl"):
    plt.figure()
    for line in open(name):
        rec = json.loads(line)
        x = np.array(rec["states"])
        plt.plot(x[:, 0], x[:, 1], lw=0.5)
    plt.title(name)
    plt.savefig(name.replace(".jsonl", ".png"), dpi=120)
''',
    "async": '''import csv
import glob
import matplotlib.pyplot as plt

for name in glob.glob("lambda_*.csv"):
    rows = [r for r in csv.DictReader(open(name)) if r["run_id"] == "0"]
    lams = [k for k in rows[0] if k.startswith("lam")]
    plt.figure()
    for k in lams:
        plt.plot([float(r[k] or 0) for r in rows], label=k)
    plt.legend()
    plt.savefig(name.replace(".csv", ".png"), dpi=120)
''',
}


def write_plot_script(out: Path, command: str) -> Path:
    path = out / f"plot_{command}.py"
    path.write_text(PLOT_SCRIPTS[command])
    return path


# ==== RUN LEDGER ====


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    recompute: bool = False,
    plots: bool = False,
    session: Session | None = None,
    raise_on_audit: bool = True,
) -> models.ExperimentRun:
    """Run the pipeline for `cfg.kind`, write the artifacts and store the run record.

    Raises AuditFailed after the artifacts are written when any audit fails,
    unless `raise_on_audit` is off.
    """
    out = Path(out_dir or cfg.out_dir or Path(settings.OUTPUT_DIR) / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    own_session = session is None
    session = session or SessionLocal()
    run = models.ExperimentRun(
        name=cfg.name,
        kind=cfg.kind,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        status=models.RunStatus.RUNNING,
        out_dir=str(out),
        config_json=cfg.model_dump(mode="json"),
    )
    session.add(run)
    session.commit()
    try:
        summary = COMMANDS[cfg.kind](cfg, out, jobs, recompute, session)
        if plots:
            write_plot_script(out, cfg.kind)
        write_manifest(out, cfg, cfg.kind)
        run.summary_json = json.loads(json.dumps(summary, default=float))
        run.status = models.RunStatus.AUDIT_FAILED if summary["audit"] else models.RunStatus.SUCCEEDED
        if summary["audit"]:
            run.error = "; ".join(summary["audit"])[:2048]
    except Exception as exc:
        run.status = models.RunStatus.FAILED
        run.error = str(exc)[:2048]
        raise
    finally:
        run.finished_at = models.utcnow()
        session.commit()
        session.refresh(run)
        if own_session:
            session.close()
    if raise_on_audit and run.status is models.RunStatus.AUDIT_FAILED:
        raise AuditFailed(run.error or "audit failed")
    return run


# ==== ENTRY POINT ====


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment TOML file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--recompute-invariants", action="store_true", help="bypass and refresh the invariant-set cache")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for runs and grid rows")
    common.add_argument("--plots", action="store_true", help="also write a matplotlib script next to the data")

    parser = argparse.ArgumentParser(prog="sltmpc", description="System level tube MPC experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("roa", parents=[common], help="region-of-attraction sweep")
    sub.add_parser("closedloop", parents=[common], help="Monte-Carlo closed-loop comparison")
    sub.add_parser("async", parents=[common], help="asynchronous primary/secondary experiment")
    sub.add_parser("selftest", help="run the quick property suite")
    sub.add_parser("schema", help="print the experiment config JSON schema")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()

    if args.command == "schema":
        print(json.dumps(ExperimentConfig.model_json_schema(), indent=2))
        return EXIT_OK
    if args.command == "selftest":
        results = run_selftest()
        failed = [r.name for r in results if not r.passed]
        print(f"selftest: {len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
        return EXIT_AUDIT if failed else EXIT_OK

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        if cfg.kind != args.command:
            raise ConfigInvalid(f"Config of kind '{cfg.kind}' cannot run under '{args.command}'.")
        init_db()
        run = run_experiment(cfg, args.out, args.jobs, args.recompute_invariants, args.plots)
    except ConfigInvalid as exc:
        logger.error("Invalid config: %s", exc)
        return EXIT_CONFIG
    except AuditFailed as exc:
        logger.error("Audit failed: %s", exc)
        return EXIT_AUDIT
    except SltmpcError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    logger.info("Run %d finished: %s", run.id, run.out_dir)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
