"""HTTP service: fit jobs, census forecasts, what-if deltas, schedule runs.

Design rules the endpoints follow:

* fitted models are immutable snapshots in an in-memory table; queries
  against the same model id always return the same answer;
* anything slow (fitting, the schedule search) runs as a job on a small
  worker pool and is polled through ``GET /jobs/{id}``;
* the job table is the only shared mutable state and every update happens
  under one lock;
* schema problems come back as 400 with the offending field path, unknown
  ids as 404, and reusing a live job id as 409.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import census as cs
from . import scheduling as sch
from .analytics import interval_transition, resolve_horizon
from .config import DEFAULT_CONFIG, PipelineConfig
from .dataio import load_trajectories, model_document
from .em import EmConfig, encode_dataset, fit
from .errors import InfeasibleError, WardflowError

__all__ = ["create_app", "serve"]


@dataclass
class _Job:
    job_id: str
    kind: str
    status: str = "running"            # running | done | failed
    result: dict | None = None
    error: str | None = None

    def view(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "status": self.status,
            "result": self.result,
            "error": self.error,
        }


@dataclass
class _State:
    config: PipelineConfig
    models: dict = field(default_factory=dict)
    jobs: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    pool: ThreadPoolExecutor = field(
        default_factory=lambda: ThreadPoolExecutor(max_workers=2)
    )


class PlanBody(BaseModel):
    elective: list[list[float]]
    emergency_rates: list[list[float]]


class FitRequest(BaseModel):
    dataset: str
    n_clusters: int
    max_iter: int = 50
    restarts: int = 5
    epsilon: float | None = None
    seed: int = 0
    count_mode: str = "soft"
    shared_holding: bool = False
    job_id: str | None = None


class ForecastRequest(BaseModel):
    model_id: str
    plan: PlanBody
    capacities: list[float] | None = None


class WhatifRequest(BaseModel):
    model_id: str
    baseline: PlanBody
    edited: PlanBody
    capacities: list[float] | None = None


class OptimizeRequest(BaseModel):
    model_id: str
    capacities: list[float]
    blocking_limit: float
    offunit_limits: list[float]
    baseline: list[list[float]]
    daily_caps: list[list[float]]
    rewards: list[float]
    emergency_rates: list[list[float]]
    cancellation_share: list[float] | None = None
    time_limit: float | None = None
    job_id: str | None = None


def _http_error(status: int, detail) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": detail})


def create_app(config: PipelineConfig = DEFAULT_CONFIG) -> FastAPI:
    """Fresh service instance with its own model/job tables."""
    app = FastAPI(title="wardflow", docs_url=None, redoc_url=None)
    state = _State(config=config)
    app.state.wardflow = state

    @app.exception_handler(RequestValidationError)
    async def on_bad_request(request: Request, exc: RequestValidationError):
        paths = [
            {
                "field": ".".join(str(p) for p in err["loc"] if p != "body"),
                "message": err["msg"],
            }
            for err in exc.errors()
        ]
        return _http_error(400, paths)

    @app.exception_handler(WardflowError)
    async def on_domain_error(request: Request, exc: WardflowError):
        return _http_error(400, str(exc))

    def get_model(model_id: str) -> dict:
        with state.lock:
            entry = state.models.get(model_id)
        if entry is None:
            raise _NotFound(f"no model {model_id!r}")
        return entry

    def occupancies_for(model_id: str) -> list[cs.CyclicOccupancy]:
        entry = get_model(model_id)
        with state.lock:
            cached = entry.get("occ")
        if cached is not None:
            return cached
        params = entry["params"]
        cfg = state.config
        occ = []
        for k in range(params.n_clusters):
            d_max = resolve_horizon(
                params, k, tail_tol=cfg.horizon_tail_tol, cap=cfg.horizon_cap
            )
            iv = interval_transition(params, k, d_max=d_max)
            occ.append(cs.cyclic_occupancy(params, k, tol=cfg.eps_tail, interval=iv))
        with state.lock:
            entry.setdefault("occ", occ)
            return entry["occ"]

    def start_job(kind: str, job_id: str | None, work) -> dict:
        jid = job_id or uuid.uuid4().hex[:12]
        with state.lock:
            if jid in state.jobs:
                raise _Conflict(f"job {jid!r} already exists")
            job = _Job(job_id=jid, kind=kind)
            state.jobs[jid] = job

        def run():
            try:
                result = work()
            except InfeasibleError as exc:
                result = {
                    "infeasible": True,
                    "binding_family": exc.binding_family,
                    "message": str(exc),
                }
                with state.lock:
                    job.status, job.result = "done", result
                return
            except WardflowError as exc:
                with state.lock:
                    job.status, job.error = "failed", str(exc)
                return
            except Exception as exc:  # a stuck "running" job is worse
                with state.lock:
                    job.status, job.error = "failed", f"internal: {exc!r}"
                return
            with state.lock:
                job.status, job.result = "done", result

        state.pool.submit(run)
        return {"job_id": jid}

    @app.post("/fit")
    async def post_fit(req: FitRequest):
        em_config = EmConfig(
            n_clusters=req.n_clusters,
            max_iter=req.max_iter,
            restarts=req.restarts,
            epsilon=state.config.em_epsilon if req.epsilon is None else req.epsilon,
            seed=req.seed,
            count_mode=req.count_mode,
            shared_holding=req.shared_holding,
        )

        def work() -> dict:
            loaded = load_trajectories(req.dataset)
            max_hold = max(
                d for traj in loaded.trajectories for _, d in traj.visits
            )
            batch = encode_dataset(loaded.trajectories, loaded.space, max_hold)
            res = fit(batch, em_config)
            model_id = uuid.uuid4().hex[:12]
            with state.lock:
                state.models[model_id] = {
                    "params": res.params,
                    "fit_config": em_config,
                    "objective": res.final_q,
                }
            return {
                "model_id": model_id,
                "objective": res.final_q,
                "n_iter": res.n_iter,
                "n_trajectories": len(loaded.trajectories),
                "retention": loaded.report.retention,
            }

        return start_job("fit", req.job_id, work)

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str):
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                raise _NotFound(f"no job {job_id!r}")
            return job.view()

    @app.get("/model/{model_id}")
    async def get_model_doc(model_id: str):
        entry = get_model(model_id)
        return model_document(
            entry["params"], entry["fit_config"], entry["objective"]
        )

    def forecast_payload(model_id: str, plan_body: PlanBody, capacities):
        entry = get_model(model_id)
        params = entry["params"]
        plan = cs.ArrivalPlan(
            elective=np.array(plan_body.elective),
            emergency_rates=np.array(plan_body.emergency_rates),
        )
        if plan.elective.shape[0] != params.n_clusters:
            raise WardflowError(
                f"plan has {plan.elective.shape[0]} types but the model has "
                f"{params.n_clusters} clusters"
            )
        occ = occupancies_for(model_id)
        elective = cs.elective_demand(plan, occ)
        emergency = cs.emergency_demand(plan, occ, eps_tail=state.config.eps_tail)
        fc = cs.combined_forecast(
            elective,
            emergency,
            np.array(capacities) if capacities is not None else None,
        )
        wards = list(params.space.transient)
        return {
            "wards": wards,
            "mean": fc.mean.tolist(),
            "exceedance": None if fc.exceedance is None else fc.exceedance.tolist(),
            "tail_mass": fc.demand.tail_mass.tolist(),
            "pmfs": [
                [fc.demand.cell(u, d).tolist() for d in range(cs.WEEK)]
                for u in range(len(wards))
            ],
        }

    @app.post("/forecast")
    async def post_forecast(req: ForecastRequest):
        return forecast_payload(req.model_id, req.plan, req.capacities)

    @app.post("/whatif")
    async def post_whatif(req: WhatifRequest):
        base = forecast_payload(req.model_id, req.baseline, req.capacities)
        edit = forecast_payload(req.model_id, req.edited, req.capacities)
        delta = (np.array(edit["mean"]) - np.array(base["mean"])).tolist()
        return {"baseline": base, "edited": edit, "delta_mean": delta}

    @app.post("/optimize")
    async def post_optimize(req: OptimizeRequest):
        entry = get_model(req.model_id)
        params = entry["params"]

        def work() -> dict:
            occ = occupancies_for(req.model_id)
            plan = cs.ArrivalPlan(
                elective=np.zeros((params.n_clusters, cs.WEEK), dtype=int),
                emergency_rates=np.array(req.emergency_rates),
            )
            emergency = cs.emergency_demand(
                plan, occ, eps_tail=state.config.eps_tail
            )
            hospital = sch.HospitalConfig(
                capacities=np.array(req.capacities),
                blocking_limit=req.blocking_limit,
                offunit_limits=np.array(req.offunit_limits),
                baseline=np.array(req.baseline),
                daily_caps=np.array(req.daily_caps),
                rewards=np.array(req.rewards),
                cancellation_share=(
                    None
                    if req.cancellation_share is None
                    else np.array(req.cancellation_share)
                ),
            )
            instance = sch.build_instance(occ, emergency, hospital)
            limit = req.time_limit or state.config.solver_time_limit
            sol = sch.solve_exact(instance, time_limit=limit)
            return {
                "infeasible": False,
                "psi": sol.psi.tolist(),
                "objective": sol.objective,
                "certified": sol.certified,
                "gap": sol.gap,
                "nodes": sol.nodes,
                "metrics": {
                    "expected_blocking": sol.metrics.expected_blocking,
                    "expected_offunit": sol.metrics.expected_offunit.tolist(),
                    "throughput": sol.metrics.throughput,
                    "reward": sol.metrics.reward,
                    "utilization": sol.metrics.utilization,
                },
            }

        return start_job("optimize", req.job_id, work)

    @app.exception_handler(_NotFound)
    async def on_not_found(request: Request, exc: "_NotFound"):
        return _http_error(404, str(exc))

    @app.exception_handler(_Conflict)
    async def on_conflict(request: Request, exc: "_Conflict"):
        return _http_error(409, str(exc))

    return app


class _NotFound(Exception):
    pass


class _Conflict(Exception):
    pass


def serve(
    host: str = "127.0.0.1",
    port: int = 8000,
    config: PipelineConfig = DEFAULT_CONFIG,
) -> None:
    """Run the service under uvicorn until interrupted."""
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="warning")
