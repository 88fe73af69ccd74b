"""HTTP/JSON referral workflow: ingest, infer, queue, review, what-if.

The app owns one CaseStore; every mutation goes through it, so the event
log is the single source of truth. What-if and report endpoints only
read. Inference runs synchronously inside the request at desk scale.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
from dataclasses import replace

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .data import DataError, load_pgm, parse_pgm
from .pipeline import DEFAULT_DROPOUT_P, DEFAULT_SEED, DEFAULT_T, cohort_records, infer_into_store
from .referral import (
    ThresholdConfig,
    build_report,
    parse_tau_grid,
    report_csv_text,
    report_to_dict,
    sweep_threshold,
)
from .store import (
    CaseStore,
    DuplicateCaseError,
    StateError,
    StoreError,
    UnknownCaseError,
    config_to_dict,
)
from .tensor import TensorError, dumps_tns, loads_tns
from .unet import DivergenceError, load_checkpoint

LIFECYCLE_STATUSES = ("ingested", "retained", "referred", "reviewed")


def _case_summary(case) -> dict:
    return {
        "case_id": case.case_id,
        "status": case.status,
        "has_gt": case.has_gt,
        "scores": case.scores,
        "normalized_score": case.normalized_score,
        "infer_params": case.infer_params,
        "decision_config": case.decision_config,
        "verdict": case.verdict,
        "artifacts": sorted(case.artifacts),
    }


def _b64_bytes(payload: dict, key: str) -> bytes | None:
    value = payload.get(key)
    if value is None:
        return None
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, TypeError) as exc:
        raise HTTPException(400, f"{key}: invalid base64") from exc


def _image_from_payload(payload: dict) -> np.ndarray:
    raw = _b64_bytes(payload, "image_b64")
    if raw is not None:
        return parse_pgm(raw, source="image_b64")
    path = payload.get("image_path")
    if path:
        if not os.path.exists(path):
            raise HTTPException(400, f"image_path {path!r} does not exist")
        return load_pgm(path)
    raise HTTPException(400, "payload needs image_b64 or image_path")


def _gt_from_payload(payload: dict) -> np.ndarray | None:
    raw = _b64_bytes(payload, "gt_mask_b64")
    if raw is not None:
        return (parse_pgm(raw, source="gt_mask_b64")[0] > 0.5).astype(np.int64)
    path = payload.get("gt_mask_path")
    if path:
        if not os.path.exists(path):
            raise HTTPException(400, f"gt_mask_path {path!r} does not exist")
        return (load_pgm(path)[0] > 0.5).astype(np.int64)
    return None


async def _json_body(request: Request) -> dict:
    body = await request.body()
    if not body:
        return {}
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        raise HTTPException(400, f"invalid JSON body: {exc}") from exc
    if not isinstance(payload, dict):
        raise HTTPException(400, "JSON body must be an object")
    return payload


def _config_from_query(active: ThresholdConfig, tau: str | None, metric: str | None,
                       reduction: str | None, normalization: str | None) -> ThresholdConfig:
    try:
        tau_value = active.tau if tau is None else float(tau)
    except ValueError as exc:
        raise HTTPException(400, f"invalid tau {tau!r}") from exc
    try:
        return ThresholdConfig(
            metric=metric or active.metric,
            reduction=reduction or active.reduction,
            tau=tau_value,
            normalization=normalization or active.normalization,
        )
    except ValueError as exc:
        raise HTTPException(400, str(exc)) from exc


def create_app(store_dir: str | None = None, checkpoint: str | None = None,
               config: ThresholdConfig | None = None) -> FastAPI:
    """Build the service around a store directory and model checkpoint.

    Falls back to TRIAGE_STORE_DIR / TRIAGE_CHECKPOINT env vars. The app
    starts without a checkpoint (ingestion still works); inference then
    reports a 500 until one is configured.
    """
    store_dir = store_dir or os.environ.get("TRIAGE_STORE_DIR")
    if not store_dir:
        raise ValueError("store_dir is required (flag or TRIAGE_STORE_DIR)")
    checkpoint = checkpoint or os.environ.get("TRIAGE_CHECKPOINT")
    store = CaseStore(store_dir, config=config)
    params = None
    model_dropout = DEFAULT_DROPOUT_P
    if checkpoint:
        params, manifest = load_checkpoint(checkpoint)
        if manifest.get("dropout_p") is not None:
            model_dropout = float(manifest["dropout_p"])

    app = FastAPI(title="segtriage")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store
    app.state.params = params

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "cases": len(store),
            "model_loaded": params is not None,
            "digest": store.digest(),
        }

    @app.post("/cases", status_code=201)
    async def create_case(request: Request):
        ctype = request.headers.get("content-type", "")
        case_id = None
        gt_mask = None
        if "application/json" in ctype:
            payload = await _json_body(request)
            case_id = payload.get("case_id")
            try:
                image = _image_from_payload(payload)
                gt_mask = _gt_from_payload(payload)
            except DataError as exc:
                raise HTTPException(400, str(exc)) from exc
        else:
            body = await request.body()
            try:
                image = parse_pgm(body, source="request body")
            except DataError as exc:
                raise HTTPException(400, str(exc)) from exc
        try:
            case = store.ingest(image, gt_mask=gt_mask, case_id=case_id)
        except DuplicateCaseError as exc:
            raise HTTPException(409, str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        return {"case_id": case.case_id, "status": case.status, "has_gt": case.has_gt}

    @app.get("/cases")
    def list_cases():
        return {"cases": [_case_summary(c) for c in store.cases()]}

    @app.get("/cases/{case_id}")
    def get_case(case_id: str):
        try:
            return _case_summary(store.get(case_id))
        except UnknownCaseError as exc:
            raise HTTPException(404, str(exc)) from exc

    @app.post("/cases/{case_id}/infer")
    async def infer_case(case_id: str, request: Request):
        payload = await _json_body(request)
        try:
            T = int(payload.get("T", DEFAULT_T))
            seed = int(payload.get("seed", DEFAULT_SEED))
            dropout_p = float(payload.get("dropout_p", model_dropout))
        except (TypeError, ValueError) as exc:
            raise HTTPException(400, f"invalid inference parameters: {exc}") from exc
        if T < 1:
            raise HTTPException(400, "T must be >= 1")
        if not 0.0 <= dropout_p < 1.0:
            raise HTTPException(400, "dropout_p must lie in [0,1)")
        if params is None:
            raise HTTPException(500, "no model checkpoint configured")
        try:
            case = infer_into_store(store, params, case_id, T=T, seed=seed,
                                    dropout_p=dropout_p)
        except UnknownCaseError as exc:
            raise HTTPException(404, str(exc)) from exc
        except StateError as exc:
            raise HTTPException(409, str(exc)) from exc
        except (DivergenceError, TensorError, StoreError) as exc:
            raise HTTPException(500, f"inference failed: {exc}") from exc
        summary = _case_summary(case)
        summary["decision"] = case.status
        return summary

    @app.get("/queue")
    def queue(status: str = "referred"):
        if status not in LIFECYCLE_STATUSES:
            raise HTTPException(400, f"unknown status {status!r}")
        return {
            "status": status,
            "cases": [_case_summary(c) for c in store.queue(status)],
        }

    @app.post("/cases/{case_id}/review")
    async def review_case(case_id: str, request: Request):
        payload = await _json_body(request)
        verdict = payload.get("verdict")
        if verdict not in ("accept", "override"):
            raise HTTPException(400, "verdict must be accept or override")
        reviewer = payload.get("reviewer", "reviewer")
        if not isinstance(reviewer, str) or not reviewer:
            raise HTTPException(400, "reviewer must be a non-empty string")
        mask = None
        raw = _b64_bytes(payload, "corrected_mask_b64")
        if raw is not None:
            try:
                mask = loads_tns(raw)
            except TensorError as exc:
                raise HTTPException(400, f"corrected_mask_b64: {exc}") from exc
        try:
            case, applied = store.record_verdict(case_id, verdict, reviewer=reviewer,
                                                 corrected_mask=mask)
        except UnknownCaseError as exc:
            raise HTTPException(404, str(exc)) from exc
        except StateError as exc:
            raise HTTPException(409, str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        summary = _case_summary(case)
        summary["applied"] = applied
        return summary

    @app.get("/whatif")
    def whatif(tau: str | None = None, metric: str | None = None,
               reduction: str | None = None, normalization: str | None = None):
        cfg = _config_from_query(store.active_config, tau, metric, reduction, normalization)
        cohort = cohort_records(store, cfg.metric, cfg.reduction)
        if not cohort:
            raise HTTPException(409, "no inferred cases to evaluate")
        report = build_report(cohort, cfg)
        payload = report_to_dict(report)
        payload["cases"] = len(cohort)
        payload["config"] = config_to_dict(cfg)
        return payload

    @app.get("/report")
    def report(request: Request, grid: str = "0.1:0.9:0.1", metric: str | None = None,
               reduction: str | None = None, normalization: str | None = None):
        try:
            taus = parse_tau_grid(grid)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        cfg = _config_from_query(store.active_config, None, metric, reduction, normalization)
        cohort = cohort_records(store, cfg.metric, cfg.reduction)
        if not cohort:
            raise HTTPException(409, "no inferred cases to evaluate")
        if not any(c.gt_mask is not None for c in cohort):
            raise HTTPException(409, "no ground-truth cases: report metrics are undefined")
        reports = sweep_threshold(cohort, cfg, taus)
        if "text/csv" in request.headers.get("accept", ""):
            return Response(content=report_csv_text(reports), media_type="text/csv")
        return {
            "grid": list(taus),
            "metric": cfg.metric,
            "reduction": cfg.reduction,
            "normalization": cfg.normalization,
            "reports": [report_to_dict(r) for r in reports],
        }

    @app.get("/config")
    def get_config():
        return config_to_dict(store.active_config)

    @app.put("/config")
    async def put_config(request: Request):
        payload = await _json_body(request)
        unknown = set(payload) - {"metric", "reduction", "tau", "normalization"}
        if unknown:
            raise HTTPException(400, f"unknown config keys {sorted(unknown)}")
        try:
            cfg = replace(store.active_config, **payload)
        except (TypeError, ValueError) as exc:
            raise HTTPException(400, str(exc)) from exc
        store.set_config(cfg)
        return config_to_dict(store.active_config)

    @app.get("/cases/{case_id}/tensor/{name}")
    def get_tensor(case_id: str, name: str, encoding: str = "binary"):
        try:
            arr = store.load_artifact(case_id, name)
        except UnknownCaseError as exc:
            raise HTTPException(404, str(exc)) from exc
        except StoreError as exc:
            raise HTTPException(404, str(exc)) from exc
        data = dumps_tns(arr)
        if encoding == "base64":
            return {"case_id": case_id, "name": name,
                    "b64": base64.b64encode(data).decode("ascii")}
        if encoding != "binary":
            raise HTTPException(400, f"unknown encoding {encoding!r}")
        return Response(content=data, media_type="application/octet-stream")

    return app
