"""Append-only event log with materialized per-case state.

Every mutation writes artifacts first, then appends one JSONL event, then
applies it to the in-memory view. Rebuilding a store from its log yields
exactly the same state, which the service's replay test relies on.
Artifact files are immutable: re-inference writes new versioned files and
repoints the case, so an old log line never refers to changed bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .referral import ThresholdConfig
from .tensor import load_tns, save_tns
from .uncertainty import METRICS


class StoreError(Exception):
    """Base class for store failures."""


class UnknownCaseError(StoreError):
    pass


class DuplicateCaseError(StoreError):
    pass


class StateError(StoreError):
    """The case's lifecycle state does not allow the operation."""


def config_to_dict(config: ThresholdConfig) -> dict:
    return {
        "metric": config.metric,
        "reduction": config.reduction,
        "tau": config.tau,
        "normalization": config.normalization,
    }


def config_from_dict(payload: dict) -> ThresholdConfig:
    return ThresholdConfig(
        metric=payload["metric"],
        reduction=payload["reduction"],
        tau=payload["tau"],
        normalization=payload["normalization"],
    )


@dataclass
class StoredCase:
    """Materialized view of one case; arrays live in the artifact dir."""

    case_id: str
    status: str = "ingested"
    has_gt: bool = False
    scores: dict[str, float] = field(default_factory=dict)
    normalized_score: float | None = None
    infer_params: dict | None = None
    decision_config: dict | None = None
    verdict: dict | None = None
    verdict_hash: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "case_id": self.case_id,
            "status": self.status,
            "has_gt": self.has_gt,
            "scores": dict(self.scores),
            "normalized_score": self.normalized_score,
            "infer_params": self.infer_params,
            "decision_config": self.decision_config,
            "verdict": self.verdict,
            "artifacts": sorted(self.artifacts),
        }


def _verdict_hash(verdict: str, reviewer: str, mask_bytes: bytes) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(verdict.encode())
    h.update(b"|")
    h.update(reviewer.encode())
    h.update(b"|")
    h.update(mask_bytes)
    return h.hexdigest()


class CaseStore:
    """Event-sourced case state under one directory.

    Mutations are serialized by a lock; reads see the materialized dict.
    """

    def __init__(self, root: str | os.PathLike, config: ThresholdConfig | None = None):
        self.root = os.fspath(root)
        self.artifact_root = os.path.join(self.root, "artifacts")
        self.log_path = os.path.join(self.root, "events.jsonl")
        os.makedirs(self.artifact_root, exist_ok=True)
        self._lock = threading.RLock()
        self._cases: dict[str, StoredCase] = {}
        self._config = config or ThresholdConfig()
        self._seq = 0
        if os.path.exists(self.log_path):
            with open(self.log_path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._apply(json.loads(line))

    # -- event plumbing ----------------------------------------------------

    def _append(self, event: dict) -> None:
        event = {"seq": self._seq, **event}
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        self._apply(event)

    def _apply(self, event: dict) -> None:
        if event["seq"] != self._seq:
            raise StoreError(f"event log corrupt: expected seq {self._seq}, got {event['seq']}")
        self._seq += 1
        kind = event["type"]
        if kind == "ingest":
            case = StoredCase(
                case_id=event["case_id"],
                has_gt=event["has_gt"],
                artifacts=dict(event["artifacts"]),
            )
            self._cases[case.case_id] = case
        elif kind == "inference":
            case = self._cases[event["case_id"]]
            case.scores = dict(event["scores"])
            case.normalized_score = event["normalized_score"]
            case.infer_params = dict(event["infer_params"])
            case.decision_config = dict(event["decision_config"])
            case.status = event["decision"]
            case.artifacts.update(event["artifacts"])
        elif kind == "verdict":
            case = self._cases[event["case_id"]]
            case.status = "reviewed"
            case.verdict = dict(event["verdict"])
            case.verdict_hash = event["verdict_hash"]
            case.artifacts.update(event["artifacts"])
        elif kind == "config":
            self._config = config_from_dict(event["config"])
        else:
            raise StoreError(f"unknown event type {kind!r}")

    # -- artifacts ----------------------------------------------------------

    def _write_artifact(self, case_id: str, name: str, array: np.ndarray) -> str:
        rel = os.path.join(case_id, f"{name}.v{self._seq}.tns")
        path = os.path.join(self.artifact_root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_tns(path, array)
        return rel

    def load_artifact(self, case_id: str, name: str) -> np.ndarray:
        case = self.get(case_id)
        if name not in case.artifacts:
            raise StoreError(f"case {case_id} has no artifact {name!r}")
        return load_tns(os.path.join(self.artifact_root, case.artifacts[name]))

    # -- queries -------------------------------------------------------------

    def get(self, case_id: str) -> StoredCase:
        try:
            return self._cases[case_id]
        except KeyError:
            raise UnknownCaseError(f"unknown case {case_id!r}") from None

    def __contains__(self, case_id: str) -> bool:
        return case_id in self._cases

    def __len__(self) -> int:
        return len(self._cases)

    @property
    def active_config(self) -> ThresholdConfig:
        return self._config

    def new_case_id(self) -> str:
        with self._lock:
            n = len(self._cases) + 1
            while f"case-{n:05d}" in self._cases:
                n += 1
            return f"case-{n:05d}"

    def cases(self) -> list[StoredCase]:
        with self._lock:
            return sorted(self._cases.values(), key=lambda c: c.case_id)

    def queue(self, status: str = "referred") -> list[StoredCase]:
        """Cases in ``status``, highest normalized score first, ties by id."""
        with self._lock:
            rows = [c for c in self._cases.values() if c.status == status]
        return sorted(rows, key=lambda c: (-(c.normalized_score or 0.0), c.case_id))

    def snapshot(self) -> dict:
        """Canonical JSON-compatible view of the materialized state."""
        with self._lock:
            return {
                "seq": self._seq,
                "config": config_to_dict(self._config),
                "cases": {cid: case.summary() for cid, case in sorted(self._cases.items())},
            }

    def digest(self) -> str:
        """Hash of the raw event log bytes."""
        h = hashlib.blake2b(digest_size=16)
        if os.path.exists(self.log_path):
            with open(self.log_path, "rb") as fh:
                h.update(fh.read())
        return h.hexdigest()

    # -- mutations -----------------------------------------------------------

    def ingest(self, image: np.ndarray, gt_mask: np.ndarray | None = None,
               case_id: str | None = None) -> StoredCase:
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != 1:
            raise ValueError("image must be [1,H,W]")
        if float(image.min()) < 0.0 or float(image.max()) > 1.0:
            raise ValueError("image values must lie in [0,1]")
        if gt_mask is not None:
            gt_mask = np.asarray(gt_mask)
            if gt_mask.shape != image.shape[1:]:
                raise ValueError("ground-truth mask size does not match the image")
            if not np.isin(gt_mask, (0, 1)).all():
                raise ValueError("ground-truth mask must be binary")
        with self._lock:
            cid = case_id or self.new_case_id()
            if cid in self._cases:
                raise DuplicateCaseError(f"case {cid!r} already exists")
            artifacts = {"image": self._write_artifact(cid, "image", image)}
            if gt_mask is not None:
                artifacts["gt_mask"] = self._write_artifact(cid, "gt_mask", gt_mask.astype(np.float32))
            self._append({
                "type": "ingest",
                "case_id": cid,
                "has_gt": gt_mask is not None,
                "artifacts": artifacts,
            })
            return self.get(cid)

    def record_inference(self, case_id: str, *, scores: dict[str, float],
                         normalized_score: float, decision: str,
                         infer_params: dict, decision_config: dict,
                         arrays: dict[str, np.ndarray]) -> StoredCase:
        if decision not in ("retained", "referred"):
            raise ValueError(f"bad decision {decision!r}")
        if set(scores) != set(METRICS):
            raise ValueError("scores must cover every metric")
        with self._lock:
            case = self.get(case_id)
            if case.status == "reviewed":
                raise StateError(f"case {case_id} is already reviewed")
            artifacts = {name: self._write_artifact(case_id, name, arr)
                         for name, arr in sorted(arrays.items())}
            self._append({
                "type": "inference",
                "case_id": case_id,
                "scores": {k: float(v) for k, v in scores.items()},
                "normalized_score": float(normalized_score),
                "decision": decision,
                "infer_params": infer_params,
                "decision_config": decision_config,
                "artifacts": artifacts,
            })
            return self.get(case_id)

    def record_verdict(self, case_id: str, verdict: str, reviewer: str = "reviewer",
                       corrected_mask: np.ndarray | None = None) -> tuple[StoredCase, bool]:
        """Apply a reviewer verdict; returns (case, applied).

        Identical resubmission (same case, reviewer, verdict content) is a
        no-op returning the stored state with applied=False.
        """
        if verdict not in ("accept", "override"):
            raise ValueError(f"verdict must be accept or override, got {verdict!r}")
        mask_bytes = b""
        if verdict == "override":
            if corrected_mask is None:
                raise ValueError("override verdicts need a corrected mask")
            corrected_mask = np.asarray(corrected_mask)
            if not np.isin(corrected_mask, (0, 1)).all():
                raise ValueError("corrected mask must be binary")
            mask_bytes = corrected_mask.astype(np.float32).tobytes()
        elif corrected_mask is not None:
            raise ValueError("accept verdicts do not carry a mask")
        with self._lock:
            case = self.get(case_id)
            vhash = _verdict_hash(verdict, reviewer, mask_bytes)
            if case.status == "reviewed":
                if case.verdict_hash == vhash:
                    return case, False
                raise StateError(f"case {case_id} already reviewed with a different verdict")
            if case.status != "referred":
                raise StateError(f"case {case_id} is {case.status}, not referred")
            if verdict == "override":
                pred = self.load_artifact(case_id, "pred_mask")
                if corrected_mask.shape != pred.shape:
                    raise ValueError(
                        f"corrected mask {corrected_mask.shape} does not match prediction {pred.shape}"
                    )
            artifacts = {}
            if verdict == "override":
                artifacts["review_mask"] = self._write_artifact(
                    case_id, "review_mask", corrected_mask.astype(np.float32))
            self._append({
                "type": "verdict",
                "case_id": case_id,
                "verdict": {"verdict": verdict, "reviewer": reviewer},
                "verdict_hash": vhash,
                "artifacts": artifacts,
            })
            return self.get(case_id), True

    def set_config(self, config: ThresholdConfig) -> ThresholdConfig:
        with self._lock:
            self._append({"type": "config", "config": config_to_dict(config)})
            return self._config
