"""Case-level inference: sample, score, decide, persist.

Shared by the HTTP service and the CLI so both produce byte-identical
artifacts and identical decisions for the same inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .referral import CaseRecord, normalize_score
from .store import CaseStore, StoredCase, config_to_dict
from .uncertainty import METRICS, THEORETICAL_MAX, UncertaintyMap, all_maps, case_score
from .unet import ModelParams, SampleStack, mc_sample

DEFAULT_T = 20
DEFAULT_SEED = 42
DEFAULT_DROPOUT_P = 0.25


@dataclass
class InferenceResult:
    stack: SampleStack
    maps: dict[str, UncertaintyMap]
    scores: dict[str, float]
    prob_fg: np.ndarray
    pred_mask: np.ndarray


def run_case_inference(params: ModelParams, image: np.ndarray, T: int = DEFAULT_T,
                       seed: int = DEFAULT_SEED, dropout_p: float = DEFAULT_DROPOUT_P,
                       reduction: str = "mean") -> InferenceResult:
    """MC-dropout stack, the five uncertainty maps, and case scores."""
    stack = mc_sample(params, image, T, dropout_p, seed)
    maps = all_maps(stack)
    scores = {m: case_score(maps[m], reduction) for m in METRICS}
    mean_probs = stack.probs.astype(np.float64).mean(axis=0)
    prob_fg = mean_probs[1].astype(np.float32)
    pred_mask = np.argmax(mean_probs, axis=0).astype(np.int64)
    return InferenceResult(stack, maps, scores, prob_fg, pred_mask)


def _cohort_maximum(store: CaseStore, metric: str, fresh: float,
                    case_id: str) -> float:
    """Max raw score for the metric across inferred cases plus this one."""
    best = fresh
    for case in store.cases():
        if case.case_id != case_id and metric in case.scores:
            best = max(best, case.scores[metric])
    return best


def infer_into_store(store: CaseStore, params: ModelParams, case_id: str,
                     T: int = DEFAULT_T, seed: int = DEFAULT_SEED,
                     dropout_p: float = DEFAULT_DROPOUT_P) -> StoredCase:
    """Run inference for a stored case and record the referral decision.

    The decision uses the store's active threshold config at call time;
    both the decision and the config snapshot go into the event, so a
    later config change never rewrites history.
    """
    store.get(case_id)
    image = store.load_artifact(case_id, "image")
    config = store.active_config
    result = run_case_inference(params, image, T=T, seed=seed,
                                dropout_p=dropout_p, reduction=config.reduction)
    raw = result.scores[config.metric]
    maximum = None
    if config.normalization == "cohort-max":
        maximum = _cohort_maximum(store, config.metric, raw, case_id)
    normalized = normalize_score(raw, config.metric, config.normalization, maximum)
    decision = "referred" if normalized > config.tau else "retained"
    arrays = {
        "stack": result.stack.probs,
        "prob_fg": result.prob_fg,
        "pred_mask": result.pred_mask.astype(np.float32),
        **{f"map_{m}": result.maps[m].scalar_field for m in METRICS},
    }
    return store.record_inference(
        case_id,
        scores=result.scores,
        normalized_score=normalized,
        decision=decision,
        infer_params={"T": T, "seed": seed, "dropout_p": dropout_p},
        decision_config=config_to_dict(config),
        arrays=arrays,
    )


def load_case_map(store: CaseStore, case_id: str, metric: str) -> UncertaintyMap:
    """Reload a persisted uncertainty map.

    Artifact files hold f32, and rounding a value that sits exactly at the
    theoretical maximum in f64 can land half an f32 ulp above it, outside
    the validator's slack. The excess is pure storage quantization, so
    clamp back to the maximum before validating.
    """
    field = store.load_artifact(case_id, f"map_{metric}").astype(np.float64)
    field = np.minimum(field, THEORETICAL_MAX[metric])
    return UncertaintyMap(metric, field)


def cohort_records(store: CaseStore, metric: str, reduction: str,
                   require_gt: bool = False) -> list[CaseRecord]:
    """Referral-layer view of every inferred case.

    Scores are recomputed from the persisted uncertainty maps with the
    requested reduction, so hypothetical reports can use a different
    reduction than the one active at inference time.
    """
    records = []
    for case in store.cases():
        if not case.scores:
            continue
        if require_gt and not case.has_gt:
            continue
        umap = load_case_map(store, case.case_id, metric)
        gt = store.load_artifact(case.case_id, "gt_mask").astype(np.int64) if case.has_gt else None
        records.append(CaseRecord(
            case_id=case.case_id,
            prob_fg=store.load_artifact(case.case_id, "prob_fg"),
            pred_mask=store.load_artifact(case.case_id, "pred_mask").astype(np.int64),
            gt_mask=gt,
            scores={metric: case_score(umap, reduction)},
            normalized_score=case.normalized_score,
            status=case.status if case.status in ("retained", "referred", "reviewed") else "retained",
            verdict=case.verdict,
        ))
    return records
