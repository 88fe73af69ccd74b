"""Threshold-based refer/retain decisions and retained-cohort reporting.

A case's uncertainty score is normalized to [0,1] either by the metric's
analytic maximum (deployable online, the default) or by the observed
cohort maximum (a retrospective reading). Cases whose normalized score
strictly exceeds tau are referred; everything downstream (accuracy,
precision, recall, AUROC) is computed over the retained cases only,
pooling pixels across cases.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .uncertainty import METRICS, THEORETICAL_MAX

_NORMALIZATIONS = ("theoretical-max", "cohort-max")
DEFAULT_TAU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class ThresholdConfig:
    metric: str = "epistemic"
    reduction: str = "mean"
    tau: float = 0.6
    normalization: str = "theoretical-max"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0,1], got {self.tau}")
        if self.normalization not in _NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
        if self.reduction in ("mean", "max"):
            return
        if self.reduction.startswith("quantile:"):
            try:
                q = float(self.reduction.split(":", 1)[1])
            except ValueError:
                q = -1.0
            if 0.0 <= q <= 1.0:
                return
        raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class CaseRecord:
    """One case's scores and referral state; masks are [H,W] arrays."""

    case_id: str
    prob_fg: np.ndarray
    pred_mask: np.ndarray
    gt_mask: np.ndarray | None = None
    scores: dict[str, float] = field(default_factory=dict)
    normalized_score: float | None = None
    status: str = "retained"
    verdict: dict | None = None

    def __post_init__(self):
        if self.status not in ("retained", "referred", "reviewed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "reviewed" and self.verdict is None:
            raise ValueError("reviewed cases must carry a verdict")
        for metric, value in self.scores.items():
            if metric not in METRICS:
                raise ValueError(f"unknown metric {metric!r}")
            if value < 0:
                raise ValueError(f"{metric} score must be >= 0")


def cohort_max(cases, metric: str) -> float:
    """Largest raw score for ``metric`` across the cohort (0 for empty)."""
    values = [c.scores[metric] for c in cases if metric in c.scores]
    return max(values) if values else 0.0


def normalize_score(raw: float, metric: str, mode: str = "theoretical-max",
                    cohort_maximum: float | None = None) -> float:
    """Proportion of maximum uncertainty, in [0,1]."""
    if metric not in THEORETICAL_MAX:
        raise ValueError(f"unknown metric {metric!r}")
    if raw < 0:
        raise ValueError("raw score must be >= 0")
    if mode == "theoretical-max":
        value = raw / THEORETICAL_MAX[metric]
    elif mode == "cohort-max":
        if cohort_maximum is None:
            raise ValueError("cohort-max normalization needs the cohort maximum")
        if cohort_maximum <= 0.0:
            return 0.0
        value = raw / cohort_maximum
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    if value > 1.0:
        if value > 1.0 + 1e-6:
            raise ValueError(f"normalized score {value} far above 1; raw={raw} metric={metric}")
        value = 1.0
    return value


def decide(case: CaseRecord, config: ThresholdConfig,
           cohort_maximum: float | None = None) -> str:
    """"referred" iff the normalized score strictly exceeds tau."""
    if config.metric not in case.scores:
        raise ValueError(f"case {case.case_id} has no {config.metric} score")
    norm = normalize_score(case.scores[config.metric], config.metric,
                           config.normalization, cohort_maximum)
    return "referred" if norm > config.tau else "retained"


# ---------------------------------------------------------------------------
# retained-cohort pixel metrics


def confusion_counts(pairs) -> tuple[int, int, int, int]:
    """Pooled (TP, FP, FN, TN) over (pred_mask, gt_mask) pairs; fg positive."""
    tp = fp = fn = tn = 0
    for pred, gt in pairs:
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth shapes differ")
        tp += int(np.sum(pred & gt))
        fp += int(np.sum(pred & ~gt))
        fn += int(np.sum(~pred & gt))
        tn += int(np.sum(~pred & ~gt))
    return tp, fp, fn, tn


def pixel_metrics(pairs) -> tuple[float | None, float | None, float | None]:
    """(accuracy, precision, recall); zero-denominator entries are None."""
    tp, fp, fn, tn = confusion_counts(pairs)
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("no pixels to score")
    accuracy = (tp + tn) / total
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    return accuracy, precision, recall


def auroc(scores, labels) -> float:
    """Area under the ROC curve; ties get half credit (Mann-Whitney).

    Trapezoidal integration over all distinct score thresholds; raises
    when only one class is present, where the curve is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    npos = int(labels.sum())
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        raise ValueError("AUROC undefined with a single class")
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    s = scores[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(~y)[ends]]
    num = float(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return num / (2.0 * npos * nneg)


# ---------------------------------------------------------------------------
# cohort reports


@dataclass
class CohortReport:
    """Referral outcome and retained-set quality at one tau."""

    tau: float
    metric: str
    retained: int
    referred: int
    referral_rate: float
    accuracy: float | None
    precision: float | None
    recall: float | None
    auroc: float | None
    all_referred: bool = False

    def __post_init__(self):
        if self.retained < 0 or self.referred < 0:
            raise ValueError("counts must be >= 0")
        for name in ("referral_rate", "accuracy", "precision", "recall", "auroc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {value}")
        if self.all_referred and self.retained:
            raise ValueError("all_referred flag contradicts a nonempty retained set")


def build_report(cases, config: ThresholdConfig,
                 cohort_maximum: float | None = None) -> CohortReport:
    """Score every case at config.tau and summarize the retained cohort."""
    cases = list(cases)
    if not cases:
        raise ValueError("empty cohort")
    if config.normalization == "cohort-max" and cohort_maximum is None:
        cohort_maximum = cohort_max(cases, config.metric)
    retained_cases = []
    referred = 0
    for case in cases:
        if decide(case, config, cohort_maximum) == "referred":
            referred += 1
        else:
            retained_cases.append(case)
    scored = [c for c in retained_cases if c.gt_mask is not None]
    accuracy = precision = recall = roc = None
    if scored:
        accuracy, precision, recall = pixel_metrics((c.pred_mask, c.gt_mask) for c in scored)
        pooled_scores = np.concatenate([np.asarray(c.prob_fg).ravel() for c in scored])
        pooled_labels = np.concatenate([np.asarray(c.gt_mask).ravel() for c in scored])
        try:
            roc = auroc(pooled_scores, pooled_labels)
        except ValueError:
            roc = None
    return CohortReport(
        tau=config.tau,
        metric=config.metric,
        retained=len(retained_cases),
        referred=referred,
        referral_rate=referred / len(cases),
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        auroc=roc,
        all_referred=not retained_cases,
    )


def sweep_threshold(cases, config: ThresholdConfig,
                    tau_grid=DEFAULT_TAU_GRID) -> list[CohortReport]:
    """One report per tau, ascending; the cohort and scores stay fixed."""
    cases = list(cases)
    maximum = cohort_max(cases, config.metric) if config.normalization == "cohort-max" else None
    return [
        build_report(cases, replace(config, tau=float(tau)), maximum)
        for tau in sorted(tau_grid)
    ]


def parse_tau_grid(text: str) -> tuple[float, ...]:
    """Parse "start:stop:step" (inclusive ends) or a single threshold.

    Grid points are rounded to 10 decimals so 0.1:0.9:0.1 yields exactly
    the canonical nine thresholds despite binary step accumulation.
    """
    text = text.strip()
    parts = text.split(":")
    try:
        if len(parts) == 1:
            values = (float(parts[0]),)
        elif len(parts) == 3:
            start, stop, step = (float(p) for p in parts)
            if step <= 0:
                raise ValueError("step must be positive")
            if stop < start:
                raise ValueError("stop must be >= start")
            values = []
            i = 0
            while True:
                tau = round(start + i * step, 10)
                if tau > stop + 1e-9:
                    break
                values.append(tau)
                i += 1
            values = tuple(values)
        else:
            raise ValueError("expected a number or start:stop:step")
    except ValueError as exc:
        raise ValueError(f"bad threshold grid {text!r}: {exc}") from exc
    for tau in values:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"threshold {tau} outside [0,1]")
    return values


REPORT_CSV_HEADER = [
    "tau", "metric", "retained", "referred", "referral_rate",
    "accuracy", "precision", "recall", "auroc",
]


def _cell(value) -> str:
    return "" if value is None else repr(value)


def report_csv_text(reports: list[CohortReport]) -> str:
    """Undefined rates serialize as empty cells, never as 0."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_CSV_HEADER)
    for rep in reports:
        writer.writerow([
            repr(rep.tau), rep.metric, rep.retained, rep.referred,
            repr(rep.referral_rate), _cell(rep.accuracy), _cell(rep.precision),
            _cell(rep.recall), _cell(rep.auroc),
        ])
    return buf.getvalue()


def write_report_csv(reports: list[CohortReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(report_csv_text(reports))


def report_to_dict(rep: CohortReport) -> dict:
    return {
        "tau": rep.tau,
        "metric": rep.metric,
        "retained": rep.retained,
        "referred": rep.referred,
        "referral_rate": rep.referral_rate,
        "accuracy": rep.accuracy,
        "precision": rep.precision,
        "recall": rep.recall,
        "auroc": rep.auroc,
        "all_referred": rep.all_referred,
    }


def write_report_json(reports: list[CohortReport], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump([report_to_dict(r) for r in reports], fh, indent=2)


def read_report_csv(path: str | os.PathLike) -> list[CohortReport]:
    def parse(cell: str):
        return None if cell == "" else float(cell)

    reports = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(CohortReport(
                tau=float(row["tau"]),
                metric=row["metric"],
                retained=int(row["retained"]),
                referred=int(row["referred"]),
                referral_rate=float(row["referral_rate"]),
                accuracy=parse(row["accuracy"]),
                precision=parse(row["precision"]),
                recall=parse(row["recall"]),
                auroc=parse(row["auroc"]),
                all_referred=int(row["retained"]) == 0,
            ))
    return reports
