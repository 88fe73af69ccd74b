"""Per-pixel uncertainty estimators over MC-dropout sample stacks.

Four measures plus their sum, each reduced to a case-level score:

- aleatoric: mean over samples of diag(p) - p p^T (inherent data noise)
- epistemic: population covariance of the samples (model uncertainty)
- entropy: Shannon entropy of the predictive mean, in nats
- mutual-information: entropy minus expected per-sample entropy
- combined: aleatoric + epistemic

The aleatoric and epistemic matrices sum to diag(pbar) - pbar pbar^T per
pixel; that identity is the main correctness oracle in the tests.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .rng import derive_seed
from .tensor import TensorError, entropy_field
from .unet import ModelParams, SampleStack, mc_sample

METRICS = ("aleatoric", "epistemic", "entropy", "mutual-information", "combined")

# largest attainable scalar value per metric for two classes: entropy-like
# metrics peak at ln 2 (uniform), variance-like ones at 0.25 (p = 1/2)
THEORETICAL_MAX = {
    "aleatoric": 0.25,
    "epistemic": 0.25,
    "entropy": math.log(2.0),
    "mutual-information": math.log(2.0),
    "combined": 0.25,
}

_MATRIX_METRICS = ("aleatoric", "epistemic", "combined")


@dataclass
class UncertaintyMap:
    """One metric's per-pixel field; matrix-valued metrics carry [K,K,H,W] too."""

    metric: str
    scalar_field: np.ndarray
    matrix_field: np.ndarray | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise TensorError(f"unknown metric {self.metric!r}")
        f = self.scalar_field
        if f.ndim != 2:
            raise TensorError("scalar field must be [H,W]")
        if not np.all(np.isfinite(f)):
            raise TensorError(f"{self.metric}: non-finite scalar field")
        if f.size and float(f.min()) < 0.0:
            raise TensorError(f"{self.metric}: negative scalar field value {float(f.min())}")
        k = None
        if self.matrix_field is not None:
            m = self.matrix_field
            if m.ndim != 4 or m.shape[0] != m.shape[1] or m.shape[2:] != f.shape:
                raise TensorError("matrix field must be [K,K,H,W] over the same grid")
            if not np.all(np.isfinite(m)):
                raise TensorError(f"{self.metric}: non-finite matrix field")
            k = m.shape[0]
        if self.metric in ("entropy", "mutual-information"):
            if f.size and float(f.max()) > math.log(2.0) + 1e-9:
                raise TensorError(f"{self.metric}: field exceeds ln 2")
        elif k == 2 and f.size and float(f.max()) > 0.25 + 1e-9:
            raise TensorError(f"{self.metric}: field exceeds 0.25 for two classes")


def _probs64(stack: SampleStack) -> np.ndarray:
    return stack.probs.astype(np.float64)


def _normalize(p: np.ndarray, axis: int) -> np.ndarray:
    # float32 softmax fields carry channel sums of 1 +/- ~1e-7; the entropy
    # family reads them as distributions, so renormalize in float64 (else
    # H can exceed ln 2 by more than honest rounding)
    return p / p.sum(axis=axis, keepdims=True)


def _second_moment(p: np.ndarray) -> np.ndarray:
    # [T,K,H,W] -> mean over t of the outer products, [K,K,H,W]
    return np.einsum("tkhw,tlhw->klhw", p, p) / p.shape[0]


def aleatoric_map(stack: SampleStack) -> UncertaintyMap:
    """Mean over samples of diag(p) - p p^T; scalar = foreground diagonal."""
    p = _probs64(stack)
    pbar = p.mean(axis=0)
    mat = -_second_moment(p)
    for k in range(p.shape[1]):
        mat[k, k] += pbar[k]
    return UncertaintyMap("aleatoric", mat[1, 1], mat)


def epistemic_map(stack: SampleStack) -> UncertaintyMap:
    """Population covariance (divisor T) of the samples; scalar = foreground variance."""
    p = _probs64(stack)
    d = p - p.mean(axis=0)
    mat = _second_moment(d)
    return UncertaintyMap("epistemic", mat[1, 1], mat)


def entropy_map(stack: SampleStack) -> UncertaintyMap:
    """Entropy (nats) of the predictive mean distribution."""
    pbar = _normalize(_probs64(stack).mean(axis=0), 0)
    return UncertaintyMap("entropy", entropy_field(pbar, axis=0))


def mutual_information_map(stack: SampleStack) -> UncertaintyMap:
    """Predictive entropy minus expected per-sample entropy.

    Computed as the mean over samples of H[pbar] - H[p_t], which is zero
    exactly when all slabs are identical: the raw mean of T identical
    float32-sourced slabs is exact in float64, so pbar normalizes to the
    same bits as each slab. Values negative by at most 1e-9 are
    floating-point noise and clamp to zero; anything lower is a bug and
    raises.
    """
    p = _probs64(stack)
    h_mean = entropy_field(_normalize(p.mean(axis=0), 0), axis=0)
    h_each = entropy_field(_normalize(p, 1), axis=1)
    mi = (h_mean[None] - h_each).mean(axis=0)
    low = float(mi.min()) if mi.size else 0.0
    if low < -1e-9:
        raise TensorError(f"mutual information negative beyond tolerance: {low}")
    return UncertaintyMap("mutual-information", np.maximum(mi, 0.0))


def combined_map(stack: SampleStack) -> UncertaintyMap:
    """Elementwise aleatoric + epistemic; equals diag(pbar) - pbar pbar^T."""
    a = aleatoric_map(stack)
    e = epistemic_map(stack)
    return UncertaintyMap(
        "combined", a.scalar_field + e.scalar_field, a.matrix_field + e.matrix_field
    )


_MAP_FNS = {
    "aleatoric": aleatoric_map,
    "epistemic": epistemic_map,
    "entropy": entropy_map,
    "mutual-information": mutual_information_map,
    "combined": combined_map,
}


def compute_map(stack: SampleStack, metric: str) -> UncertaintyMap:
    if metric not in _MAP_FNS:
        raise TensorError(f"unknown metric {metric!r}")
    return _MAP_FNS[metric](stack)


def all_maps(stack: SampleStack) -> dict[str, UncertaintyMap]:
    return {metric: _MAP_FNS[metric](stack) for metric in METRICS}


# ---------------------------------------------------------------------------
# case-level reduction


def case_score(umap: UncertaintyMap, reduction: str = "mean") -> float:
    """Reduce the scalar field to one non-negative number.

    ``reduction`` is "mean", "max", or "quantile:<q>" with q in [0,1].
    """
    f = umap.scalar_field
    if f.size == 0:
        raise TensorError("cannot reduce an empty field")
    if reduction == "mean":
        return float(f.mean())
    if reduction == "max":
        return float(f.max())
    if reduction.startswith("quantile:"):
        q = float(reduction.split(":", 1)[1])
        if not 0.0 <= q <= 1.0:
            raise TensorError(f"quantile must lie in [0,1], got {q}")
        return float(np.quantile(f, q))
    raise TensorError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# sample-count sweep


@dataclass
class SweepRecord:
    """Eval-set summary for one sample count N."""

    n: int
    means: dict[str, float]
    stds: dict[str, float]
    error: float
    runtime_s: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        for metric in METRICS:
            if metric not in self.means or metric not in self.stds:
                raise ValueError(f"missing metric {metric}")
            if self.stds[metric] < 0:
                raise ValueError("std must be >= 0")
        if not 0.0 <= self.error <= 1.0:
            raise ValueError("error must lie in [0,1]")


def sample_count_sweep(
    params: ModelParams,
    images,
    masks,
    n_grid=range(1, 31),
    dropout_p: float = 0.25,
    seed: int = 42,
    reduction: str = "mean",
) -> list[SweepRecord]:
    """Re-sample every eval case at each N and summarize the case scores.

    Per (N, case) the stack uses an independently derived seed, so records
    are independent estimates rather than nested subsets. Error is the
    pooled misclassification rate of argmax over the predictive mean.
    """
    n_values = sorted(set(int(n) for n in n_grid))
    if not n_values or n_values[0] < 1:
        raise ValueError("N grid must contain integers >= 1")
    records = []
    for n in n_values:
        start = time.perf_counter()
        scores: dict[str, list[float]] = {metric: [] for metric in METRICS}
        wrong = 0
        total = 0
        for i, (image, mask) in enumerate(zip(images, masks)):
            stack = mc_sample(params, image, n, dropout_p, derive_seed(seed, "sweep", n, i))
            for metric, umap in all_maps(stack).items():
                scores[metric].append(case_score(umap, reduction))
            pred = np.argmax(stack.probs.mean(axis=0), axis=0)
            wrong += int(np.sum(pred != mask))
            total += mask.size
        records.append(
            SweepRecord(
                n=n,
                means={m: float(np.mean(v)) for m, v in scores.items()},
                stds={m: float(np.std(v)) for m, v in scores.items()},
                error=wrong / total,
                runtime_s=time.perf_counter() - start,
            )
        )
    return records


SWEEP_CSV_HEADER = ["N", "metric", "mean", "std", "error", "runtime_s"]


def write_sweep_csv(records: list[SweepRecord], path: str | os.PathLike) -> None:
    """One row per (N, metric); error and runtime repeat across a record's rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for rec in records:
            for metric in METRICS:
                writer.writerow(
                    [rec.n, metric, repr(rec.means[metric]), repr(rec.stds[metric]),
                     repr(rec.error), repr(rec.runtime_s)]
                )


def write_sweep_json(records: list[SweepRecord], path: str | os.PathLike) -> None:
    payload = [
        {"N": rec.n, "means": rec.means, "stds": rec.stds,
         "error": rec.error, "runtime_s": rec.runtime_s}
        for rec in records
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def read_sweep_csv(path: str | os.PathLike) -> list[SweepRecord]:
    rows = list(csv.DictReader(open(path, newline="")))
    by_n: dict[int, dict] = {}
    for row in rows:
        entry = by_n.setdefault(
            int(row["N"]),
            {"means": {}, "stds": {}, "error": float(row["error"]), "runtime_s": float(row["runtime_s"])},
        )
        entry["means"][row["metric"]] = float(row["mean"])
        entry["stds"][row["metric"]] = float(row["std"])
    return [
        SweepRecord(n=n, means=e["means"], stds=e["stds"], error=e["error"], runtime_s=e["runtime_s"])
        for n, e in sorted(by_n.items())
    ]
