"""Verification effectiveness (TPR, TNR, AUROC) and data integrity (HL, STL) metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .datasets import ImageSample
from .errors import ProtocolError, RejectedInput

DISTANCES = ("mean_abs", "rmse", "max_abs")
DEFAULT_LAMBDA = 10.0


@dataclass(frozen=True)
class ScoredOutcome:
    score: float
    truth: int


@dataclass(frozen=True)
class IntegrityReport:
    hl: float
    stl: float
    distance_kind: str
    lam: float


def tpr_tnr(verdicts: Sequence[int], truths: Sequence[int]) -> tuple[float, float]:
    v = np.asarray(verdicts, dtype=int)
    t = np.asarray(truths, dtype=int)
    if v.shape != t.shape:
        raise RejectedInput("verdicts and truths differ in length")
    pos, neg = t == 1, t == 0
    if not pos.any() or not neg.any():
        raise RejectedInput("need at least one positive and one negative truth")
    return float(np.mean(v[pos] == 1)), float(np.mean(v[neg] == 0))


def auroc(outcomes: Iterable[ScoredOutcome]) -> float:
    """Tie-aware Mann-Whitney AUROC: P(pos > neg) + 0.5 * P(pos == neg)."""
    outcomes = list(outcomes)
    scores = np.array([o.score for o in outcomes], dtype=np.float64)
    truth = np.array([o.truth for o in outcomes], dtype=int)
    n_pos, n_neg = int((truth == 1).sum()), int((truth == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise RejectedInput("AUROC needs both classes")
    if not np.all(np.isfinite(scores)):
        raise RejectedInput("AUROC scores must be finite")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[truth == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_from_scores(positive: Sequence[float], negative: Sequence[float]) -> float:
    return auroc([ScoredOutcome(float(s), 1) for s in positive] + [ScoredOutcome(float(s), 0) for s in negative])


def _argmax_hits(predictions, labels):
    # np.argmax returns the lowest index among tied maxima
    return [int(np.argmax(p)) == int(y) for p, y in zip(predictions, labels)]


def harmlessness_with_errors(samples, model, labels: Sequence[int] | None = None) -> tuple[float, int]:
    """Accuracy of ``model`` on ``samples`` plus the number of failed queries.

    ``samples`` may be a HoneySet (its current images are queried) or a list
    of ImageSample. ``labels`` defaults to each sample's own label.
    """
    if hasattr(samples, "honey_samples"):
        samples = samples.honey_samples()
    samples = list(samples)
    if not samples:
        raise RejectedInput("no samples to evaluate")
    labels = [s.label for s in samples] if labels is None else list(labels)
    preds, kept, errors = [], [], 0
    for s, y in zip(samples, labels):
        try:
            preds.append(model.query(s))
            kept.append(y)
        except ProtocolError:
            errors += 1
    if not preds:
        raise RejectedInput("every query failed")
    return float(np.mean(_argmax_hits(preds, kept))), errors


def harmlessness(samples, model, labels: Sequence[int] | None = None) -> float:
    return harmlessness_with_errors(samples, model, labels)[0]


def image_distance(a: np.ndarray, b: np.ndarray, kind: str = "mean_abs") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInput(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if kind == "mean_abs":
        return float(diff.mean())
    if kind == "rmse":
        return float(np.sqrt(np.mean(diff**2)))
    if kind == "max_abs":
        return float(diff.max())
    raise RejectedInput(f"unknown distance kind {kind!r}")


def stealthiness(original: ImageSample, modified: ImageSample, distance_kind: str = "mean_abs", lam: float = DEFAULT_LAMBDA) -> float:
    """exp(-lam * d(original, modified)) with a simple pixel distance in place of a perceptual one."""
    if not lam > 0:
        raise RejectedInput(f"lambda must be > 0, got {lam}")
    return math.exp(-lam * image_distance(original.pixels, modified.pixels, distance_kind))


def mean_stealthiness(pairs, distance_kind="mean_abs", lam=DEFAULT_LAMBDA) -> float:
    return float(np.mean([stealthiness(o, m, distance_kind, lam) for o, m in pairs]))


def summary(
    tpr=None, tnr=None, auroc=None, hl=None, stl=None,
    distance_kind="mean_abs", lam=DEFAULT_LAMBDA, n_pos=0, n_neg=0, protocol_error_count=0,
) -> dict:
    """Metrics summary record in the persisted JSON layout."""
    return {
        "tpr": tpr,
        "tnr": tnr,
        "auroc": auroc,
        "hl": hl,
        "stl": stl,
        "distance_kind": distance_kind,
        "lambda": lam,
        "n_pos": n_pos,
        "n_neg": n_neg,
        "protocol_error_count": protocol_error_count,
    }
