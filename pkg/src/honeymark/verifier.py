"""Black-box loss-gap verification of suspicious classifiers."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datasets import ImageSample
from .diffnet import Classifier, cross_entropy, forward, predict_proba
from .errors import FormatError, ProtocolError, RejectedInput

RESPONSE_SUM_TOL = 1e-9


class BlackBoxModel(Protocol):
    tag: str
    query_count: int

    def query(self, sample: ImageSample) -> np.ndarray: ...


def validate_response(probs, num_classes: int | None = None) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or (num_classes is not None and p.size != num_classes):
        raise ProtocolError(f"response has shape {p.shape}, expected ({num_classes},)")
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise ProtocolError("response entries must be finite and within [0, 1]")
    if abs(p.sum() - 1.0) > RESPONSE_SUM_TOL:
        raise ProtocolError(f"response sums to {p.sum():.12g}, not 1")
    return p


class ClassifierAdapter:
    """Serve an in-process Classifier through the black-box query interface."""

    def __init__(self, model: Classifier, tag: str = "model"):
        self.model = model
        self.tag = tag
        self.query_count = 0

    @property
    def num_classes(self):
        return self.model.arch.num_classes

    def query(self, sample: ImageSample) -> np.ndarray:
        self.query_count += 1
        return forward(self.model, sample)

    def query_batch(self, samples: Sequence[ImageSample]) -> np.ndarray:
        self.query_count += len(samples)
        return predict_proba(self.model, np.stack([s.pixels for s in samples]))


class ReplayAdapter:
    """Answer queries from a recorded-response CSV (``sample_id, p_0..p_{K-1}``)."""

    def __init__(self, responses: dict[str, np.ndarray], tag: str = "replay"):
        self.responses = responses
        self.tag = tag
        self.query_count = 0

    @classmethod
    def from_csv(cls, path, tag: str | None = None) -> "ReplayAdapter":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "sample_id" or not all(h == f"p_{i}" for i, h in enumerate(header[1:])):
                raise FormatError("responses.header", f"unexpected header {header}")
            responses = {}
            for row in reader:
                if len(row) != len(header):
                    raise FormatError("responses.row", f"row for {row[:1]} has {len(row)} fields")
                responses[row[0]] = np.array([float(v) for v in row[1:]])
        return cls(responses, tag or Path(path).stem)

    @property
    def num_classes(self):
        return len(next(iter(self.responses.values()))) if self.responses else None

    def query(self, sample: ImageSample) -> np.ndarray:
        self.query_count += 1
        if sample.id not in self.responses:
            raise ProtocolError(f"no recorded response for {sample.id}")
        return self.responses[sample.id].copy()


def record_responses(model: BlackBoxModel, samples: Sequence[ImageSample], path) -> Path:
    """Query each sample once and write the responses in replay format."""
    path = Path(path)
    rows = [(s.id, model.query(s)) for s in samples]
    k = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *[f"p_{i}" for i in range(k)]])
        for sid, p in rows:
            w.writerow([sid, *[repr(float(v)) for v in p]])
    return path


def _as_blackbox(model, tag="model") -> BlackBoxModel:
    return ClassifierAdapter(model, tag) if isinstance(model, Classifier) else model


def loss_gap(x: ImageSample, rest_model: Classifier, suspicious: BlackBoxModel) -> float:
    """Rest-model loss minus suspicious-model loss; large means the suspect has likely seen ``x``."""
    suspicious = _as_blackbox(suspicious)
    if x.shape != rest_model.arch.input_shape:
        raise RejectedInput(f"sample shape {x.shape} does not match {rest_model.arch.input_shape}")
    response = validate_response(suspicious.query(x), rest_model.arch.num_classes)
    return cross_entropy(forward(rest_model, x), x.label) - cross_entropy(response, x.label)


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value."""
    ordered = sorted(values)
    n = len(ordered)
    rank = max(1, math.ceil(round(q * n, 9)))
    return float(ordered[min(rank, n) - 1])


def calibrate_threshold(rest_model: Classifier, calibration_models: Sequence, honey, target_fpr: float = 0.05) -> float:
    """Pick tau as the (1 - target_fpr) nearest-rank quantile of honey loss gaps
    against owner-side reference models that never saw the honey images."""
    if not 0.0 < target_fpr < 1.0:
        raise RejectedInput(f"target_fpr must be in (0, 1), got {target_fpr}")
    if not calibration_models:
        raise RejectedInput("calibration pool is empty")
    samples = honey.honey_samples() if hasattr(honey, "honey_samples") else list(honey)
    if not samples:
        raise RejectedInput("calibration pool is empty")
    gaps = [loss_gap(s, rest_model, _as_blackbox(m, f"calibration{i}")) for i, m in enumerate(calibration_models) for s in samples]
    return nearest_rank(gaps, 1.0 - target_fpr)


@dataclass(frozen=True)
class VerificationDecision:
    sample_id: str
    loss_gap: float
    threshold: float
    verdict: int


@dataclass
class VerificationReport:
    decisions: list[VerificationDecision]
    suspicious_model_tag: str
    query_count: int
    protocol_errors: list[tuple[str, str]] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def gaps(self) -> list[float]:
        return [d.loss_gap for d in self.decisions]

    @property
    def verdicts(self) -> list[int]:
        return [d.verdict for d in self.decisions]

    def positive_rate(self) -> float:
        return float(np.mean(self.verdicts)) if self.decisions else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "loss_gap", "threshold", "verdict"])
            for d in self.decisions:
                w.writerow([d.sample_id, repr(d.loss_gap), repr(d.threshold), d.verdict])
        return path

    def summary(self) -> dict:
        return {
            "suspicious_model_tag": self.suspicious_model_tag,
            "query_count": self.query_count,
            "decisions": len(self.decisions),
            "positive_rate": self.positive_rate(),
            "protocol_error_count": len(self.protocol_errors),
            "protocol_errors": [list(e) for e in self.protocol_errors],
            **self.metrics,
        }

    def write_summary(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return path


def read_report_csv(path, tag: str | None = None) -> VerificationReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        decisions = [
            VerificationDecision(r["sample_id"], float(r["loss_gap"]), float(r["threshold"]), int(r["verdict"]))
            for r in rows
        ]
    except (KeyError, ValueError) as exc:
        raise FormatError("report_csv", str(exc)) from None
    return VerificationReport(decisions, tag or Path(path).stem, len(decisions))


def verify(honey, rest_model: Classifier, suspicious: BlackBoxModel, tau: float, tag: str | None = None) -> VerificationReport:
    """Query each honey image once and decide ``gap > tau``.

    Protocol failures are recorded per sample and excluded from the
    decisions; they still count as issued queries.
    """
    samples = honey.honey_samples() if hasattr(honey, "honey_samples") else list(honey)
    if not samples:
        raise RejectedInput("honey set is empty")
    suspicious = _as_blackbox(suspicious, tag or "suspicious")
    start = suspicious.query_count
    decisions, errors = [], []
    for s in samples:
        try:
            gap = loss_gap(s, rest_model, suspicious)
        except ProtocolError as exc:
            errors.append((s.id, str(exc)))
            continue
        decisions.append(VerificationDecision(s.id, gap, float(tau), int(gap > tau)))
    return VerificationReport(decisions, tag or suspicious.tag, suspicious.query_count - start, errors)
