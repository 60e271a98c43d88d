"""Comparison methods: loss-based membership inference and a BadNets trigger watermark."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Dataset, ImageSample, round_half_up
from .diffnet import ArchDescriptor, Classifier, TrainConfig, cross_entropy, forward, train
from .errors import RejectedInput
from .seeding import derive_seed
from .verifier import ClassifierAdapter, validate_response

CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")


@dataclass(frozen=True)
class TriggerConfig:
    patch_size: int = 3
    patch_value: float = 1.0
    corner: str = "bottom_right"
    target_label: int = 0
    poison_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "poison_ids", tuple(self.poison_ids))
        if self.patch_size < 1:
            raise RejectedInput("patch_size must be >= 1")
        if not 0.0 <= self.patch_value <= 1.0:
            raise RejectedInput("patch_value must be in [0, 1]")
        if self.corner not in CORNERS:
            raise RejectedInput(f"corner must be one of {CORNERS}")
        if self.target_label < 0:
            raise RejectedInput("target_label must be >= 0")

    def to_json(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "patch_value": self.patch_value,
            "corner": self.corner,
            "target_label": self.target_label,
            "poison_ids": list(self.poison_ids),
        }


def patch_slices(shape, cfg: TriggerConfig):
    _, h, w = shape
    s = cfg.patch_size
    if s > h or s > w:
        raise RejectedInput(f"{s}x{s} patch does not fit a {h}x{w} image")
    rows = slice(h - s, h) if cfg.corner.startswith("bottom") else slice(0, s)
    cols = slice(w - s, w) if cfg.corner.endswith("right") else slice(0, s)
    return rows, cols


def apply_trigger(sample: ImageSample, cfg: TriggerConfig, relabel: bool = False) -> ImageSample:
    rows, cols = patch_slices(sample.shape, cfg)
    px = sample.pixels.copy()
    px[:, rows, cols] = cfg.patch_value
    return ImageSample(sample.id, px, cfg.target_label if relabel else sample.label)


def choose_poison_ids(pool: Dataset, rate: float, target_label: int, seed: int) -> tuple[str, ...]:
    """Uniformly draw ``round(rate * |pool|)`` ids whose label is not the target."""
    candidates = sorted(s.id for s in pool if s.label != target_label)
    n = min(round_half_up(rate * len(pool)), len(candidates))
    picked = np.random.default_rng(seed).choice(len(candidates), size=n, replace=False)
    return tuple(candidates[i] for i in sorted(picked))


def badnets_poison(data: Dataset, cfg: TriggerConfig) -> Dataset:
    """Stamp the trigger on every poison id and relabel it to the target class."""
    if cfg.target_label >= data.num_classes:
        raise RejectedInput(f"target_label {cfg.target_label} >= num_classes {data.num_classes}")
    if data.shape is not None:
        patch_slices(data.shape, cfg)
    missing = [i for i in cfg.poison_ids if i not in data]
    if missing:
        raise RejectedInput(f"poison ids not in dataset: {missing[:5]}")
    if not cfg.poison_ids:
        return data
    return data.replace([apply_trigger(data[i], cfg, relabel=True) for i in cfg.poison_ids])


@dataclass
class BadNetsResult:
    score: float
    verdict: int
    threshold: float
    target_probs: list[float] = field(default_factory=list)
    query_count: int = 0


def badnets_verify(
    suspicious,
    probe_images: Sequence[ImageSample],
    cfg: TriggerConfig,
    base_rate: float = 0.0,
    margin: float = 0.2,
) -> BadNetsResult:
    """Attack-success rate of triggered probes; verdict 1 when it exceeds ``base_rate + margin``.

    Only triggered copies of the probes are ever sent to the model.
    """
    probes = list(probe_images)
    if not probes:
        raise RejectedInput("empty probe set")
    if any(p.label == cfg.target_label for p in probes):
        raise RejectedInput("probe set contains target-class samples")
    if isinstance(suspicious, Classifier):
        suspicious = ClassifierAdapter(suspicious)
    start = suspicious.query_count
    hits, target_probs = [], []
    for p in probes:
        resp = validate_response(suspicious.query(apply_trigger(p, cfg)))
        hits.append(int(np.argmax(resp)) == cfg.target_label)
        target_probs.append(float(resp[cfg.target_label]))
    score = float(np.mean(hits))
    threshold = base_rate + margin
    return BadNetsResult(score, int(score > threshold), threshold, target_probs, suspicious.query_count - start)


@dataclass(frozen=True)
class MIConfig:
    reference_arch: ArchDescriptor
    reference_train: TrainConfig
    num_reference_pairs: int = 1

    def __post_init__(self):
        if self.num_reference_pairs < 1:
            raise RejectedInput("num_reference_pairs must be >= 1")


def train_out_references(rest_pool: Dataset, cfg: MIConfig) -> list[Classifier]:
    return [
        train(cfg.reference_arch, rest_pool, cfg.reference_train.with_seed(derive_seed(cfg.reference_train.seed, "mi_ref", i)))
        for i in range(cfg.num_reference_pairs)
    ]


def mi_loss_scores(
    samples: Sequence[ImageSample],
    suspicious,
    cfg: MIConfig,
    rest_pool: Dataset,
    references: Sequence[Classifier] | None = None,
) -> np.ndarray:
    """Mean out-reference loss minus suspicious loss, per sample.

    References are trained on ``rest_pool``, which must not contain the
    scored samples. Pass ``references`` to reuse already trained models.
    """
    samples = list(samples)
    overlap = [s.id for s in samples if s.id in rest_pool]
    if overlap:
        raise RejectedInput(f"scored samples present in rest_pool: {overlap[:5]}")
    if references is None:
        references = train_out_references(rest_pool, cfg)
    if isinstance(suspicious, Classifier):
        suspicious = ClassifierAdapter(suspicious)
    scores = []
    for s in samples:
        out_loss = np.mean([cross_entropy(forward(r, s), s.label) for r in references])
        sus_loss = cross_entropy(validate_response(suspicious.query(s)), s.label)
        scores.append(out_loss - sus_loss)
    return np.array(scores)


def write_scores_csv(rows: Sequence[tuple[str, str, float]], path) -> Path:
    """Rows of (sample_id, method, score)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "method", "score"])
        for sid, method, score in rows:
            w.writerow([sid, method, repr(float(score))])
    return path
