"""Honey image generation by alternating retraining and projected sign-gradient ascent.

Each outer iteration trains a fresh in-model on the rest set plus the
current honey images, then moves every honey image one signed step in the
direction that increases

    rest-model loss - in-model loss

and projects it back into the L-inf ball of radius epsilon around its
original pixels (and into [0, 1]).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import ImageSample
from .diffnet import (
    ArchDescriptor,
    Classifier,
    TrainConfig,
    cross_entropy,
    forward,
    input_gradients,
    sample_losses,
    train_arrays,
)
from .errors import DegenerateGradient, RejectedInput, TrainingDiverged
from .seeding import derive_seed

BUDGET_SLACK = 1e-12


@dataclass(frozen=True)
class HoneyGenConfig:
    iterations: int = 20
    epsilon: float = 4 / 255
    step_size: float = 0.4 / 255
    inner_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise RejectedInput(f"iterations must be >= 0, got {self.iterations}")
        if not self.epsilon >= 0:
            raise RejectedInput(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.step_size > 0:
            raise RejectedInput(f"step_size must be > 0, got {self.step_size}")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "inner_train": self.inner_train.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HoneyGenConfig":
        return cls(
            int(doc["iterations"]),
            float(doc["epsilon"]),
            float(doc["step_size"]),
            TrainConfig(**doc["inner_train"]),
            int(doc["seed"]),
        )


@dataclass(frozen=True, eq=False)
class HoneyRecord:
    sample_id: str
    original: ImageSample
    current: ImageSample
    delta_loss_trace: tuple[float, ...] = ()

    @property
    def label(self) -> int:
        return self.original.label

    def linf_offset(self) -> float:
        return float(np.max(np.abs(self.current.pixels - self.original.pixels)))


@dataclass(frozen=True, eq=False)
class HoneySet:
    records: tuple[HoneyRecord, ...]
    rest_model: Classifier
    config: HoneyGenConfig
    rest_model_path: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def honey_samples(self) -> list[ImageSample]:
        return [r.current for r in self.records]

    def original_samples(self) -> list[ImageSample]:
        return [r.original for r in self.records]


def differential_loss(x: ImageSample, rest_model: Classifier, in_model: Classifier) -> float:
    """Rest-model loss minus in-model loss on one sample (may be negative)."""
    return cross_entropy(forward(rest_model, x), x.label) - cross_entropy(forward(in_model, x), x.label)


def _project(stepped: np.ndarray, original: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(original + np.clip(stepped - original, -epsilon, epsilon), 0.0, 1.0)


def pgd_step(current: ImageSample, grad_delta: np.ndarray, original: ImageSample, cfg: HoneyGenConfig) -> ImageSample:
    """One signed ascent step on the differential loss, projected around ``original``."""
    grad_delta = np.asarray(grad_delta, dtype=np.float64)
    if grad_delta.shape != current.pixels.shape or original.pixels.shape != current.pixels.shape:
        raise RejectedInput("gradient, current and original shapes differ")
    if not np.all(np.isfinite(grad_delta)):
        raise DegenerateGradient(f"non-finite input gradient for sample {current.id}")
    stepped = current.pixels + cfg.step_size * np.sign(grad_delta)
    return ImageSample(current.id, _project(stepped, original.pixels, cfg.epsilon), original.label)


def _check_budget(X, X0, epsilon, t):
    offset = float(np.max(np.abs(X - X0))) if X.size else 0.0
    if offset > epsilon + BUDGET_SLACK:
        raise AssertionError(f"iteration {t}: L-inf offset {offset} exceeds budget {epsilon}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise AssertionError(f"iteration {t}: pixels left [0, 1]")


def generate_honey(
    hard: Sequence[ImageSample],
    rest: Sequence[ImageSample],
    arch: ArchDescriptor,
    cfg: HoneyGenConfig,
    rest_model: Classifier | None = None,
    on_iteration: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> HoneySet:
    """Run the alternating honey optimisation.

    The rest model is trained once on ``rest`` (unless supplied). At
    iteration ``t`` a fresh in-model, seeded from ``(cfg.seed, t)``, is
    trained on ``rest`` plus the current honey images; then every honey
    image takes one projected step. ``on_iteration(t, delta_losses, pixels)``
    is called after each step with the pre-step differential losses and the
    updated (N, C, H, W) honey pixels.
    """
    hard = list(hard)
    rest = list(rest)
    if not hard:
        raise RejectedInput("hard sample set is empty")
    hard_ids = [s.id for s in hard]
    if len(set(hard_ids)) != len(hard_ids):
        raise RejectedInput("duplicate hard sample ids")
    if set(hard_ids) & {s.id for s in rest}:
        raise RejectedInput("hard and rest sets overlap")

    X_rest = np.stack([s.pixels for s in rest]) if rest else np.zeros((0, *arch.input_shape))
    y_rest = np.array([s.label for s in rest], dtype=np.int64)
    X0 = np.stack([s.pixels for s in hard])
    y = np.array([s.label for s in hard], dtype=np.int64)

    if rest_model is None:
        rest_model = train_arrays(arch, X_rest, y_rest, cfg.inner_train.with_seed(derive_seed(cfg.seed, "rest")))

    X = X0.copy()
    traces = [[] for _ in hard]
    for t in range(cfg.iterations):
        in_cfg = cfg.inner_train.with_seed(derive_seed(cfg.seed, "in", t))
        try:
            in_model = train_arrays(arch, np.concatenate([X_rest, X]), np.concatenate([y_rest, y]), in_cfg)
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.epoch, iteration=t) from None
        delta = sample_losses(rest_model, X, y) - sample_losses(in_model, X, y)
        grad = input_gradients(rest_model, X, y) - input_gradients(in_model, X, y)
        if not np.all(np.isfinite(grad)):
            raise DegenerateGradient(f"non-finite differential-loss gradient at iteration {t}")
        X = _project(X + cfg.step_size * np.sign(grad), X0, cfg.epsilon)
        _check_budget(X, X0, cfg.epsilon, t)
        for trace, d in zip(traces, delta):
            trace.append(float(d))
        if on_iteration is not None:
            on_iteration(t, delta, X)

    records = tuple(
        HoneyRecord(s.id, s, s if cfg.iterations == 0 else ImageSample(s.id, X[i], s.label), tuple(traces[i]))
        for i, s in enumerate(hard)
    )
    return HoneySet(records, rest_model, cfg)


def mean_delta_loss(samples: Sequence[ImageSample], rest_model: Classifier, in_model: Classifier) -> float:
    X = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples])
    return float(np.mean(sample_losses(rest_model, X, y) - sample_losses(in_model, X, y)))

