"""Small differentiable classifiers in float64 numpy.

Two architectures are supported: a ReLU ``mlp`` and a ``small_cnn``
(zero-padded 3x3 convolutions, each followed by ReLU and 2x2 max-pooling,
then a dense softmax layer). Parameters live in one flat float64 array so
that models are trivially checkpointed, compared and finite-differenced.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import ImageSample
from .errors import CorruptCheckpoint, RejectedInput, TrainingDiverged, UnsupportedVersion

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

CHECKPOINT_MAGIC = b"HIMG"
CHECKPOINT_VERSION = 1

KINDS = ("mlp", "small_cnn")


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture of a classifier.

    ``hidden_sizes`` are the dense layer widths for ``mlp`` and the conv
    channel counts for ``small_cnn``.
    """

    kind: str
    input_shape: tuple[int, int, int]
    num_classes: int
    hidden_sizes: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(v) for v in self.hidden_sizes))
        if self.kind not in KINDS:
            raise RejectedInput(f"unknown architecture kind {self.kind!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise RejectedInput(f"input_shape must be 3 positive ints, got {self.input_shape}")
        if self.num_classes < 2:
            raise RejectedInput(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_sizes):
            raise RejectedInput("hidden sizes must be positive")
        if self.kind == "small_cnn":
            h, w = self.input_shape[1:]
            for _ in self.hidden_sizes:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise RejectedInput(f"input {self.input_shape} too small for {len(self.hidden_sizes)} pools")

    @classmethod
    def mlp(cls, input_shape, num_classes, hidden_sizes=(128, 64)):
        return cls("mlp", tuple(input_shape), num_classes, tuple(hidden_sizes))

    @classmethod
    def small_cnn(cls, input_shape, num_classes, channels=(16, 32)):
        return cls("small_cnn", tuple(input_shape), num_classes, tuple(channels))

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        c, h, w = self.input_shape
        if self.kind == "mlp":
            dims = [c * h * w, *self.hidden_sizes, self.num_classes]
            for din, dout in zip(dims[:-1], dims[1:]):
                shapes += [(din, dout), (dout,)]
        else:
            cin = c
            for ch in self.hidden_sizes:
                shapes += [(ch, cin, 3, 3), (ch,)]
                cin, h, w = ch, h // 2, w // 2
            shapes += [(h * w * cin, self.num_classes), (self.num_classes,)]
        return shapes

    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes())

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden_sizes": list(self.hidden_sizes),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArchDescriptor":
        return cls(doc["kind"], tuple(doc["input_shape"]), int(doc["num_classes"]), tuple(doc["hidden_sizes"]))


@dataclass(frozen=True, eq=False)
class Classifier:
    arch: ArchDescriptor
    params: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64, copy=True).ravel()
        if p.size != self.arch.param_count():
            raise RejectedInput(f"expected {self.arch.param_count()} params, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise RejectedInput("non-finite parameter values")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def initialize(cls, arch: ArchDescriptor, seed: int) -> "Classifier":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for shape in arch.param_shapes():
            if len(shape) == 1:
                chunks.append(np.zeros(shape))
            else:
                fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
                chunks.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))
        return cls(arch, np.concatenate([c.ravel() for c in chunks]), seed)

    @classmethod
    def zeros(cls, arch: ArchDescriptor) -> "Classifier":
        return cls(arch, np.zeros(arch.param_count()), 0)

    def identical_to(self, other: "Classifier") -> bool:
        return self.arch == other.arch and self.params.tobytes() == other.params.tobytes()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 60
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.learning_rate < 10.0:
            raise RejectedInput(f"learning_rate must be in (0, 10), got {self.learning_rate}")
        if self.weight_decay < 0:
            raise RejectedInput("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise RejectedInput("batch_size must be >= 1")
        if self.epochs < 1:
            raise RejectedInput(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise RejectedInput(f"unknown schedule {self.schedule!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.learning_rate, self.weight_decay, self.batch_size, self.epochs, self.schedule, seed)

    def to_json(self) -> dict:
        return dict(self.__dict__)


# Training recipe used for wide residual nets on the full testbeds.
FULL_SCALE_PRESET = TrainConfig(learning_rate=0.1, weight_decay=0.05, batch_size=256, epochs=150)
# Desk nets must reach ~100% train accuracy to memorise hard samples; lr 0.05 x 40 epochs does not.
DESK_PRESET = TrainConfig(learning_rate=0.2, weight_decay=5e-4, batch_size=64, epochs=60)
PRESETS = {"full_scale": FULL_SCALE_PRESET, "desk": DESK_PRESET}


# ---------------------------------------------------------------------------
# batched core


def _unpack(arch: ArchDescriptor, params: np.ndarray) -> list[np.ndarray]:
    out, i = [], 0
    for shape in arch.param_shapes():
        n = math.prod(shape)
        out.append(params[i : i + n].reshape(shape))
        i += n
    return out


def _check_batch(arch: ArchDescriptor, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != arch.input_shape:
        raise RejectedInput(f"input shape {X.shape[1:]} does not match model input {arch.input_shape}")
    return X


def _kernel_matrix(W):
    # (F, C, 3, 3) -> (9*C, F) with rows ordered (kh, kw, C) to match _im2col
    return W.transpose(2, 3, 1, 0).reshape(-1, W.shape[0])


def _im2col(a):
    # 3x3 windows over a zero border of 1: (B, H, W, C) -> (B*H*W, 9*C)
    B, ho, wo, C = a.shape
    a = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    if C == 1:
        cols = np.concatenate([a[:, i : i + ho, j : j + wo, :] for i in range(3) for j in range(3)], axis=-1)
    else:
        # one strided copy beats nine slices once there are several channels
        cols = sliding_window_view(a, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(B * ho * wo, 9 * C)


def _conv_forward(a, W, b):
    cols = _im2col(a)
    B, H, Wd, _ = a.shape
    z = (cols @ _kernel_matrix(W) + b).reshape(B, H, Wd, W.shape[0])
    return cols, z


def _conv_param_grad(cols, dz, W):
    dk = cols.T @ dz.reshape(-1, W.shape[0])
    return dk.reshape(3, 3, W.shape[1], W.shape[0]).transpose(3, 2, 0, 1)


def _conv_backward_input(dz, W, in_shape):
    B, ho, wo, F = dz.shape
    C = in_shape[3]
    dcols = (dz.reshape(-1, F) @ _kernel_matrix(W).T).reshape(B, ho, wo, 9, C)
    da = np.zeros((B, ho + 2, wo + 2, C))
    for k in range(9):
        i, j = divmod(k, 3)
        da[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, k, :]
    return da[:, 1:-1, 1:-1, :]


def _pool_forward(r):
    # 2x2 max-pool with floor cropping; the mask routes gradient to the first maximum
    # of each window in (0,0), (0,1), (1,0), (1,1) order
    H, W = r.shape[1], r.shape[2]
    h2, w2 = H // 2, W // 2
    quads = [r[:, i : 2 * h2 : 2, j : 2 * w2 : 2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, in_shape):
    h2, w2 = dout.shape[1], dout.shape[2]
    full = np.zeros(in_shape)
    for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
        full[:, i : 2 * h2 : 2, j : 2 * w2 : 2, :] = dout * m
    return full


def _forward(arch, params, X):
    """Return logits and the cache needed for backprop."""
    ws = _unpack(arch, params)
    B = X.shape[0]
    cache = []
    if arch.kind == "mlp":
        a = X.reshape(B, -1)
        for W, b in zip(ws[:-2:2], ws[1:-2:2]):
            z = a @ W + b
            cache.append((a, z))
            a = np.maximum(z, 0.0)
    else:
        a = X.transpose(0, 2, 3, 1)
        for W, b in zip(ws[:-2:2], ws[1:-2:2]):
            cols, z = _conv_forward(a, W, b)
            pooled, idx = _pool_forward(np.maximum(z, 0.0))
            cache.append((a.shape, cols, z, idx))
            a = pooled
        cache.append(a.shape)
        a = a.reshape(B, -1)
    cache.append(a)
    return a @ ws[-2] + ws[-1], cache


def _backward(arch, params, cache, dlogits, need_params=True, need_input=False):
    ws = _unpack(arch, params)
    grads = [None] * len(ws) if need_params else None
    a_last = cache[-1]
    if need_params:
        grads[-2] = a_last.T @ dlogits
        grads[-1] = dlogits.sum(axis=0)
    da = dlogits @ ws[-2].T
    n_hidden = len(arch.hidden_sizes)
    dx = None
    if arch.kind == "mlp":
        for layer in reversed(range(n_hidden)):
            a, z = cache[layer]
            dz = da * (z > 0)
            if need_params:
                grads[2 * layer] = a.T @ dz
                grads[2 * layer + 1] = dz.sum(axis=0)
            if layer > 0 or need_input:
                da = dz @ ws[2 * layer].T
        if need_input:
            dx = da.reshape((-1, *arch.input_shape))
    else:
        da = da.reshape(cache[-2])
        for layer in reversed(range(n_hidden)):
            in_shape, cols, z, idx = cache[layer]
            dz = _pool_backward(da, idx, z.shape) * (z > 0)
            W = ws[2 * layer]
            if need_params:
                grads[2 * layer] = _conv_param_grad(cols, dz, W)
                grads[2 * layer + 1] = dz.sum(axis=(0, 1, 2))
            if layer > 0 or need_input:
                da = _conv_backward_input(dz, W, in_shape)
        if need_input:
            dx = da.transpose(0, 3, 1, 2)
    flat = np.concatenate([g.ravel() for g in grads]) if need_params else None
    return flat, dx


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_terms(logits, y):
    """Per-sample clamped cross-entropy and d(loss_i)/d(logits_i)."""
    logp = _log_softmax(logits)
    rows = np.arange(len(y))
    picked = logp[rows, y]
    losses = -np.maximum(picked, LOG_PROB_FLOOR)
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    # the clamp is flat below the floor, so its derivative is zero there
    dlogits[picked < LOG_PROB_FLOOR] = 0.0
    return losses, dlogits


def _labels(arch, y, n):
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != n:
        raise RejectedInput(f"{y.shape[0]} labels for {n} inputs")
    if np.any((y < 0) | (y >= arch.num_classes)):
        raise RejectedInput(f"label outside [0, {arch.num_classes})")
    return y


def predict_proba(model: Classifier, X: np.ndarray) -> np.ndarray:
    X = _check_batch(model.arch, X)
    logits, _ = _forward(model.arch, model.params, X)
    return np.exp(_log_softmax(logits))


def sample_losses(model: Classifier, X: np.ndarray, y) -> np.ndarray:
    X = _check_batch(model.arch, X)
    y = _labels(model.arch, y, X.shape[0])
    logits, _ = _forward(model.arch, model.params, X)
    return _loss_terms(logits, y)[0]


def input_gradients(model: Classifier, X: np.ndarray, y) -> np.ndarray:
    """Gradient of each sample's own loss with respect to its pixels."""
    X = _check_batch(model.arch, X)
    y = _labels(model.arch, y, X.shape[0])
    logits, cache = _forward(model.arch, model.params, X)
    _, dlogits = _loss_terms(logits, y)
    _, dx = _backward(model.arch, model.params, cache, dlogits, need_params=False, need_input=True)
    return dx


def loss_and_param_gradient(arch: ArchDescriptor, params: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean clamped cross-entropy over the batch and its parameter gradient."""
    logits, cache = _forward(arch, params, X)
    losses, dlogits = _loss_terms(logits, y)
    grad, _ = _backward(arch, params, cache, dlogits / len(y))
    return losses.mean(), grad


# ---------------------------------------------------------------------------
# single-sample API


def forward(model: Classifier, sample: ImageSample) -> np.ndarray:
    """Probability vector for one sample."""
    return predict_proba(model, sample.pixels)[0]


def cross_entropy(pred: np.ndarray, label: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= label < pred.shape[-1]:
        raise RejectedInput(f"label {label} outside [0, {pred.shape[-1]})")
    return float(-math.log(max(float(pred[label]), PROB_FLOOR)))


def param_gradients(model: Classifier, batch: Sequence[ImageSample]) -> np.ndarray:
    if not batch:
        raise RejectedInput("empty batch")
    X = _check_batch(model.arch, np.stack([s.pixels for s in batch]))
    y = _labels(model.arch, [s.label for s in batch], len(batch))
    return loss_and_param_gradient(model.arch, model.params, X, y)[1]


def input_gradient(model: Classifier, sample: ImageSample) -> np.ndarray:
    return input_gradients(model, sample.pixels, [sample.label])[0]


# ---------------------------------------------------------------------------
# training


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Batch order for one epoch from a Philox stream keyed on (seed, epoch)."""
    key = np.random.SeedSequence([seed, epoch]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def learning_rate_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train_arrays(arch, X, y, cfg: TrainConfig, history: list | None = None) -> Classifier:
    X = _check_batch(arch, X)
    y = _labels(arch, y, X.shape[0])
    if X.shape[0] == 0:
        raise RejectedInput("cannot train on an empty dataset")
    model = Classifier.initialize(arch, cfg.seed)
    params = model.params.copy()
    n = X.shape[0]
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = epoch_permutation(cfg.seed, epoch, n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_param_gradient(arch, params, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            lr = learning_rate_at(cfg, step, total)
            params -= lr * (grad + cfg.weight_decay * params)
            running += loss * len(idx)
            step += 1
        if not np.all(np.isfinite(params)):
            raise TrainingDiverged(epoch)
        if history is not None:
            history.append(running / n)
    return Classifier(arch, params, cfg.seed)


def train(arch: ArchDescriptor, data, cfg: TrainConfig, history: list | None = None) -> Classifier:
    """Train from a fresh seeded init with minibatch SGD.

    ``data`` is any sequence of ImageSample (a Dataset works). Weight decay
    enters as ``wd * params`` added to the gradient.
    """
    samples = list(data)
    if not samples:
        raise RejectedInput("cannot train on an empty dataset")
    X = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples])
    return train_arrays(arch, X, y, cfg, history)


def accuracy(model: Classifier, data) -> float:
    samples = list(data)
    X = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples])
    return float(np.mean(predict_proba(model, X).argmax(axis=1) == y))


# ---------------------------------------------------------------------------
# checkpoints: "HIMG" | u16 version | u32 json length | json | u64 count | f64[count], little-endian


def save_checkpoint(model: Classifier, path) -> Path:
    path = Path(path)
    meta = json.dumps({**model.arch.to_json(), "init_seed": model.init_seed}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<Q", model.params.size))
        fh.write(model.params.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> Classifier:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic bytes")
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version > CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version} > supported {CHECKPOINT_VERSION}")
    if version < 1:
        raise CorruptCheckpoint(f"{path}: invalid version {version}")
    pos = 10
    if len(raw) < pos + meta_len + 8:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        arch = ArchDescriptor.from_json(meta)
    except (ValueError, KeyError, RejectedInput) as exc:
        raise CorruptCheckpoint(f"{path}: bad architecture record ({exc})") from None
    pos += meta_len
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if count != arch.param_count():
        raise CorruptCheckpoint(f"{path}: {count} params, architecture needs {arch.param_count()}")
    if len(raw) != pos + 8 * count:
        raise CorruptCheckpoint(f"{path}: payload is {len(raw) - pos} bytes, expected {8 * count}")
    params = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
    try:
        return Classifier(arch, params, int(meta.get("init_seed", 0)))
    except RejectedInput as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
