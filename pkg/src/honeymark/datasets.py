"""Image samples, dataset loaders, synthetic data and split planning."""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, RejectedInput

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image with pixels in [0, 1], shape (channels, height, width)."""

    id: str
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) < 1:
            raise RejectedInput(f"sample {self.id}: pixels must be (C, H, W), got {px.shape}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise RejectedInput(f"sample {self.id}: pixels outside [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", int(self.label))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(self.id, pixels, self.label)

    def identical_to(self, other: "ImageSample") -> bool:
        return (
            self.id == other.id
            and self.label == other.label
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[ImageSample, ...]
    num_classes: int
    name: str = "dataset"
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if self.num_classes < 2:
            raise RejectedInput(f"num_classes must be >= 2, got {self.num_classes}")
        index = {}
        for i, s in enumerate(samples):
            if s.id in index:
                raise RejectedInput(f"duplicate sample id {s.id!r}")
            if not 0 <= s.label < self.num_classes:
                raise RejectedInput(f"sample {s.id}: label {s.label} out of range")
            if s.shape != samples[0].shape:
                raise RejectedInput(f"sample {s.id}: shape {s.shape} != {samples[0].shape}")
            index[s.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __contains__(self, sample_id):
        return sample_id in self._index

    def __getitem__(self, sample_id: str) -> ImageSample:
        return self.samples[self._index[sample_id]]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def shape(self):
        return self.samples[0].shape if self.samples else None

    def subset(self, ids: Iterable[str], name: str | None = None) -> "Dataset":
        return Dataset(tuple(self[i] for i in ids), self.num_classes, name or self.name)

    def replace(self, replacements: Sequence[ImageSample], name: str | None = None) -> "Dataset":
        """Swap in new versions of samples, matched by id, keeping order."""
        by_id = {s.id: s for s in replacements}
        unknown = set(by_id) - set(self._index)
        if unknown:
            raise RejectedInput(f"replacement ids not in dataset: {sorted(unknown)[:5]}")
        return Dataset(
            tuple(by_id.get(s.id, s) for s in self.samples), self.num_classes, name or self.name
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([s.pixels for s in self.samples]) if self.samples else np.zeros((0,))
        y = np.array([s.label for s in self.samples], dtype=np.int64)
        return X, y


def concat(parts: Sequence[Dataset], name: str) -> Dataset:
    samples = [s for d in parts for s in d.samples]
    return Dataset(tuple(samples), parts[0].num_classes, name)


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(spec: dict, seed: int) -> Dataset:
    """Render class-conditional Gaussian blobs on a square canvas.

    Class ``k`` has its blob centred on a circle of radius
    ``class_separation`` pixels around the image centre, at angle
    ``2*pi*k/K``. Every sample jitters the centre (``jitter`` pixels std),
    draws a random amplitude in [0.6, 1.0] and adds i.i.d. pixel noise
    with std ``noise_sigma``; the result is clamped to [0, 1].

    Required keys: num_classes, samples_per_class, image_side,
    class_separation, noise_sigma. Optional: channels (1), jitter (1.0),
    blob_width (image_side / 8), name.
    """
    try:
        k = int(spec["num_classes"])
        per_class = int(spec["samples_per_class"])
        side = int(spec["image_side"])
        separation = float(spec["class_separation"])
        noise = float(spec["noise_sigma"])
    except KeyError as exc:
        raise RejectedInput(f"synthetic spec missing {exc.args[0]!r}") from None
    channels = int(spec.get("channels", 1))
    jitter = float(spec.get("jitter", 1.0))
    width = float(spec.get("blob_width", side / 8))
    if k < 2:
        raise RejectedInput(f"num_classes must be >= 2, got {k}")
    if side < 4:
        raise RejectedInput(f"image_side must be >= 4, got {side}")
    if per_class < 1 or channels < 1:
        raise RejectedInput("samples_per_class and channels must be >= 1")
    if separation < 0 or noise < 0 or jitter < 0 or width <= 0:
        raise RejectedInput("class_separation, noise_sigma, jitter must be >= 0 and blob_width > 0")

    rng = np.random.default_rng(seed)
    mid = (side - 1) / 2.0
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    samples = []
    for cls in range(k):
        angle = 2.0 * math.pi * cls / k
        centre = np.array([mid + separation * math.sin(angle), mid + separation * math.cos(angle)])
        for i in range(per_class):
            cy, cx = centre + rng.normal(0.0, jitter, size=2)
            amp = rng.uniform(0.6, 1.0)
            blob = amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * width**2))
            img = np.repeat(blob[None], channels, axis=0)
            img = img + rng.normal(0.0, noise, size=img.shape)
            samples.append(ImageSample(f"c{cls:02d}-{i:05d}", np.clip(img, 0.0, 1.0), cls))
    return Dataset(tuple(samples), k, spec.get("name", "synthetic"))


# ---------------------------------------------------------------------------
# loaders


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an MNIST-style IDX image/label file pair (optionally gzipped)."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise FormatError("images.header", "file shorter than 16-byte header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError("images.magic", f"expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}")
    if len(lab) < 8:
        raise FormatError("labels.header", "file shorter than 8-byte header")
    lmagic, nl = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError("labels.magic", f"expected {IDX_LABELS_MAGIC:#010x}, got {lmagic:#010x}")
    if nl != n:
        raise FormatError("labels.count", f"{nl} labels for {n} images")
    need = n * rows * cols
    if len(img) - 16 < need:
        raise FormatError("images.payload", f"truncated: need {need} bytes, have {len(img) - 16}")
    if len(lab) - 8 < n:
        raise FormatError("labels.payload", f"truncated: need {n} bytes, have {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=need, offset=16)
    pixels = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    k = max(int(labels.max()) + 1 if n else 0, 2)
    samples = tuple(ImageSample(f"{i:06d}", pixels[i], int(labels[i])) for i in range(n))
    return Dataset(samples, k, name)


def load_png_dir(root, name: str | None = None) -> Dataset:
    """Load ``root/<class_name>/<file>.png``; classes are indexed in sorted order."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FormatError("root", f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise FormatError("root", f"need >= 2 class directories, found {len(classes)}")
    samples = []
    shape = None
    for label, cls in enumerate(classes):
        files = sorted((root / cls).glob("*.png"))
        if not files:
            raise FormatError(f"class {cls}", "no .png files")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("L") if im.mode in ("1", "L", "LA", "I", "I;16") else im.convert("RGB")
                    arr = np.asarray(im, dtype=np.uint8)
            except OSError as exc:
                raise FormatError(f"{cls}/{f.name}", f"unreadable image ({exc})") from None
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise FormatError(f"{cls}/{f.name}", f"shape {arr.shape} differs from {shape}")
            samples.append(ImageSample(f"{cls}/{f.name}", arr.astype(np.float64) / 255.0, label))
    return Dataset(tuple(samples), len(classes), name or root.name)


# Manifest: JSON index plus a companion little-endian float64 payload.


def save_manifest(data: Dataset, path, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = path.with_suffix(".f64")
    entries = []
    offset = 0
    with open(payload, "wb") as fh:
        for s in data.samples:
            raw = s.pixels.astype("<f8").tobytes()
            fh.write(raw)
            entries.append({"id": s.id, "label": s.label, "pixel_file": payload.name, "offset": offset})
            offset += len(raw)
    doc = {
        "name": data.name,
        "num_classes": data.num_classes,
        "shape": list(data.shape) if data.shape else None,
        "samples": entries,
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        shape = tuple(doc["shape"])
        count = int(np.prod(shape))
        blobs = {}
        samples = []
        for e in doc["samples"]:
            fname = e["pixel_file"]
            if fname not in blobs:
                blobs[fname] = (path.parent / fname).read_bytes()
            raw = blobs[fname]
            if e["offset"] + 8 * count > len(raw):
                raise FormatError("pixel_file", f"truncated payload for sample {e['id']}")
            px = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"]).reshape(shape)
            samples.append(ImageSample(e["id"], px.astype(np.float64), e["label"]))
        return Dataset(tuple(samples), int(doc["num_classes"]), doc["name"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError("manifest", f"malformed manifest {path}: {exc}") from None


# ---------------------------------------------------------------------------
# splits


def round_half_up(x: float) -> int:
    # rounding to 9 places first absorbs float noise such as 0.95 * 100 = 95.00000000000001
    return int(math.floor(round(x, 9) + 0.5))


@dataclass(frozen=True)
class SplitPlan:
    public_ids: tuple[str, ...]
    private_ids: tuple[str, ...]
    fold_a_ids: tuple[str, ...]
    fold_b_ids: tuple[str, ...]
    verification_budget: int
    seed: int

    def to_json(self) -> dict:
        return {
            "public_ids": list(self.public_ids),
            "private_ids": list(self.private_ids),
            "fold_a_ids": list(self.fold_a_ids),
            "fold_b_ids": list(self.fold_b_ids),
            "verification_budget": self.verification_budget,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplitPlan":
        return cls(
            tuple(doc["public_ids"]),
            tuple(doc["private_ids"]),
            tuple(doc["fold_a_ids"]),
            tuple(doc["fold_b_ids"]),
            int(doc["verification_budget"]),
            int(doc["seed"]),
        )


def split_sizes(n: int, public_fraction: float, verification_fraction: float) -> tuple[int, int, int]:
    """Return (public, private, budget) counts for a dataset of ``n`` samples.

    The private share is floored and the public split takes the remainder,
    which reproduces e.g. 10,015 -> 6,677 / 3,338 and 25,211 -> 16,808 / 8,403.
    """
    n_private = int(math.floor(round((1.0 - public_fraction) * n, 9)))
    return n - n_private, n_private, round_half_up(verification_fraction * n)


def make_split(data: Dataset, public_fraction: float, verification_fraction: float, seed: int) -> SplitPlan:
    if not 0.0 < public_fraction < 1.0:
        raise RejectedInput(f"public_fraction must be in (0, 1), got {public_fraction}")
    if not 0.0 < verification_fraction <= 1.0 - public_fraction:
        raise RejectedInput(
            f"verification_fraction must be in (0, {1.0 - public_fraction:.6g}], got {verification_fraction}"
        )
    n_public, n_private, budget = split_sizes(len(data), public_fraction, verification_fraction)
    if n_private < 2 or n_public < 1:
        raise RejectedInput(f"dataset of {len(data)} samples too small to split")
    if not 1 <= budget <= n_private:
        raise RejectedInput(f"verification budget {budget} not in [1, {n_private}]")
    ids = data.ids
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    public, private = shuffled[:n_public], shuffled[n_public:]
    half = (len(private) + 1) // 2
    return SplitPlan(
        tuple(public), tuple(private), tuple(private[:half]), tuple(private[half:]), budget, seed
    )
