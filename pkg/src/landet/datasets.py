"""Image sets: CIFAR-10 binary ingestion, the synthetic toy dataset, paired evaluation sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


class DatasetFormatError(ValueError):
    pass


class InsufficientDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    source_id: int


@dataclass
class ImageSet:
    """Stacked images (``N x C x H x W`` float32 in [0, 1]) with labels and source ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, index) -> "ImageSet":
        index = np.asarray(index, dtype=np.int64)
        return ImageSet(self.images[index], self.labels[index], self.ids[index])

    def head(self, k: int | None) -> "ImageSet":
        return self if k is None else self.subset(np.arange(min(k, len(self))))

    @property
    def image_dims(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# CIFAR-10, binary version


def parse_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse 3073-byte records: one label byte then 3072 planar RGB bytes."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"file length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255)
    return images, labels


def serialize_cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar_records` for images that came from it."""
    pix = np.rint(np.asarray(images, dtype=np.float64) * 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


def _read_cifar_files(directory: Path, names: list[str], limit: int | None, id_offset: int):
    images, labels = [], []
    for name in names:
        path = directory / name
        if not path.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
        x, y = parse_cifar_records(path.read_bytes())
        images.append(x)
        labels.append(y)
        if limit is not None and sum(len(l) for l in labels) >= limit:
            break
    x, y = np.concatenate(images), np.concatenate(labels)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return ImageSet(x, y, np.arange(len(y)) + id_offset)


def load_cifar10(directory, train_limit: int | None = None,
                 test_limit: int | None = None) -> tuple[ImageSet, ImageSet]:
    """Load ``data_batch_{1..5}.bin`` and ``test_batch.bin``; optional first-k subsets."""
    directory = Path(directory)
    train = _read_cifar_files(directory, CIFAR_TRAIN_FILES, train_limit, 0)
    test = _read_cifar_files(directory, CIFAR_TEST_FILES, test_limit, 50_000)
    return train, test


# ---------------------------------------------------------------------------
# synthetic toy classes


STRIPE_CYCLES = 2.0
ANGLE_JITTER = 0.08
BLOB_JITTER = 0.04
BLOB_WIDTH = 0.1
BLOB_LEVEL = 0.95
GRAY_LEVEL = 0.8
PIXEL_NOISE = 0.05


def _class_geometry(k: int, class_count: int) -> tuple[float, float, float]:
    """Stripe angle and blob centre (row, col in [0, 1]) for class ``k``."""
    angle = np.pi * k / class_count
    ring = 2 * np.pi * k / class_count
    return angle, 0.5 + 0.3 * np.sin(ring), 0.5 + 0.3 * np.cos(ring)


def _render(k: int, class_count: int, dims, rng: np.random.Generator) -> np.ndarray:
    c, h, w = dims
    angle, by, bx = _class_geometry(k, class_count)
    angle += rng.normal(0, ANGLE_JITTER)
    phase = rng.uniform(0, 2 * np.pi)
    by += rng.normal(0, BLOB_JITTER)
    bx += rng.normal(0, BLOB_JITTER)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * STRIPE_CYCLES * proj + phase)
    blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * BLOB_WIDTH**2))
    plane = (1 - blob) * stripes * GRAY_LEVEL + blob * BLOB_LEVEL
    img = np.broadcast_to(plane, dims) + rng.normal(0, PIXEL_NOISE, size=dims)
    return np.clip(img, 0, 1)


def gen_toy_dataset(class_count: int = 10, dims=(3, 16, 16), samples_per_class: int = 200,
                    seed: int = 0, test_per_class: int | None = None) -> tuple[ImageSet, ImageSet]:
    """Procedural classes: oriented stripes plus a bright blob.

    Class ``k`` fixes the stripe angle (``k * pi / l``) and the blob centre (on
    a ring); each sample jitters both, draws a random stripe phase and adds
    Gaussian pixel noise (sigma 0.05) before clamping to [0, 1]. Neighbouring
    classes overlap slightly, so a good CNN lands just under 100%.

    The train split has ``samples_per_class`` images per class, the test split
    ``test_per_class`` (default a quarter of that). Source ids are disjoint.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or dims[1] < 8 or dims[2] < 8 or dims[0] < 1:
        raise ValueError(f"toy images need C x H x W with H, W >= 8, got {dims}")
    if not 1 <= class_count <= 10 or samples_per_class < 1:
        raise ValueError("class_count must be in 1..10 and samples_per_class positive")
    test_per_class = max(1, samples_per_class // 4) if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)

    def split(per_class, id_offset):
        labels = np.repeat(np.arange(class_count), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = np.stack([_render(int(k), class_count, dims, rng) for k in labels])
        return ImageSet(images.astype(np.float32), labels, np.arange(len(labels)) + id_offset)

    train = split(samples_per_class, 0)
    test = split(test_per_class, 1_000_000)
    return train, test


# ---------------------------------------------------------------------------
# manifest + raw float blobs


def write_floats(path: Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_floats(path: Path, shape) -> np.ndarray:
    raw = Path(path).read_bytes()
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise DatasetFormatError(f"{path}: expected {count} floats, found {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def save_image_set(data: ImageSet, directory, name: str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = directory / f"{name}.f32"
    write_floats(blob, data.images)
    manifest = directory / f"{name}.json"
    dump_json({"kind": "image_set", "shape": list(data.images.shape), "blob": blob.name,
               "labels": data.labels.tolist(), "ids": data.ids.tolist()}, manifest)
    return [manifest, blob]


def load_image_set(directory, name: str) -> ImageSet:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    images = read_floats(directory / meta["blob"], meta["shape"])
    return ImageSet(images, meta["labels"], meta["ids"])


# ---------------------------------------------------------------------------
# paired evaluation sets


@dataclass
class PairedEvalSet:
    """Equal numbers of benign images and successful adversarial examples."""

    benign: ImageSet
    adversarial: list = field(default_factory=list)  # AdversarialExample, successes only
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.benign) != len(self.adversarial):
            raise ValueError(f"{len(self.benign)} benign vs {len(self.adversarial)} adversarial")
        if not all(ae.success for ae in self.adversarial):
            raise ValueError("paired sets hold successful adversarial examples only")

    def __len__(self):
        return len(self.adversarial)

    def save(self, directory) -> list[Path]:
        from .attacks import save_adversarial_set

        directory = Path(directory)
        paths = save_image_set(self.benign, directory, "benign")
        paths += save_adversarial_set(self.adversarial, directory, "adversarial")
        meta = directory / "paired.json"
        dump_json({"kind": "paired_set", "metadata": self.metadata, "count": len(self)}, meta)
        return paths + [meta]

    @classmethod
    def load(cls, directory) -> "PairedEvalSet":
        from .attacks import load_adversarial_set

        directory = Path(directory)
        meta = json.loads((directory / "paired.json").read_text())
        return cls(load_image_set(directory, "benign"),
                   load_adversarial_set(directory, "adversarial"), meta["metadata"])


def build_paired_set(victim, test: ImageSet, attack: str, config, n: int, seed: int = 0,
                     chunk: int = 64) -> PairedEvalSet:
    """First ``n`` successes against ``victim`` plus ``n`` disjoint victim-correct benign images.

    Test images are visited in a seeded order. Attack sources are taken from
    the front of that order until ``n`` successes accumulate; benign images
    come from the victim-correct remainder.
    """
    from .attacks import run_attack
    from .models import predict_labels

    if n == 0:
        return PairedEvalSet(test.subset([]), [], {"attack": attack, "seed": seed})
    order = np.random.default_rng(seed).permutation(len(test))
    preds = predict_labels(victim, test.images)
    correct = order[preds[order] == test.labels[order]]

    successes, used = [], 0
    while len(successes) < n and used < len(correct):
        batch = correct[used : used + chunk]
        used += len(batch)
        for ae in run_attack(victim, test.subset(batch), attack, config):
            if ae.success and len(successes) < n:
                successes.append(ae)
    if len(successes) < n:
        raise InsufficientDataError(f"only {len(successes)} successful {attack} examples, need {n}")
    benign_pool = correct[used:]
    if len(benign_pool) < n:
        raise InsufficientDataError(f"only {len(benign_pool)} benign images left, need {n}")
    meta = {"attack": attack, "seed": seed, "attacked": int(used)}
    return PairedEvalSet(test.subset(benign_pool[:n]), successes, meta)
