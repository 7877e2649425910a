"""Classification-vs-interpretation contrastive detection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import ImageSet
from .models import Model, ModelRole, argmax_lowest, predict_batch, predict_labels
from .tensor import ShapeError


class EmptyFilterError(RuntimeError):
    """No benign image survived filtering; g/f2 quality is unusable."""


class RoleMismatchError(ValueError):
    pass


@dataclass
class DetectionVerdict:
    y1: int
    y2: int
    is_adversarial: bool
    mask: np.ndarray | None = None


def check_roles(f1: Model, g: Model, f2: Model) -> None:
    if f1.role not in (ModelRole.IMAGE_CLASSIFIER, ModelRole.TRANSFER_CLASSIFIER):
        raise RoleMismatchError(f"f1 slot holds a {f1.role.value} model")
    if g.role is not ModelRole.ATTENTION_NET:
        raise RoleMismatchError(f"g slot holds a {g.role.value} model")
    if f2.role is not ModelRole.MASK_CLASSIFIER:
        raise RoleMismatchError(f"f2 slot holds a {f2.role.value} model")
    if not (f1.input_dims == g.input_dims == f2.input_dims):
        raise RoleMismatchError("f1, g and f2 disagree on input dimensions")


def generate_mask(g: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != g.input_dims:
        raise ShapeError(f"g expects {g.input_dims}, got {x.shape}")
    return g(x)


def detect(f1: Model, g: Model, f2: Model, x: np.ndarray) -> DetectionVerdict:
    """Adversarial iff ``argmax f1(x) != argmax f2(g(x))``."""
    mask = generate_mask(g, x)
    y1 = argmax_lowest(f1(x))
    y2 = argmax_lowest(f2(mask))
    return DetectionVerdict(y1, y2, y1 != y2, mask)


def detect_batch(f1: Model, g: Model, f2: Model, images: np.ndarray):
    """Vectorised :func:`detect`; returns ``(y1, y2, is_adversarial)`` arrays."""
    images = np.asarray(images, dtype=np.float32)
    y1 = predict_labels(f1, images)
    y2 = predict_labels(f2, predict_batch(g, images))
    return y1, y2, y1 != y2


def mask_predictions(g: Model, f2: Model, images: np.ndarray) -> np.ndarray:
    return predict_labels(f2, predict_batch(g, np.asarray(images, dtype=np.float32)))


def filter_benign_set(f1: Model, g: Model, f2: Model, data: ImageSet,
                      strict: bool = True) -> tuple[ImageSet, float]:
    """Keep images whose mask f2 classifies correctly (and, if ``strict``, f1 too).

    Returns the kept subset and the kept fraction.
    """
    y1, y2, _ = detect_batch(f1, g, f2, data.images)
    keep = y2 == data.labels
    if strict:
        keep &= y1 == data.labels
    if not keep.any():
        raise EmptyFilterError("no test image survived mask filtering")
    return data.subset(np.flatnonzero(keep)), float(keep.mean())


# ---------------------------------------------------------------------------
# verdict CSV

VERDICT_FIELDS = ["index", "y_true", "y1", "y2", "is_adversarial", "kind"]


def write_verdicts(path, rows) -> Path:
    """``rows``: iterables of (index, y_true, y1, y2, is_adversarial, kind)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_FIELDS)
        for index, y_true, y1, y2, adv, kind in rows:
            w.writerow([int(index), int(y_true), int(y1), int(y2), int(bool(adv)), kind])
    return path


def read_verdicts(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"index": int(r["index"]), "y_true": int(r["y_true"]), "y1": int(r["y1"]),
                 "y2": int(r["y2"]), "is_adversarial": r["is_adversarial"] == "1",
                 "kind": r["kind"]} for r in csv.DictReader(fh)]
