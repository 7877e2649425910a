"""Optimizers and the three training procedures (classifiers, attention net, mask classifier)."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .datasets import ImageSet
from .models import Model, ModelRole, predict_batch, predict_labels


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    sparsity: float = 0.1  # weight of mean(mask) in the attention-net objective
    noise: str = "uniform"  # or "gaussian": per-pixel N(mean, std) of the train set, clamped

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.sparsity < 0:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise distribution {self.noise!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("seconds")
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict,
                   config: TrainConfig) -> None:
    """Update ``params`` in place.

    SGD with momentum: ``v <- mu v - lr g``, ``w <- w + v``.
    Adam: beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected moments.
    """
    for g in grads:
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient passed to optimizer")
    if config.optimizer == "sgd_momentum":
        vel = state.setdefault("velocity", [np.zeros_like(p) for p in params])
        mu = config.momentum
        for p, g, v in zip(params, grads, vel):
            v *= mu
            v -= config.lr * g
            p += v
        return

    b1, b2, eps = 0.9, 0.999, 1e-8
    m = state.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.setdefault("v", [np.zeros_like(p) for p in params])
    t = state["t"] = state.get("t", 0) + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        p -= (config.lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype)


def _finite_loss(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"loss diverged during {where}")
    return value


@contextmanager
def _diverged_on_nonfinite():
    try:
        yield
    except T.NonFiniteError as exc:
        raise DivergenceError(f"training diverged: {exc}") from exc


def accuracy(model: Model, data: ImageSet) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict_labels(model, data.images) == data.labels))


def mean_loss(model: Model, data: ImageSet, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        logits = T.Tensor(predict_batch(model, data.images[i : i + batch_size]))
        total += float(T.softmax_cross_entropy(logits, data.labels[i : i + batch_size], "sum").data)
    return total / len(data)


# ---------------------------------------------------------------------------
# classifiers


def train_classifier(model: Model, data: ImageSet, config: TrainConfig,
                     test: ImageSet | None = None) -> tuple[Model, TrainReport]:
    """Minibatch cross-entropy training; the model is updated in place and returned.

    The shuffle sequence comes from ``config.seed`` so two runs with equal
    inputs produce identical parameters.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not model.role.is_classifier:
        raise ValueError(f"train_classifier got a {model.role.value} model")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    report = TrainReport(config=asdict(config))
    report.initial_loss = _finite_loss(mean_loss(model, data), "initial evaluation")

    with _diverged_on_nonfinite():
        _classifier_epochs(model, data, config, rng, report)
    model.metadata["epochs_trained"] = model.metadata.get("epochs_trained", 0) + config.epochs
    model.metadata["train_seed"] = config.seed

    report.train_accuracy = accuracy(model, data)
    if test is not None:
        report.test_accuracy = accuracy(model, test)
    report.seconds = time.perf_counter() - start
    return model, report


def _classifier_epochs(model, data, config, rng, report) -> None:
    names = list(model.params)
    state: dict = {}
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            ptensors = model.param_tensors()
            logits = model.forward(data.images[idx], ptensors)
            loss = T.softmax_cross_entropy(logits, data.labels[idx])
            total += _finite_loss(float(loss.data), "training") * len(idx)
            grads = T.backprop(loss, [ptensors[n] for n in names])
            optimizer_step([model.params[n] for n in names], grads, state, config)
        report.epoch_losses.append(total / len(data))


# ---------------------------------------------------------------------------
# attention net


def corrupt_with_mask(x: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                      noise: np.ndarray | None = None) -> np.ndarray:
    """``mask * x + (1 - mask) * eta`` with ``eta`` i.i.d. Uniform[0, 1] unless supplied."""
    x = np.asarray(x, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if x.shape != mask.shape:
        raise T.ShapeError(f"image {x.shape} and mask {mask.shape} differ in shape")
    if mask.min(initial=0.0) < 0 or mask.max(initial=0.0) > 1:
        raise ValueError("mask values must lie in [0, 1]")
    eta = rng.random(x.shape, dtype=np.float32) if noise is None else np.asarray(noise, np.float32)
    return np.clip(mask * x + (1 - mask) * eta, 0.0, 1.0)


class NoiseSampler:
    """Draws the corruption noise for attention-net training."""

    def __init__(self, kind: str, data: ImageSet):
        self.kind = kind
        if kind == "gaussian":
            self.mu = data.images.mean(axis=0)
            self.sigma = data.images.std(axis=0)

    def __call__(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.random(shape, dtype=np.float32)
        draw = self.mu + self.sigma * rng.standard_normal(shape, dtype=np.float32)
        return np.clip(draw, 0.0, 1.0).astype(np.float32)


def lan_loss(g: Model, f: Model, images: np.ndarray, targets: np.ndarray, noise: np.ndarray,
             sparsity: float, g_params: dict[str, T.Tensor] | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Fidelity of the frozen classifier on corrupted inputs plus mask sparsity.

    Returns ``(loss, mask)``; the corrupted batch is ``noise + m * (x - noise)``.
    """
    mask = g.forward(images, g_params)
    corrupted = T.add(T.mul(mask, images - noise), noise)
    fidelity = T.softmax_cross_entropy(f.forward(corrupted), targets)
    loss = T.add(fidelity, T.scale(T.mean(mask), sparsity)) if sparsity else fidelity
    return loss, mask


def train_lan(g: Model, f: Model, data: ImageSet, config: TrainConfig,
              test: ImageSet | None = None) -> tuple[Model, TrainReport]:
    """Train the attention net ``g`` to explain the frozen classifier ``f``.

    Targets are ``f``'s own predictions on the clean images. One noise draw
    per image per step. Only ``g`` changes.
    """
    if g.role is not ModelRole.ATTENTION_NET:
        raise ValueError(f"train_lan needs an attention net, got {g.role.value}")
    f.require_trained()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    sampler = NoiseSampler(config.noise, data)
    targets = predict_labels(f, data.images)
    names = list(g.params)
    state: dict = {}
    report = TrainReport(config=asdict(config))

    eval_rng = np.random.default_rng(config.seed + 1)
    report.initial_loss = _finite_loss(
        _lan_eval(g, f, data, targets, sampler, config.sparsity, eval_rng), "initial evaluation")

    with _diverged_on_nonfinite():
        for _ in range(config.epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                x = data.images[idx]
                noise = sampler(rng, x.shape)
                ptensors = g.param_tensors()
                loss, _ = lan_loss(g, f, x, targets[idx], noise, config.sparsity, ptensors)
                total += _finite_loss(float(loss.data), "training") * len(idx)
                grads = T.backprop(loss, [ptensors[n] for n in names])
                optimizer_step([g.params[n] for n in names], grads, state, config)
            report.epoch_losses.append(total / len(data))
    g.metadata["epochs_trained"] = g.metadata.get("epochs_trained", 0) + config.epochs
    g.metadata["train_seed"] = config.seed
    g.metadata["sparsity"] = config.sparsity

    report.train_accuracy = lan_agreement(g, f, data, np.random.default_rng(config.seed + 2),
                                          sampler)
    if test is not None:
        report.test_accuracy = lan_agreement(g, f, test, np.random.default_rng(config.seed + 3),
                                             sampler)
    report.seconds = time.perf_counter() - start
    return g, report


def _lan_eval(g, f, data, targets, sampler, sparsity, rng, batch_size=256) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        x = data.images[i : i + batch_size]
        loss, _ = lan_loss(g, f, x, targets[i : i + batch_size], sampler(rng, x.shape), sparsity)
        total += float(loss.data) * len(x)
    return total / len(data)


def lan_agreement(g: Model, f: Model, data: ImageSet, rng: np.random.Generator,
                  sampler: NoiseSampler | None = None) -> float:
    """Fraction of images where ``f`` predicts the same class on the corrupted image."""
    sampler = sampler or NoiseSampler("uniform", data)
    clean = predict_labels(f, data.images)
    masks = predict_batch(g, data.images)
    noise = sampler(rng, data.images.shape)
    corrupted = noise + masks * (data.images - noise)
    return float(np.mean(predict_labels(f, corrupted) == clean))


def build_mask_dataset(g: Model, data: ImageSet) -> ImageSet:
    """One mask per image, labels and ids carried over."""
    masks = predict_batch(g, data.images)
    return ImageSet(masks.astype(np.float32), data.labels.copy(), data.ids.copy())
