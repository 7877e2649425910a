"""FGSM (l-inf), JSMA (l0) and Carlini-Wagner (l2) against a victim classifier.

Each attack has a batched implementation; the single-image entry points wrap
it. All attacks are deterministic given the victim, inputs and config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import Model, argmax_lowest, predict_labels

ATTACKS = ("fgsm", "jsma", "cw_l2")

# |w| <= 7 keeps (tanh(w) + 1) / 2 strictly inside (0, 1) in float32
_W_LIMIT = 7.0


@dataclass
class AttackConfig:
    fgsm_eps: float = 0.1
    jsma_theta: float = 1.0
    jsma_gamma: float = 0.05
    cw_c: float = 1.0
    cw_search_steps: int = 5
    cw_iterations: int = 200
    cw_step: float = 0.01
    cw_kappa: float = 0.0

    def __post_init__(self):
        if not (self.fgsm_eps >= 0 and 0 < self.jsma_theta <= 1 and 0 <= self.jsma_gamma <= 1
                and self.cw_c > 0 and self.cw_iterations >= 1 and self.cw_search_steps >= 1
                and self.cw_step > 0 and self.cw_kappa >= 0):
            raise ValueError(f"invalid attack config {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class AdversarialExample:
    original: np.ndarray
    perturbed: np.ndarray
    attack: str
    y_true: int
    pred_before: int
    pred_after: int
    success: bool
    budget: dict = field(default_factory=dict)
    source_id: int = -1

    @property
    def l2(self) -> float:
        return float(np.linalg.norm((self.perturbed.astype(np.float64) - self.original).ravel()))

    @property
    def linf(self) -> float:
        return float(np.abs(self.perturbed.astype(np.float64) - self.original).max(initial=0.0))

    @property
    def l0(self) -> int:
        return int(np.count_nonzero(self.perturbed != self.original))


def _success(pred_before, pred_after, y_true) -> np.ndarray:
    return (np.asarray(pred_before) == y_true) & (np.asarray(pred_after) != y_true)


def attack_success(victim: Model, ae: AdversarialExample, y_true: int) -> bool:
    """True iff the victim gets the original right and the perturbed image wrong."""
    before = predict_labels(victim, ae.original[None])[0]
    after = predict_labels(victim, ae.perturbed[None])[0]
    return bool(before == y_true and after != y_true)


def _examples(kind, x, xs, y, before, after, budgets, ids) -> list[AdversarialExample]:
    ok = _success(before, after, y)
    return [AdversarialExample(x[i], xs[i], kind, int(y[i]), int(before[i]), int(after[i]),
                               bool(ok[i]), budgets[i], int(ids[i])) for i in range(len(y))]


def _input_grad(victim: Model, x: np.ndarray, loss_fn) -> np.ndarray:
    xt = T.Tensor(x, requires_grad=True)
    loss = loss_fn(victim.forward(xt))
    (g,) = T.backprop(loss, [xt])
    return g


# ---------------------------------------------------------------------------
# FGSM


def fgsm_batch(victim: Model, x: np.ndarray, y: np.ndarray, eps: float, ids=None):
    victim.require_trained()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    before = predict_labels(victim, x)
    # summed loss so each row's gradient is not scaled by the batch size
    g = _input_grad(victim, x, lambda z: T.softmax_cross_entropy(z, y, "sum"))
    xs = np.clip(x + np.float32(eps) * np.sign(g), 0.0, 1.0).astype(np.float32)
    after = predict_labels(victim, xs)
    ids = np.full(len(y), -1) if ids is None else ids
    return _examples("fgsm", x, xs, y, before, after, [{"eps": float(eps)}] * len(y), ids)


def fgsm(victim: Model, x: np.ndarray, y_true: int, eps: float) -> AdversarialExample:
    """``clamp(x + eps * sign(grad_x CE(victim(x), y_true)), 0, 1)``; sign(0) = 0."""
    return fgsm_batch(victim, np.asarray(x)[None], np.array([y_true]), eps)[0]


# ---------------------------------------------------------------------------
# JSMA, single-pixel increasing variant


def _jsma_terms(victim: Model, x: np.ndarray, target: np.ndarray):
    """Per-pixel ``alpha = dZ_t/dx`` and ``beta = sum_{j != t} dZ_j/dx`` for a batch."""
    n = len(x)
    classes = victim.class_count
    seed = np.zeros((2 * n, classes), dtype=np.float32)
    seed[np.arange(n), target] = 1.0
    seed[n:] = 1.0
    xt = T.Tensor(np.concatenate([x, x]), requires_grad=True)
    z = victim.forward(xt)
    (g,) = T.backprop(T.tensor_sum(T.mul(z, seed)), [xt])
    alpha = g[:n]
    beta = g[n:] - alpha
    return alpha, beta


def saliency_from_terms(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.where((alpha > 0) & (beta < 0), alpha * np.abs(beta), 0.0).astype(np.float32)


def jsma_saliency(victim: Model, x: np.ndarray, target: int) -> np.ndarray:
    """``alpha * |beta|`` where ``alpha > 0`` and ``beta < 0``, else 0, shaped like ``x``."""
    label, _ = victim_predict(victim, x)
    if label == target:
        raise ValueError("saliency target must differ from the current prediction")
    alpha, beta = _jsma_terms(victim, np.asarray(x, np.float32)[None], np.array([target]))
    return saliency_from_terms(alpha, beta)[0]


def victim_predict(victim: Model, x) -> tuple[int, np.ndarray]:
    logits = victim(np.asarray(x, np.float32)[None])[0]
    return argmax_lowest(logits), logits


def runner_up(logits: np.ndarray) -> np.ndarray:
    """Second-ranked class per row (ties to the lowest index)."""
    z = np.array(logits, dtype=np.float64, copy=True)
    rows = np.arange(len(z))
    z[rows, z.argmax(axis=1)] = -np.inf
    return z.argmax(axis=1)


def jsma_batch(victim: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig, ids=None):
    victim.require_trained()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    d = int(np.prod(x.shape[1:]))
    budget = int(np.floor(config.jsma_gamma * d + 1e-9))
    logits = victim(x) if n else np.zeros((0, victim.class_count))
    before = np.argmax(logits, axis=1)
    target = runner_up(logits) if n else np.zeros(0, dtype=np.int64)

    xs = x.reshape(n, d).copy()
    modified = np.zeros((n, d), dtype=bool)
    pred = before.copy()
    active = (before == y) & (budget > 0)
    while active.any():
        idx = np.flatnonzero(active)
        alpha, beta = _jsma_terms(victim, xs[idx].reshape((-1,) + x.shape[1:]), target[idx])
        score = saliency_from_terms(alpha.reshape(len(idx), d), beta.reshape(len(idx), d))
        counts = modified[idx].sum(axis=1)
        eligible = (xs[idx] < 1.0) & (modified[idx] | (counts < budget)[:, None])
        score = np.where(eligible, score, 0.0)
        pick = score.argmax(axis=1)
        stuck = score[np.arange(len(idx)), pick] <= 0
        go = idx[~stuck]
        px = pick[~stuck]
        xs[go, px] = np.minimum(xs[go, px] + np.float32(config.jsma_theta), 1.0)
        modified[go, px] = True
        active[idx[stuck]] = False
        if len(go):
            pred[go] = predict_labels(victim, xs[go].reshape((-1,) + x.shape[1:]))
        done = (pred[go] != y[go]) | (modified[go].sum(axis=1) >= budget) & (
            ~(modified[go] & (xs[go] < 1.0)).any(axis=1))
        active[go[done]] = False

    xs = xs.reshape(x.shape)
    budgets = [{"theta": config.jsma_theta, "gamma": config.jsma_gamma, "max_pixels": budget,
                "pixels": int(modified[i].sum())} for i in range(n)]
    ids = np.full(n, -1) if ids is None else ids
    return _examples("jsma", x, xs, y, before, pred, budgets, ids)


def jsma(victim: Model, x: np.ndarray, y_true: int, config: AttackConfig) -> AdversarialExample:
    """Iteratively raise the most salient pixel toward the runner-up class.

    Stops on misclassification, when ``gamma * d`` distinct pixels have been
    used up, or when no pixel has positive saliency.
    """
    return jsma_batch(victim, np.asarray(x)[None], np.array([y_true]), config)[0]


# ---------------------------------------------------------------------------
# Carlini-Wagner l2


def _to_image(w: T.Tensor) -> T.Tensor:
    return T.scale(T.add(T.tanh_apply(w), 1.0), 0.5)


def _adam(w, g, m, v, t, lr):
    m *= 0.9
    m += 0.1 * g
    v *= 0.999
    v += 0.001 * g * g
    mhat = m / (1 - 0.9**t)
    vhat = v / (1 - 0.999**t)
    w -= (lr * mhat / (np.sqrt(vhat) + 1e-8)).astype(w.dtype)


def cw_l2_batch(victim: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig, ids=None):
    victim.require_trained()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    axes = tuple(range(1, x.ndim))
    before = predict_labels(victim, x) if n else np.zeros(0, dtype=np.int64)
    w0 = np.arctanh(np.clip(2 * x.astype(np.float64) - 1, -np.tanh(_W_LIMIT), np.tanh(_W_LIMIT)))
    w0 = w0.astype(np.float32)

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    c = np.full(n, config.cw_c)
    best_l2 = np.full(n, np.inf)
    best_x = x.copy()
    found_any = np.zeros(n, dtype=bool)
    last_x = x.copy()
    shape_c = (n,) + (1,) * (x.ndim - 1)

    for _ in range(config.cw_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        for it in range(1, config.cw_iterations + 1):
            wt = T.Tensor(w, requires_grad=True)
            xs = _to_image(wt)
            dist = T.tensor_sum(T.square(T.sub(xs, x)), axis=axes)
            z = victim.forward(xs)
            hinge = T.clamp_min(T.logit_margin(z, y), -config.cw_kappa)
            loss = T.tensor_sum(T.add(dist, T.mul(hinge, c.astype(np.float32))))
            (g,) = T.backprop(loss, [wt])

            pred = np.argmax(z.data, axis=1)
            l2 = np.sqrt(dist.data.astype(np.float64))
            better = (pred != y) & (l2 < best_l2)
            best_l2[better] = l2[better]
            best_x[better] = xs.data[better]
            found |= pred != y
            last_x = xs.data

            _adam(w, g, m, v, it, config.cw_step)
            np.clip(w, -_W_LIMIT, _W_LIMIT, out=w)
        found_any |= found
        hi = np.where(found, np.minimum(hi, c), hi)
        lo = np.where(found, lo, np.maximum(lo, c))
        c = np.where(np.isfinite(hi), (lo + hi) / 2, c * 10)

    perturbed = np.where(found_any.reshape(shape_c), best_x, last_x).astype(np.float32)
    after = predict_labels(victim, perturbed) if n else np.zeros(0, dtype=np.int64)
    l2s = np.sqrt(((perturbed.astype(np.float64) - x) ** 2).reshape(n, -1).sum(axis=1))
    budgets = [{"l2": float(l2s[i]), "c_final": float(c[i]), "kappa": config.cw_kappa}
               for i in range(n)]
    ids = np.full(n, -1) if ids is None else ids
    return _examples("cw_l2", x, perturbed, y, before, after, budgets, ids)


def cw_l2(victim: Model, x: np.ndarray, y_true: int, config: AttackConfig) -> AdversarialExample:
    """Minimise ``||x* - x||^2 + c * max(Z_y - max_{j != y} Z_j, -kappa)`` over ``x* = (tanh(w) + 1) / 2``.

    Adam runs for ``cw_iterations`` per binary-search step on ``c``; the
    smallest-l2 misclassified iterate is kept.
    """
    return cw_l2_batch(victim, np.asarray(x)[None], np.array([y_true]), config)[0]


def run_attack(victim: Model, data, attack: str, config: AttackConfig,
               batch_size: int = 128) -> list[AdversarialExample]:
    """Attack every image of an :class:`~landet.datasets.ImageSet`."""
    fns = {"fgsm": lambda x, y, ids: fgsm_batch(victim, x, y, config.fgsm_eps, ids),
           "jsma": lambda x, y, ids: jsma_batch(victim, x, y, config, ids),
           "cw_l2": lambda x, y, ids: cw_l2_batch(victim, x, y, config, ids)}
    if attack not in fns:
        raise ValueError(f"unknown attack {attack!r}; choose from {ATTACKS}")
    out = []
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        out += fns[attack](data.images[sl], data.labels[sl], data.ids[sl])
    return out


# ---------------------------------------------------------------------------
# serialization: manifest JSON + raw little-endian float blobs


def save_adversarial_set(examples: list[AdversarialExample], directory, name: str = "adversarial",
                         config: AttackConfig | None = None) -> list[Path]:
    from .datasets import dump_json, write_floats

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = [len(examples)] + (list(examples[0].original.shape) if examples else [])
    orig = np.stack([e.original for e in examples]) if examples else np.zeros(0)
    pert = np.stack([e.perturbed for e in examples]) if examples else np.zeros(0)
    write_floats(directory / f"{name}_original.f32", orig)
    write_floats(directory / f"{name}_perturbed.f32", pert)
    manifest = {
        "kind": "adversarial_set",
        "shape": shape,
        "config": asdict(config) if config else None,
        "examples": [{"index": i, "source_id": e.source_id, "attack": e.attack, "y_true": e.y_true,
                      "pred_before": e.pred_before, "pred_after": e.pred_after,
                      "success": e.success, "budget": e.budget, "l2": e.l2, "linf": e.linf,
                      "l0": e.l0} for i, e in enumerate(examples)],
    }
    dump_json(manifest, directory / f"{name}.json")
    return [directory / f"{name}.json", directory / f"{name}_original.f32",
            directory / f"{name}_perturbed.f32"]


def load_adversarial_set(directory, name: str = "adversarial") -> list[AdversarialExample]:
    from .datasets import read_floats

    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    shape = meta["shape"]
    if shape[0] == 0:
        return []
    orig = read_floats(directory / f"{name}_original.f32", shape)
    pert = read_floats(directory / f"{name}_perturbed.f32", shape)
    return [AdversarialExample(orig[i], pert[i], e["attack"], e["y_true"], e["pred_before"],
                               e["pred_after"], e["success"], e["budget"], e["source_id"])
            for i, e in enumerate(meta["examples"])]
