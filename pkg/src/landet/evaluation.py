"""Mask retention, detection rates, recovery rate and the end-to-end experiment.

:func:`run_experiment` trains f1 (and the transfer model f1'), the attention
net g against f1 and the mask classifier f2, then attacks and scores the
detector in three settings:

``direct``
    attacks crafted against f1.
``transfer``
    attacks crafted against f1'; the detector triple is unchanged.
``filtered``
    only test images where f2(g(x)) and f1(x) are both correct are used,
    both as benign images and as attack sources.
"""

from __future__ import annotations

import contextlib
import json
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import ATTACKS, AdversarialExample, AttackConfig, run_attack
from .datasets import ImageSet, PairedEvalSet, gen_toy_dataset, load_cifar10
from .detector import (detect_batch, filter_benign_set, mask_predictions, read_verdicts,
                       write_verdicts)
from .models import Model, ModelRole, build_model, checkpoint_bytes, predict_labels
from .training import (TrainConfig, TrainReport, accuracy, build_mask_dataset, lan_agreement,
                       train_classifier, train_lan)

SETTINGS = ("direct", "transfer", "filtered")

TN_AMBIGUITY_NOTE = (
    "benign pool shared across attacks within a setting, so TN repeats per row; "
    "per-attack pools (benign_pool='per_attack') give attack-specific TN")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str, timings: dict | None = None):
    start = time.perf_counter()
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc
    if timings is not None:
        timings[name] = time.perf_counter() - start


# ---------------------------------------------------------------------------
# metrics


def _rate(hits: int, total: int) -> float:
    return hits / total if total else float("nan")


def retention_rate(g: Model, f2: Model, pairs) -> float:
    """Fraction of ``(x, x*)`` pairs where f2 gives the masks of x and x* the same class."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("retention_rate needs at least one pair")
    x = np.stack([p.original if isinstance(p, AdversarialExample) else p[0] for p in pairs])
    xs = np.stack([p.perturbed if isinstance(p, AdversarialExample) else p[1] for p in pairs])
    return float(np.mean(mask_predictions(g, f2, x) == mask_predictions(g, f2, xs)))


def recovery_rate(mask_labels, true_labels) -> float:
    """Fraction of adversarial examples whose mask classification is the true label."""
    mask_labels = np.asarray(mask_labels)
    if mask_labels.size == 0:
        raise ValueError("recovery_rate needs at least one example")
    return float(np.mean(mask_labels == np.asarray(true_labels)))


def detection_metrics(f1: Model, g: Model, f2: Model, paired: PairedEvalSet) -> dict:
    """TP rate over the adversarial half, TN rate over the benign half, plus raw counts."""
    if len(paired) == 0:
        raise ValueError("detection_metrics needs a non-empty paired set")
    adv = np.stack([ae.perturbed for ae in paired.adversarial])
    _, _, flag_adv = detect_batch(f1, g, f2, adv)
    _, _, flag_ben = detect_batch(f1, g, f2, paired.benign.images)
    tp, tn = int(flag_adv.sum()), int((~flag_ben).sum())
    return {"tp_rate": _rate(tp, len(adv)), "tn_rate": _rate(tn, len(flag_ben)),
            "tp": tp, "fn": len(adv) - tp, "tn": tn, "fp": len(flag_ben) - tn}


def rates_from_verdicts(rows: list[dict]) -> dict:
    """Recompute TP/TN (and recovery) from verdict rows alone."""
    adv = [r for r in rows if r["kind"] != "benign"]
    ben = [r for r in rows if r["kind"] == "benign"]
    tp = sum(r["is_adversarial"] for r in adv)
    tn = sum(not r["is_adversarial"] for r in ben)
    rec = sum(r["y2"] == r["y_true"] for r in adv)
    return {"tp_rate": _rate(tp, len(adv)), "tn_rate": _rate(tn, len(ben)),
            "recovery_rate": _rate(rec, len(adv)), "tp": tp, "tn": tn,
            "adversarial": len(adv), "benign": len(ben)}


@dataclass
class MetricsReport:
    attack: str
    setting: str
    tp_rate: float
    tn_rate: float
    recovery_rate: float
    retention_rate: float
    seed: int = 0
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# experiment


def default_toy_train_configs() -> dict[str, TrainConfig]:
    return {
        "f1": TrainConfig(epochs=10, batch_size=32, lr=1e-3),
        "f1p": TrainConfig(epochs=10, batch_size=32, lr=1e-3),
        "g": TrainConfig(epochs=25, batch_size=32, lr=1e-3, sparsity=1.0),
        "f2": TrainConfig(epochs=10, batch_size=32, lr=1e-3),
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: {
        "kind": "toy", "class_count": 10, "dims": [3, 16, 16], "samples_per_class": 200,
        "test_per_class": 50})
    train: dict = field(default_factory=default_toy_train_configs)
    attack: AttackConfig = field(default_factory=AttackConfig)
    attacks: list = field(default_factory=lambda: list(ATTACKS))
    settings: list = field(default_factory=lambda: list(SETTINGS))
    n_pairs: int = 100
    chunk: int = 128
    benign_pool: str = "shared"  # or "per_attack"
    strict_filter: bool = True

    def __post_init__(self):
        self.train = {k: v if isinstance(v, TrainConfig) else TrainConfig.from_dict(v)
                      for k, v in self.train.items()}
        defaults = default_toy_train_configs()
        for k in defaults:
            self.train.setdefault(k, defaults[k])
        if not isinstance(self.attack, AttackConfig):
            self.attack = AttackConfig.from_dict(self.attack)
        bad = set(self.attacks) - set(ATTACKS) or set(self.settings) - set(SETTINGS)
        if bad:
            raise ValueError(f"unknown attacks/settings: {sorted(bad)}")
        if self.benign_pool not in ("shared", "per_attack"):
            raise ValueError(f"benign_pool must be 'shared' or 'per_attack'")
        if self.n_pairs < 0 or self.chunk < 1:
            raise ValueError("n_pairs must be >= 0 and chunk >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ExperimentResult:
    report: dict
    models: dict[str, Model]
    train_reports: dict[str, TrainReport]
    verdicts: dict[str, list[tuple]]
    paired_sets: dict[str, PairedEvalSet]
    data: tuple[ImageSet, ImageSet]
    timings: dict[str, float] = field(default_factory=dict)  # seconds; kept out of the report

    def report_json(self) -> str:
        return json.dumps(_strict_json(self.report), sort_keys=True, indent=2) + "\n"

    def save(self, out_dir) -> list[Path]:
        """Write report, checkpoints, train reports and per-(setting, attack) verdict CSVs."""
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "verdicts").mkdir(exist_ok=True)
        written = []
        path = out / "report.json"
        path.write_text(self.report_json())
        written.append(path)
        for name, model in self.models.items():
            path = out / "checkpoints" / f"{name}.ckpt"
            path.write_bytes(checkpoint_bytes(model))
            written.append(path)
        for name, rep in self.train_reports.items():
            path = out / "checkpoints" / f"{name}.train.json"
            path.write_text(rep.to_json(include_timing=False) + "\n")
            written.append(path)
        for key, rows in self.verdicts.items():
            written.append(write_verdicts(out / "verdicts" / f"{key}.csv", rows))
        return written


def _strict_json(obj):
    """Undefined rates (no pairs) become ``null`` instead of the non-standard NaN."""
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _strict_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict_json(v) for v in obj]
    return obj


def _load_data(cfg: ExperimentConfig) -> tuple[ImageSet, ImageSet]:
    ds = dict(cfg.dataset)
    kind = ds.pop("kind", "toy")
    if kind == "toy":
        return gen_toy_dataset(ds.get("class_count", 10), tuple(ds.get("dims", (3, 16, 16))),
                               ds.get("samples_per_class", 200), cfg.seed,
                               ds.get("test_per_class"))
    if kind == "cifar10":
        return load_cifar10(ds["directory"], ds.get("train_limit"), ds.get("test_limit"))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _collect_successes(victim: Model, data: ImageSet, candidates: np.ndarray, attack: str,
                       cfg: ExperimentConfig) -> tuple[list[AdversarialExample], int]:
    """Attack victim-correct candidates in order, chunk by chunk, until ``n_pairs`` successes.

    Each chunk covers the outstanding need plus 10% (at least 16, at most ``chunk``).
    """
    found: list[AdversarialExample] = []
    used = 0
    while len(found) < cfg.n_pairs and used < len(candidates):
        need = cfg.n_pairs - len(found)
        size = min(cfg.chunk, max(16, -(-11 * need // 10)))
        batch = candidates[used : used + size]
        used += len(batch)
        found += [ae for ae in run_attack(victim, data.subset(batch), attack, cfg.attack)
                  if ae.success]
    return found[: cfg.n_pairs], used


def _benign_for(attack: str, candidates: np.ndarray, n: int, cfg: ExperimentConfig) -> np.ndarray:
    if cfg.benign_pool == "shared":
        return candidates[:n]
    salt = ATTACKS.index(attack) + 1
    order = np.random.default_rng([cfg.seed, salt]).permutation(len(candidates))
    return candidates[order[:n]]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train every model, run the configured attacks/settings and assemble the report."""
    seed = cfg.seed
    tc = {k: replace(v, seed=seed * 100 + i) for i, (k, v) in enumerate(sorted(cfg.train.items()))}
    models: dict[str, Model] = {}
    reports: dict[str, TrainReport] = {}
    timings: dict[str, float] = {}

    with stage("data", timings):
        train, test = _load_data(cfg)
        classes = int(max(train.labels.max(), test.labels.max()) + 1)
        if cfg.dataset.get("kind", "toy") == "cifar10":
            classes = 10
        dims = train.image_dims

    with stage("train_f1", timings):
        f1 = build_model(ModelRole.IMAGE_CLASSIFIER, dims, classes, tc["f1"].seed)
        models["f1"], reports["f1"] = train_classifier(f1, train, tc["f1"], test)
    if "transfer" in cfg.settings:
        with stage("train_f1p", timings):
            f1p = build_model(ModelRole.TRANSFER_CLASSIFIER, dims, classes, tc["f1p"].seed)
            models["f1p"], reports["f1p"] = train_classifier(f1p, train, tc["f1p"], test)
    with stage("train_g", timings):
        g = build_model(ModelRole.ATTENTION_NET, dims, classes, tc["g"].seed)
        models["g"], reports["g"] = train_lan(g, f1, train, tc["g"], test)
    with stage("train_f2", timings):
        mask_train, mask_test = build_mask_dataset(g, train), build_mask_dataset(g, test)
        f2 = build_model(ModelRole.MASK_CLASSIFIER, dims, classes, tc["f2"].seed)
        models["f2"], reports["f2"] = train_classifier(f2, mask_train, tc["f2"], mask_test)

    with stage("accuracies", timings):
        y1, y2, _ = detect_batch(f1, g, f2, test.images)
        f1_ok, f2_ok = y1 == test.labels, y2 == test.labels
        accuracies = {
            "f1_test": float(f1_ok.mean()),
            "f2_mask_test": accuracy(f2, mask_test),
            "f1_train": reports["f1"].train_accuracy,
            "f2_mask_train": reports["f2"].train_accuracy,
            "g_fidelity_test": reports["g"].test_accuracy,
            "mask_mean_test": float(mask_test.images.mean()),
            "f1_and_f2g_correct": float((f1_ok & f2_ok).mean()),
            "f2g_correct": float(f2_ok.mean()),
        }
        if "f1p" in models:
            accuracies["f1p_test"] = accuracy(models["f1p"], test)

    report = {
        "seed": seed,
        "config": cfg.to_dict(),
        "stage_seeds": {k: v.seed for k, v in tc.items()},
        "dataset": {"train": len(train), "test": len(test), "classes": classes,
                    "dims": list(dims)},
        "accuracies": accuracies,
        "train_losses": {k: {"initial": r.initial_loss, "epochs": r.epoch_losses}
                         for k, r in reports.items()},
        "metrics": [],
        "retention": {},
        "notes": {"benign_pool": cfg.benign_pool, "strict_filter": cfg.strict_filter,
                  "tn_ambiguity": TN_AMBIGUITY_NOTE,
                  "transfer_tp": "TP counts every x* that fools f1'; fooled_f1 splits out "
                                 "the subset that also fools f1"},
    }
    verdicts: dict[str, list[tuple]] = {}
    paired_sets: dict[str, PairedEvalSet] = {}
    if not cfg.attacks:
        return ExperimentResult(report, models, reports, verdicts, paired_sets, (train, test),
                            timings)

    order = np.random.default_rng([seed, 7]).permutation(len(test))
    half = len(order) // 2
    benign_half, attack_half = order[:half], order[half:]

    with stage("filter", timings):
        filtered, kept = filter_benign_set(f1, g, f2, test, strict=cfg.strict_filter)
        keep_mask = np.isin(test.ids, filtered.ids)
        report["filter"] = {"kept_fraction": kept, "kept": int(keep_mask.sum()),
                            "strict": cfg.strict_filter}

    for setting in cfg.settings:
        victim = models["f1p"] if setting == "transfer" else f1
        with stage(f"{setting}_sources", timings):
            victim_ok = predict_labels(victim, test.images) == test.labels
            usable = keep_mask if setting == "filtered" else np.ones(len(test), dtype=bool)
            sources = attack_half[victim_ok[attack_half] & usable[attack_half]]
            benign_cands = benign_half[f1_ok[benign_half] & usable[benign_half]]

        found, attacked = {}, {}
        for attack in cfg.attacks:
            with stage(f"{setting}_{attack}", timings):
                found[attack], attacked[attack] = _collect_successes(
                    victim, test, sources, attack, cfg)
        n = min([cfg.n_pairs, len(benign_cands)] + [len(v) for v in found.values()])

        for attack in cfg.attacks:
            with stage(f"{setting}_{attack}_metrics", timings):
                adv = found[attack][:n]
                benign = test.subset(_benign_for(attack, benign_cands, n, cfg))
                paired = PairedEvalSet(benign, adv, {"setting": setting, "attack": attack,
                                                     "victim": victim.role.value})
                key = f"{setting}_{attack}"
                paired_sets[key] = paired
                report["metrics"].append(asdict(_score(setting, attack, paired, f1, g, f2,
                                                       len(found[attack]), attacked[attack],
                                                       seed)))
                verdicts[key] = _verdict_rows(f1, g, f2, paired)
                if setting == "direct" and n:
                    report["retention"][attack] = retention_rate(g, f2, adv)

    return ExperimentResult(report, models, reports, verdicts, paired_sets, (train, test),
                            timings)


def _score(setting, attack, paired, f1, g, f2, successes, attacked, seed) -> MetricsReport:
    counts = {"pairs": len(paired), "attacked": int(attacked), "successes": int(successes)}
    if len(paired) == 0:
        nan = float("nan")
        return MetricsReport(attack, setting, nan, nan, nan, nan, seed, counts)
    det = detection_metrics(f1, g, f2, paired)
    adv = np.stack([ae.perturbed for ae in paired.adversarial])
    orig = np.stack([ae.original for ae in paired.adversarial])
    y = np.array([ae.y_true for ae in paired.adversarial])
    y2_adv = mask_predictions(g, f2, adv)
    y2_orig = mask_predictions(g, f2, orig)
    counts.update({k: det[k] for k in ("tp", "fn", "tn", "fp")})
    counts.update({"adversarial": len(adv), "benign": len(paired.benign)})
    extra = {"median_l2": float(np.median([ae.l2 for ae in paired.adversarial])),
             "median_linf": float(np.median([ae.linf for ae in paired.adversarial])),
             "median_l0": float(np.median([ae.l0 for ae in paired.adversarial]))}
    if setting == "transfer":
        y1_adv = predict_labels(f1, adv)
        fooled = y1_adv != y
        extra["fooled_f1"] = int(fooled.sum())
        extra["tp_rate_fooled_f1"] = _rate(int((y1_adv != y2_adv)[fooled].sum()), int(fooled.sum()))
    return MetricsReport(attack, setting, det["tp_rate"], det["tn_rate"],
                         recovery_rate(y2_adv, y), float(np.mean(y2_adv == y2_orig)),
                         seed, counts, extra)


def _verdict_rows(f1, g, f2, paired: PairedEvalSet) -> list[tuple]:
    rows = []
    if len(paired) == 0:
        return rows
    y1, y2, flag = detect_batch(f1, g, f2, paired.benign.images)
    for i in range(len(paired.benign)):
        rows.append((int(paired.benign.ids[i]), int(paired.benign.labels[i]), int(y1[i]),
                     int(y2[i]), bool(flag[i]), "benign"))
    adv = np.stack([ae.perturbed for ae in paired.adversarial])
    y1, y2, flag = detect_batch(f1, g, f2, adv)
    for i, ae in enumerate(paired.adversarial):
        rows.append((ae.source_id, ae.y_true, int(y1[i]), int(y2[i]), bool(flag[i]), ae.attack))
    return rows


def metrics_table(report: dict) -> str:
    """Plain-text rendering of the per-(setting, attack) metrics."""
    lines = [f"{'setting':<10}{'attack':<8}{'TP':>8}{'TN':>8}{'recovery':>10}{'retention':>11}{'pairs':>7}"]
    for m in report["metrics"]:
        lines.append(f"{m['setting']:<10}{m['attack']:<8}{m['tp_rate']:>8.3f}{m['tn_rate']:>8.3f}"
                     f"{m['recovery_rate']:>10.3f}{m['retention_rate']:>11.3f}"
                     f"{m['counts']['pairs']:>7}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# mask images (binary PGM)


def mask_to_gray(mask: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes; channels are laid side by side (``H x (C*W)``)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = np.concatenate(list(m), axis=1)
    if m.min(initial=0) < 0 or m.max(initial=0) > 1:
        raise ValueError("mask values must lie in [0, 1]")
    return np.rint(255 * m).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> Path:
    path = Path(path)
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates maxval from the pixels
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if head is None:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(v) for v in head.groups())
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=head.end()).reshape(h, w)


def export_mask_images(masks, directory, prefix: str = "mask") -> list[Path]:
    """One grayscale PGM per mask (or per ``(image, mask)`` pair, drawn side by side)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, item in enumerate(masks):
        if isinstance(item, tuple):
            gray = np.concatenate([mask_to_gray(part) for part in item], axis=1)
        else:
            gray = mask_to_gray(item)
        paths.append(write_pgm(directory / f"{prefix}_{i:04d}.pgm", gray))
    return paths


def recompute_from_csv(path) -> dict:
    return rates_from_verdicts(read_verdicts(path))
