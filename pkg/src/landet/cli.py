"""``landet`` command line: train, attack, detect, eval, export-masks, gen-toy.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command writes
a manifest into ``--out`` (``manifest.json``, or ``manifest-train-<role>.json``)
listing each artifact with its sha256.

Heavy imports happen inside the handlers so ``--threads`` can cap BLAS
threads before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger("landet")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
ROLE_NAMES = {"f1": "image_classifier_f1", "f1p": "transfer_classifier_f1p",
              "g": "attention_net_g", "f2": "mask_classifier_f2"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    seed: int | None
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: dict = field(default_factory=dict)  # path relative to --out -> sha256
    wall_clock_seconds: float = 0.0
    stage_seconds: dict = field(default_factory=dict)

    def add_inputs(self, *paths):
        for p in paths:
            p = Path(p)
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            for q in files:
                self.inputs[str(q)] = sha256(q)

    def write(self, out_dir: Path, artifacts, name: str = "manifest.json") -> Path:
        for p in sorted({Path(a) for a in artifacts}):
            self.outputs[str(p.relative_to(out_dir))] = sha256(p)
        path = out_dir / name
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# helpers


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _load_split(directory, split: str, limit: int | None = None):
    """An image set written by ``gen-toy`` or a CIFAR-10 binary directory."""
    from .datasets import load_cifar10, load_image_set

    directory = Path(directory)
    if (directory / f"{split}.json").is_file():
        return load_image_set(directory, split).head(limit)
    if (directory / "test_batch.bin").is_file():
        if split == "train":
            return load_cifar10(directory, train_limit=limit, test_limit=1)[0]
        return load_cifar10(directory, train_limit=1, test_limit=limit)[1]
    raise FileNotFoundError(f"{directory} holds neither {split}.json nor CIFAR-10 batch files")


EXPERIMENT_KEYS = {"seed", "dataset", "train", "attack", "attacks", "settings", "n_pairs",
                   "chunk", "benign_pool", "strict_filter"}


def _section(cfg: dict, key: str) -> dict:
    """Accept either a bare section or a full experiment config holding it."""
    if cfg and set(cfg) <= EXPERIMENT_KEYS:
        return dict(cfg.get(key, {}))
    return dict(cfg)


def _train_section(cfg: dict, role: str) -> dict:
    return dict(_section(cfg, "train").get(role, {})) if "train" in cfg else dict(cfg)


def _known(d: dict, cls) -> dict:
    names = set(cls.__dataclass_fields__)
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args, cfg, manifest) -> list[Path]:
    from .datasets import dump_json, gen_toy_dataset, save_image_set

    ds = {k: v for k, v in _section(cfg, "dataset").items()
          if k in ("class_count", "dims", "samples_per_class", "test_per_class")}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest.seed = seed
    train, test = gen_toy_dataset(ds.get("class_count", 10), tuple(ds.get("dims", (3, 16, 16))),
                                  ds.get("samples_per_class", 200), seed,
                                  ds.get("test_per_class"))
    out = save_image_set(train, args.out, "train") + save_image_set(test, args.out, "test")
    info = args.out / "dataset.json"
    dump_json({"kind": "toy", "seed": seed, **ds, "train": len(train), "test": len(test)}, info)
    return out + [info]


def cmd_train(args, cfg, manifest) -> list[Path]:
    from .models import ModelRole, build_model, checkpoint_load, checkpoint_save
    from .training import TrainConfig, build_mask_dataset, train_classifier, train_lan

    section = _known(_train_section(cfg, args.role), TrainConfig)
    if args.seed is not None:
        section["seed"] = args.seed
    tc = TrainConfig.from_dict(section)
    manifest.seed = tc.seed
    train = _load_split(args.data, "train", args.limit)
    test = _load_split(args.data, "test", args.test_limit)
    manifest.add_inputs(args.data)
    classes = int(max(train.labels.max(), test.labels.max()) + 1) if args.classes is None \
        else args.classes
    role = ModelRole(ROLE_NAMES[args.role])
    model = build_model(role, train.image_dims, classes, tc.seed)

    if args.role == "g":
        if args.classifier is None:
            raise UsageError("train --role g needs --classifier <f1 checkpoint>")
        f1 = checkpoint_load(args.classifier)
        manifest.add_inputs(args.classifier)
        model, report = train_lan(model, f1, train, tc, test)
    elif args.role == "f2":
        if args.g is None:
            raise UsageError("train --role f2 needs --g <attention net checkpoint>")
        g = checkpoint_load(args.g)
        manifest.add_inputs(args.g)
        model, report = train_classifier(model, build_mask_dataset(g, train), tc,
                                         build_mask_dataset(g, test))
    else:
        model, report = train_classifier(model, train, tc, test)

    ckpt = checkpoint_save(model, args.out / f"{args.role}.ckpt")
    rep = args.out / f"{args.role}.train.json"
    rep.write_text(report.to_json(include_timing=False) + "\n")
    manifest.stage_seconds["train"] = report.seconds
    print(f"{args.role}: train acc {report.train_accuracy:.4f}  test acc {report.test_accuracy:.4f}")
    return [ckpt, rep]


def cmd_attack(args, cfg, manifest) -> list[Path]:
    from .attacks import AttackConfig, run_attack, save_adversarial_set
    from .models import checkpoint_load

    ac = AttackConfig.from_dict(_known(_section(cfg, "attack"), AttackConfig))
    manifest.seed = args.seed
    victim = checkpoint_load(args.victim)
    data = _load_split(args.data, args.split, args.limit)
    manifest.add_inputs(args.victim, args.data)
    examples = run_attack(victim, data, args.attack, ac)
    paths = save_adversarial_set(examples, args.out, "adversarial", ac)
    ok = sum(e.success for e in examples)
    print(f"{args.attack}: {ok}/{len(examples)} successful")
    return paths


def cmd_detect(args, cfg, manifest) -> list[Path]:
    import numpy as np

    from .attacks import load_adversarial_set
    from .detector import check_roles, detect_batch, write_verdicts
    from .models import checkpoint_load

    f1, g, f2 = (checkpoint_load(p) for p in (args.f1, args.g, args.f2))
    manifest.add_inputs(args.f1, args.g, args.f2)
    check_roles(f1, g, f2)
    if args.data is None and args.adversarial is None:
        raise UsageError("detect needs --data and/or --adversarial")
    rows = []
    if args.data is not None:
        data = _load_split(args.data, args.split, args.limit)
        manifest.add_inputs(args.data)
        y1, y2, adv = detect_batch(f1, g, f2, data.images)
        rows += [(int(data.ids[i]), int(data.labels[i]), int(y1[i]), int(y2[i]), bool(adv[i]),
                  "benign") for i in range(len(data))]
    if args.adversarial is not None:
        examples = load_adversarial_set(args.adversarial)
        manifest.add_inputs(args.adversarial)
        if not args.include_failed:
            examples = [e for e in examples if e.success]
        if examples:
            y1, y2, adv = detect_batch(f1, g, f2, np.stack([e.perturbed for e in examples]))
            rows += [(e.source_id, e.y_true, int(y1[i]), int(y2[i]), bool(adv[i]), e.attack)
                     for i, e in enumerate(examples)]
    path = write_verdicts(args.out / "verdicts.csv", rows)
    flagged = sum(r[4] for r in rows)
    print(f"{flagged}/{len(rows)} flagged adversarial")
    return [path]


def cmd_eval(args, cfg, manifest) -> list[Path]:
    from .evaluation import ExperimentConfig, metrics_table, run_experiment

    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        ec = ExperimentConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(f"bad experiment config: {exc}")
    manifest.seed = ec.seed
    result = run_experiment(ec)
    paths = result.save(args.out)
    manifest.stage_seconds = {k: round(v, 3) for k, v in result.timings.items()}
    print(metrics_table(result.report))
    return paths


def cmd_export_masks(args, cfg, manifest) -> list[Path]:
    from .attacks import load_adversarial_set
    from .evaluation import export_mask_images
    from .models import ModelRole, checkpoint_load, predict_batch

    g = checkpoint_load(args.g)
    if g.role is not ModelRole.ATTENTION_NET:
        from .detector import RoleMismatchError
        raise RoleMismatchError(f"--g holds a {g.role.value} model")
    manifest.add_inputs(args.g)
    if args.adversarial is not None:
        examples = load_adversarial_set(args.adversarial)[: args.limit]
        manifest.add_inputs(args.adversarial)
        import numpy as np
        x = np.stack([e.original for e in examples])
        xs = np.stack([e.perturbed for e in examples])
        m, ms = predict_batch(g, x), predict_batch(g, xs)
        # benign image, its mask, adversarial image, its mask
        items = [(x[i], m[i], xs[i], ms[i]) for i in range(len(examples))]
    elif args.data is not None:
        data = _load_split(args.data, args.split, args.limit)
        manifest.add_inputs(args.data)
        masks = predict_batch(g, data.images)
        items = [(data.images[i], masks[i]) for i in range(len(data))] if args.pairs else list(masks)
    else:
        raise UsageError("export-masks needs --data or --adversarial")
    return export_mask_images(items, args.out)


COMMANDS = {"gen-toy": cmd_gen_toy, "train": cmd_train, "attack": cmd_attack,
            "detect": cmd_detect, "eval": cmd_eval, "export-masks": cmd_export_masks}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--config", type=Path, default=None, help="JSON config file")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="landet", description="Classification/interpretation contrastive "
                     "detection of adversarial images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-toy", parents=[common], help="write the synthetic toy dataset")

    p = sub.add_parser("train", parents=[common], help="train one model role")
    p.add_argument("--role", choices=sorted(ROLE_NAMES), required=True)
    p.add_argument("--data", type=Path, required=True, help="gen-toy output or CIFAR-10 dir")
    p.add_argument("--classifier", type=Path, help="f1 checkpoint (role g)")
    p.add_argument("--g", type=Path, help="attention net checkpoint (role f2)")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="first-k training images")
    p.add_argument("--test-limit", type=int, default=None)

    p = sub.add_parser("attack", parents=[common], help="craft adversarial examples")
    p.add_argument("--victim", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--attack", choices=["fgsm", "jsma", "cw_l2"], required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("detect", parents=[common], help="write a verdict CSV")
    p.add_argument("--f1", type=Path, required=True)
    p.add_argument("--g", type=Path, required=True)
    p.add_argument("--f2", type=Path, required=True)
    p.add_argument("--data", type=Path, help="benign images")
    p.add_argument("--adversarial", type=Path, help="adversarial set directory")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--include-failed", action="store_true",
                   help="also score unsuccessful attack outputs")

    sub.add_parser("eval", parents=[common], help="full experiment and report bundle")

    p = sub.add_parser("export-masks", parents=[common], help="write masks as PGM files")
    p.add_argument("--g", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--adversarial", type=Path)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--pairs", action="store_true", help="draw each image beside its mask")
    return parser


def manifest_name(args) -> str:
    """``train`` manifests carry the role so several models can share one directory."""
    if args.command == "train":
        return f"manifest-train-{args.role}.json"
    return "manifest.json"


def _cap_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; --threads only affects child processes")
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        _cap_threads(args.threads)
        cfg = _read_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, argv, args.config and str(args.config), args.seed)
        if args.config is not None:
            manifest.add_inputs(args.config)
        artifacts = COMMANDS[args.command](args, cfg, manifest)
        manifest.wall_clock_seconds = round(time.perf_counter() - start, 3)
        manifest.write(args.out, artifacts, manifest_name(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"landet: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"landet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
