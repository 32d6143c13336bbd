"""Command-line entry point: ``lczlab generate|train|ablate|report``.

Configuration comes from an optional UTF-8 JSON file of flat dotted keys
(``"train.epochs": 5``); command-line flags override file values.  Exit
status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    PATCH_SIZE,
    DatasetSplits,
    LabelSpace,
    generate_synthetic,
    load_dataset,
    store_dataset,
)
from .errors import ConfigurationError, LczLabError, ParameterError
from .metrics import metric_report
from .models import (
    VARIANTS,
    FusionNetwork,
    LateFusionNet,
    ModelSpec,
    build,
    canonical_variant,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import ScaleSpec
from .training import TrainConfig, evaluate, predict_split, train, tune_alpha

logger = logging.getLogger(__name__)

GRID_SENTINEL = 255
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    """Everything one command needs, resolved from file keys and flags."""

    variant: str = "FM1"
    band_grouping: bool = False
    merge_labels: bool = False
    alpha: float | None = None
    attention_heads: int | None = None
    kernel_sizes: tuple | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data_path: str | None = None
    num_classes: int = 17
    per_class: int = 20
    noise: float = 1.0
    modality_split: str = "shared"
    informative: str = "both"
    fractions: tuple = (0.70, 0.15, 0.15)
    data_seed: int = 0
    out: str | None = None
    variants: tuple = ()
    checkpoint: str | None = None
    grid_width: int = 20
    grid_height: int = 20

    def model_spec(self, variant: str | None = None, num_classes: int | None = None) -> ModelSpec:
        k = self.num_classes if num_classes is None else num_classes
        space = LabelSpace.merged() if self.merge_labels else LabelSpace.original(k)
        if self.merge_labels and k != 17:
            raise ConfigurationError(f"label merging needs the 17 LCZ classes, dataset has {k}")
        v = canonical_variant(variant or self.variant)
        return ModelSpec(
            variant=v,
            band_grouping=self.band_grouping,
            label_space=space,
            attention_heads=self.attention_heads if v.startswith("FM2") else None,
            scale_spec=ScaleSpec(tuple(self.kernel_sizes)) if self.kernel_sizes and v.startswith("FM3") else None,
            alpha=self.alpha if v == "FM4" else None,
        )


# dotted key -> (attribute, converter); "train.*" keys map onto TrainConfig fields
_KEYS = {
    "model.variant": ("variant", str),
    "model.band_grouping": ("band_grouping", bool),
    "model.merge_labels": ("merge_labels", bool),
    "model.alpha": ("alpha", float),
    "model.attention_heads": ("attention_heads", int),
    "model.kernel_sizes": ("kernel_sizes", tuple),
    "data.path": ("data_path", str),
    "data.num_classes": ("num_classes", int),
    "data.per_class": ("per_class", int),
    "data.noise": ("noise", float),
    "data.modality_split": ("modality_split", str),
    "data.informative": ("informative", str),
    "data.fractions": ("fractions", tuple),
    "data.seed": ("data_seed", int),
    "out": ("out", str),
    "ablate.variants": ("variants", tuple),
    "report.checkpoint": ("checkpoint", str),
    "report.grid_width": ("grid_width", int),
    "report.grid_height": ("grid_height", int),
}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, conv, value):
    if value is None:
        return None
    if conv is bool and not isinstance(value, bool):
        raise ConfigurationError(f"config key {key!r} must be true or false, got {value!r}")
    try:
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"config key {key!r}: cannot interpret {value!r}") from exc


def resolve_config(values: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from flat dotted keys; unknown keys are rejected."""
    cfg = ExperimentConfig()
    train_kw = {}
    seed = values.get("seed")
    for key, value in values.items():
        if key == "seed":
            continue
        if key.startswith("train."):
            name = key[len("train.") :]
            if name not in _TRAIN_FIELDS:
                raise ConfigurationError(f"unknown config key {key!r}")
            train_kw[name] = value
        elif key in _KEYS:
            attr, conv = _KEYS[key]
            setattr(cfg, attr, _convert(key, conv, value))
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    if seed is not None:
        seed = _convert("seed", int, seed)
        train_kw.setdefault("seed", seed)
        if "data.seed" not in values:
            cfg.data_seed = seed
    try:
        cfg.train = TrainConfig(**train_kw)
    except TypeError as exc:
        raise ConfigurationError(f"invalid training configuration: {exc}") from exc
    cfg.variant = canonical_variant(cfg.variant)
    cfg.variants = tuple(canonical_variant(v) for v in cfg.variants)
    return cfg


def _read_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigurationError(f"{path}: top level must be an object of dotted keys")
    return values


def _flag_values(args: argparse.Namespace) -> dict:
    flags = {
        "model.variant": args.variant[0] if args.variant and args.command != "ablate" else None,
        "ablate.variants": args.variant if args.variant and args.command == "ablate" else None,
        "model.band_grouping": True if args.band_grouping else None,
        "model.merge_labels": True if args.merge_labels else None,
        "model.alpha": args.alpha,
        "train.epochs": args.epochs,
        "train.learning_rate": args.lr,
        "train.batch_size": args.batch_size,
        "train.seed": args.seed,
        "data.seed": args.seed,
        "out": args.out,
        "data.path": args.data,
        "report.checkpoint": args.checkpoint,
        "data.num_classes": args.num_classes,
        "data.per_class": args.per_class,
        "data.noise": args.noise,
        "data.modality_split": args.modality_split,
        "data.informative": args.informative,
    }
    return {k: v for k, v in flags.items() if v is not None}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.command != "ablate" and args.variant and len(args.variant) > 1:
        raise ConfigurationError(f"{args.command} takes a single --variant, got {args.variant}")
    values = _read_config_file(args.config) if args.config else {}
    values.update(_flag_values(args))
    return resolve_config(values)


# ---------------------------------------------------------------- shared steps


def _require_out(cfg: ExperimentConfig) -> Path:
    if not cfg.out:
        raise ConfigurationError("an output directory is required (--out)")
    return Path(cfg.out)


def _dataset(cfg: ExperimentConfig) -> DatasetSplits:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return generate_synthetic(
        num_classes=cfg.num_classes,
        per_class=cfg.per_class,
        seed=cfg.data_seed,
        noise=cfg.noise,
        modality_split=cfg.modality_split,
        informative=cfg.informative,
        fractions=tuple(cfg.fractions),
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _report_dict(net: FusionNetwork, split, splits: DatasetSplits):
    if len(split) == 0:
        return None
    cm = evaluate(net, split, stats=splits.stats)
    return dataclasses.asdict(metric_report(cm, net.spec.label_space))


def _fit(cfg: ExperimentConfig, splits: DatasetSplits, variant: str, out: Path) -> tuple[FusionNetwork, dict]:
    """Train one variant, write its artefacts to ``out``; returns the network and its summary."""
    spec = cfg.model_spec(variant, splits.num_classes)
    net = build(spec, seed=cfg.train.seed, input_size=PATCH_SIZE)
    net, log = train(net, splits, cfg.train)
    if isinstance(net, LateFusionNet) and cfg.alpha is None and len(splits.val) > 0:
        alpha = tune_alpha(net, splits.val, stats=splits.stats)
        net.alpha = alpha
        net.spec = dataclasses.replace(net.spec, alpha=alpha)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "checkpoint")
    log.to_csv(out / "train_log.csv", include_seconds=False)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for e in log.entries:
            w.writerow([e.epoch, f"{e.seconds:.3f}"])
    summary = {
        "spec": net.spec.to_json(),
        "train": dataclasses.asdict(cfg.train),
        "dataset_sha256": splits.fingerprint(),
        "counts": dict(zip(("train", "val", "test"), splits.counts)),
        "epochs_run": len(log),
        "best_epoch": log.best_epoch,
        "parameters": net.num_parameters(),
        "validation": _report_dict(net, splits.val, splits),
    }
    _write_json(out / "summary.json", summary)
    return net, summary


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = _require_out(cfg)
    path = store_dataset(out, _dataset(cfg))
    logger.info("wrote dataset to %s", path)
    return path


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _require_out(cfg)
    splits = _dataset(cfg)
    return _fit(cfg, splits, cfg.variant, out)[1]


def sort_rows(rows: list[dict]) -> list[dict]:
    """OA descending, ties by variant name; failed rows (no OA) last."""
    ok = sorted((r for r in rows if r.get("OA") is not None), key=lambda r: (-r["OA"], r["variant"]))
    failed = sorted((r for r in rows if r.get("OA") is None), key=lambda r: r["variant"])
    return ok + failed


ABLATION_COLUMNS = ("variant", "status", "OA", "OA_bu", "OA_n", "kappa", "MCC", "dataset_sha256", "error")


def _thread_cap(n: int) -> int:
    raw = os.environ.get("LCZLAB_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"LCZLAB_THREADS must be a positive integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigurationError(f"LCZLAB_THREADS must be a positive integer, got {raw!r}")
    return min(cap, n)


def cmd_ablate(cfg: ExperimentConfig) -> list[dict]:
    out = _require_out(cfg)
    variants = cfg.variants or (cfg.variant,)
    if len(set(variants)) != len(variants):
        raise ConfigurationError(f"duplicate variants in {list(variants)}")
    splits = _dataset(cfg)
    fingerprint = splits.fingerprint()
    eval_split = splits.test if len(splits.test) else splits.val

    def run(variant: str) -> dict:
        row = dict.fromkeys(ABLATION_COLUMNS)
        row.update(variant=variant, dataset_sha256=fingerprint)
        try:
            net, _ = _fit(cfg, splits, variant, out / variant)
            rep = metric_report(evaluate(net, eval_split, stats=splits.stats), net.spec.label_space)
            row.update(status="ok", OA=rep.oa, OA_bu=rep.oa_bu, OA_n=rep.oa_n, kappa=rep.kappa, MCC=rep.mcc)
        except (LczLabError, ArithmeticError, ValueError) as exc:
            logger.error("variant %s failed: %s", variant, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row

    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=_thread_cap(len(variants))) as pool:
        rows = sort_rows(list(pool.map(run, variants)))
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in ABLATION_COLUMNS])
    _write_json(out / "ablation.json", rows)
    return rows


@dataclass
class GridReport:
    """Labels of the first ``width * height`` patches laid out row-major."""

    width: int
    height: int
    cells: dict

    def to_csv(self, name: str) -> str:
        lines = [",".join(str(int(v)) for v in row) for row in self.cells[name]]
        return "\n".join(lines) + "\n"

    def to_pgm(self, name: str) -> bytes:
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.cells[name].astype(np.uint8).tobytes()


def grid_report(labels: dict, width: int = 20, height: int = 20) -> GridReport:
    if width < 1 or height < 1:
        raise ParameterError(f"grid size must be positive, got {width}x{height}")
    cells = {}
    for name, values in labels.items():
        values = np.asarray(values, dtype=np.int64)[: width * height]
        if values.size and values.max() >= GRID_SENTINEL:
            raise ConfigurationError(f"class index {values.max()} collides with the grid sentinel")
        grid = np.full(width * height, GRID_SENTINEL, dtype=np.int64)
        grid[: values.size] = values
        cells[name] = grid.reshape(height, width)
    return GridReport(width, height, cells)


def _inside(path: Path, root: Path) -> bool:
    path, root = path.resolve(), root.resolve()
    return path == root or root in path.parents


def cmd_report(cfg: ExperimentConfig) -> dict:
    out = _require_out(cfg)
    if not cfg.checkpoint or not cfg.data_path:
        raise ConfigurationError("report needs --checkpoint and --data")
    if _inside(out, Path(cfg.data_path)):
        raise ConfigurationError("report output must not be written into the dataset directory")
    net = load_checkpoint(cfg.checkpoint)
    splits = load_dataset(cfg.data_path)
    space = net.spec.label_space
    if space.source_classes != splits.num_classes:
        raise ConfigurationError(
            f"checkpoint expects {space.source_classes} source classes, dataset has {splits.num_classes}"
        )
    cm = evaluate(net, splits.test, stats=splits.stats)
    report = metric_report(cm, space)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")

    n = cfg.grid_width * cfg.grid_height
    subset = splits.test[:n]
    pred = predict_split(net, subset, splits.stats).argmax(axis=-1) if len(subset) else np.zeros(0, dtype=np.int64)
    truth = space.map(np.asarray(subset.labels))
    grid = grid_report({"truth": truth, net.spec.variant: pred}, cfg.grid_width, cfg.grid_height)
    for name in grid.cells:
        (out / f"grid_{name}.csv").write_text(grid.to_csv(name), encoding="utf-8")
        (out / f"grid_{name}.pgm").write_bytes(grid.to_pgm(name))
    return dataclasses.asdict(report)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate, "report": cmd_report}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lczlab", description="SAR-MSI fusion experiments for LCZ classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a deterministic synthetic dataset",
        "train": "train one variant and write checkpoint, logs and summary",
        "ablate": "train several variants on identical splits and tabulate test metrics",
        "report": "evaluate a checkpoint on a dataset's test split",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON file of flat dotted keys")
        p.add_argument("--variant", action="append", help=f"one of {', '.join(VARIANTS)} (repeat for ablate)")
        p.add_argument("--band-grouping", action="store_true", help="split SAR and MSI bands into groups")
        p.add_argument("--merge-labels", action="store_true", help="train and score in the 8 merged classes")
        p.add_argument("--alpha", type=float, help="FM4 U-Net weight (tuned on validation when omitted)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset directory (synthetic data is generated when omitted)")
        p.add_argument("--checkpoint", help="checkpoint directory (report)")
        p.add_argument("--num-classes", type=int, help="synthetic classes")
        p.add_argument("--per-class", type=int, help="synthetic patches per class")
        p.add_argument("--noise", type=float, help="synthetic noise level")
        p.add_argument("--modality-split", choices=("shared", "complementary"))
        p.add_argument("--informative", choices=("both", "sar", "msi"))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except (ConfigurationError, ParameterError) as exc:
        print(f"lczlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LczLabError, OSError, ArithmeticError) as exc:
        print(f"lczlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
