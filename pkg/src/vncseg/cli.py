"""Command-line entry point: ``vncseg <command> [options]``.

Commands:
    phantom gen   Write a synthetic dataset and its manifest.
    preprocess    Smooth, resample and normalize a dataset.
    train         Train one model (optionally on one cross-validation fold).
    predict       Segment a volume with every checkpoint in a directory.
    evaluate      Compare a prediction with reference labels.
    report        Write per-slice overlay images.
    crossval      Run the full cross-validation experiment.

Every command resolves its configuration as defaults < ``--config`` file <
explicit flags and writes the result next to its outputs. Errors print one
line ``vncseg: error [<code>] <message>`` to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .exceptions import CheckpointError, StorageError, ValidationError, VncSegError
from .metrics import CaseReport, aggregate_report, evaluate_case, structure_volumes
from .network import Network, checkpoint_paths, load_checkpoint
from .overlay import write_overlays
from .parallel import set_worker_count
from .phantom import PhantomSpec, generate_dataset, load_manifest, write_manifest
from .postprocess import argmax_labels, largest_component_filter
from .preprocess import (
    NEAREST,
    TRILINEAR,
    preprocess_image,
    preprocess_labels,
    resample_to,
)
from .training import (
    Case,
    ensemble_predict,
    find_checkpoints,
    load_cases,
    make_folds,
    save_fold_plan,
    split_train_val,
    train_model,
)
from .volume import CLASS_NAMES, LabelVolume, Volume, read_labels, read_volume, write_volume

logger = logging.getLogger("vncseg")

CONFIG_NAME = "config.json"

# flag -> (section, key) in the nested config mapping
_OVERRIDES: dict[str, tuple[Optional[str], str]] = {
    "seed": ("train", "seed"),
    "data": (None, "data_dir"),
    "out": (None, "out_dir"),
    "folds": ("train", "n_folds"),
    "iters": ("train", "iterations"),
    "batch": ("train", "batch_size"),
    "lr": ("train", "lr0"),
    "decay": ("train", "decay_factor"),
    "decay_every": ("train", "decay_every"),
    "sigma_mm": ("preprocess", "sigma_mm"),
    "spacing": ("preprocess", "target_spacing_mm"),
    "connectivity": (None, "connectivity"),
    "base_channels": ("network", "base_channels"),
    "native_space_eval": (None, "native_space_eval"),
    "train_domain": (None, "train_domain"),
    "test_domain": (None, "test_domain"),
}


# =============================================================================
# Configuration
# =============================================================================


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, the ``--config`` file and explicit flags."""
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    data = base.to_dict()
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None or value is False:
            continue
        target = data if section is None else data[section]
        target[key] = value
    return ExperimentConfig.from_dict(data)


def _configure_logging(verbose: bool) -> None:
    handlers = [h for h in logger.handlers if getattr(h, "_vncseg", False)]
    if handlers:
        handlers[0].stream = sys.stderr  # type: ignore[attr-defined]
    else:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        handler._vncseg = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _with_suffix(prefix: str, suffix: str) -> Path:
    return Path(prefix + suffix)


# =============================================================================
# Commands
# =============================================================================


def cmd_phantom_gen(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Generate a phantom dataset in ``cfg.data_dir``."""
    spec = PhantomSpec(size=args.size, spacing_mm=args.voxel_mm, noise_sd_hu=args.noise_sd)
    generate_dataset(args.n, cfg.data_dir, cfg.train.seed, spec)
    cfg.save(Path(cfg.data_dir) / CONFIG_NAME)
    return 0


def cmd_preprocess(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Write a preprocessed copy of ``cfg.data_dir`` into ``cfg.out_dir``.

    Both intensity domains are processed; native labels are kept alongside so
    evaluation can run on the original grid.
    """
    source = Path(cfg.data_dir)
    target = Path(cfg.out_dir)
    manifest = load_manifest(source)
    if manifest.get("preprocessed"):
        raise ValidationError(f"Dataset {source} is already preprocessed")

    cases = []
    for entry in manifest["cases"]:
        name = entry["id"]
        out: dict[str, Any] = {k: v for k, v in entry.items() if not k.endswith("_path")}
        labels = read_labels(source / entry["labels_path"])
        for domain in ("ccta", "vnc"):
            image = read_volume(source / entry[f"{domain}_path"])
            image.require_same_geometry(labels, f"{domain} image and labels of {name}")
            prepared = preprocess_image(image, cfg.preprocess)
            header, _ = write_volume(prepared, target / f"{name}_{domain}")
            out[f"{domain}_path"] = header.name
        prepared_labels = preprocess_labels(labels, cfg.preprocess)
        header, _ = write_volume(prepared_labels, target / f"{name}_labels")
        out["labels_path"] = header.name
        header, _ = write_volume(labels, target / f"{name}_labels_native")
        out["native_labels_path"] = header.name
        cases.append(out)
        logger.debug("Preprocessed %s", name)

    processed = dict(manifest, preprocessed=True, preprocess=cfg.preprocess.to_dict(), cases=cases)
    write_manifest(processed, target)
    cfg.save(target / CONFIG_NAME)
    logger.info("Preprocessed %d cases into %s", len(cases), target)
    return 0


def _manifest_ids(data_dir: str) -> list[str]:
    return [case["id"] for case in load_manifest(data_dir)["cases"]]


def cmd_train(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Train one model on a fold's training IDs, or on the whole dataset."""
    ids = _manifest_ids(cfg.data_dir)
    train_cfg = cfg.train
    if args.fold is not None:
        plan = make_folds(ids, cfg.train.n_folds, cfg.train.seed, cfg.train.val_fraction)
        if not 0 <= args.fold < len(plan.folds):
            raise ValidationError(f"--fold must be in 0..{len(plan.folds) - 1}, got {args.fold}")
        fold = plan.folds[args.fold]
        train_ids, val_ids = fold.train, fold.val
        train_cfg = replace(cfg.train, seed=cfg.train.seed + fold.index)
    else:
        rng = np.random.default_rng(cfg.train.seed)
        train_ids, val_ids = split_train_val(ids, rng, cfg.train.val_fraction)

    out_dir = Path(cfg.out_dir)
    cfg.save(out_dir / CONFIG_NAME)
    train_cases = load_cases(cfg.data_dir, cfg.train_domain, cfg.preprocess, train_ids)
    val_cases = (
        load_cases(cfg.data_dir, cfg.train_domain, cfg.preprocess, val_ids) if val_ids else []
    )
    result = train_model(
        train_cases, val_cases, train_cfg, cfg.network, out_dir, resume_from=args.resume
    )
    logger.info("Finished training: %s", result.best_checkpoint)
    return 0


def _load_models(model_dir: str) -> list[Network]:
    manifests = find_checkpoints(model_dir)
    if not manifests:
        raise CheckpointError(f"No checkpoints found in {model_dir}")
    logger.info("Ensemble of %d models from %s", len(manifests), model_dir)
    return [load_checkpoint(path) for path in manifests]


def segment(
    models: Sequence[Network], image: Volume, cfg: ExperimentConfig
) -> tuple[LabelVolume, list[Volume]]:
    """Preprocess, run the ensemble, decide labels and clean them up.

    Returns:
        Labels and per-class probabilities. Both are on the native grid of
        ``image`` when ``cfg.native_space_eval`` is set, else on the
        preprocessing grid.
    """
    prepared = preprocess_image(image, cfg.preprocess)
    probs = ensemble_predict(models, prepared)
    labels = largest_component_filter(argmax_labels(probs), cfg.connectivity)
    if cfg.native_space_eval:
        labels = LabelVolume.like(image, resample_to(labels, image, NEAREST).data)
        probs = [resample_to(p, image, TRILINEAR) for p in probs]
    return labels, probs


def cmd_predict(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Segment one volume with the ensemble in ``model_dir``."""
    models = _load_models(args.model_dir)
    image = read_volume(args.input)
    labels, probs = segment(models, image, cfg)

    write_volume(labels, args.out_prefix)
    volumes = {CLASS_NAMES[c]: v for c, v in structure_volumes(labels).items() if c > 0}
    _with_suffix(args.out_prefix, ".volumes.json").write_text(
        json.dumps({"volume_ml": volumes}, indent=2) + "\n", encoding="utf-8"
    )
    if args.save_probs:
        for class_id, prob in enumerate(probs):
            write_volume(prob, f"{args.out_prefix}.prob{class_id}")
    cfg.save(_with_suffix(args.out_prefix, ".config.json"))
    logger.info("Wrote prediction %s", args.out_prefix)
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Write a JSON report and a text table for one prediction."""
    prediction = read_labels(args.pred)
    reference = read_labels(args.ref)
    name = Path(args.pred).name.split(".")[0]
    report = aggregate_report([evaluate_case(prediction, reference, name)])
    out_json = Path(args.out_json)
    report.save(out_json, out_json.with_suffix(".txt"))
    cfg.save(out_json.with_name(out_json.stem + ".config.json"))
    sys.stdout.write(report.to_table())
    return 0


def cmd_report(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Write windowed overlays of a label volume on its image."""
    image = read_volume(args.image)
    labels = read_labels(args.labels)
    write_overlays(
        image, labels, args.out_dir, cfg.preprocess.window_lo_hu, cfg.preprocess.window_hi_hu
    )
    cfg.save(Path(args.out_dir) / CONFIG_NAME)
    return 0


def _evaluate_fold_case(
    models: Sequence[Network], case: Case, cfg: ExperimentConfig, out_dir: Path
) -> CaseReport:
    labels = largest_component_filter(
        argmax_labels(ensemble_predict(models, case.image)), cfg.connectivity
    )
    reference = case.labels
    if cfg.native_space_eval and case.native_labels is not None:
        labels = LabelVolume.like(
            case.native_labels, resample_to(labels, case.native_labels, NEAREST).data
        )
        reference = case.native_labels
    write_volume(labels, out_dir / "predictions" / f"{case.case_id}_pred")
    return evaluate_case(labels, reference, case.case_id)


def cmd_crossval(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    """Train one model per fold, evaluate held-out cases, aggregate the results."""
    out_dir = Path(cfg.out_dir)
    cfg.save(out_dir / CONFIG_NAME)
    ids = _manifest_ids(cfg.data_dir)
    plan = make_folds(ids, cfg.train.n_folds, cfg.train.seed, cfg.train.val_fraction)
    save_fold_plan(plan, out_dir / "folds.json")

    train_cases = {
        c.case_id: c for c in load_cases(cfg.data_dir, cfg.train_domain, cfg.preprocess)
    }
    if cfg.test_domain == cfg.train_domain:
        test_cases = train_cases
    else:
        test_cases = {
            c.case_id: c for c in load_cases(cfg.data_dir, cfg.test_domain, cfg.preprocess)
        }

    models_dir = out_dir / "models"
    reports: list[CaseReport] = []
    for fold in plan.folds:
        fold_dir = out_dir / f"fold_{fold.index}"
        logger.info(
            "Fold %d: %d train, %d val, %d test",
            fold.index,
            len(fold.train),
            len(fold.val),
            len(fold.test),
        )
        cfg.save(fold_dir / CONFIG_NAME)
        result = train_model(
            [train_cases[i] for i in fold.train],
            [train_cases[i] for i in fold.val],
            replace(cfg.train, seed=cfg.train.seed + fold.index),
            cfg.network,
            fold_dir,
        )
        for source, target in zip(
            checkpoint_paths(result.best_checkpoint),
            checkpoint_paths(models_dir / f"fold_{fold.index}"),
        ):
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(source, target)

        model = [load_checkpoint(result.best_checkpoint)]
        fold_reports = [
            _evaluate_fold_case(model, test_cases[i], cfg, fold_dir)
            for i in fold.test
        ]
        fold_report = aggregate_report(fold_reports)
        fold_report.save(fold_dir / "report.json", fold_dir / "report.txt")
        logger.info(
            "Fold %d held-out mean DSC %.4f", fold.index, fold_report.mean_foreground("dsc")
        )
        reports.extend(fold_reports)

    report = aggregate_report(reports)
    report.save(out_dir / "report.json", out_dir / "report.txt")
    sys.stdout.write(report.to_table())
    return 0


# =============================================================================
# Parser
# =============================================================================


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config JSON")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--data", metavar="DIR", help="dataset directory")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--folds", type=int, metavar="N", help="cross-validation folds (6)")
    common.add_argument("--iters", type=int, metavar="N", help="training iterations (10000)")
    common.add_argument("--batch", type=int, metavar="N", help="mini-batch size (32)")
    common.add_argument("--lr", type=float, metavar="X", help="initial learning rate (0.001)")
    common.add_argument("--decay", type=float, metavar="X", help="learning-rate factor (0.3)")
    common.add_argument("--decay-every", type=int, metavar="N", help="decay interval (2000)")
    common.add_argument("--sigma-mm", type=float, metavar="X", help="smoothing sigma (1.0)")
    common.add_argument("--spacing", type=float, metavar="X", help="target spacing mm (0.8)")
    common.add_argument("--connectivity", type=int, choices=(6, 26))
    common.add_argument("--base-channels", type=int, metavar="N", help="network width (32)")
    common.add_argument("--native-space-eval", action="store_true")
    common.add_argument("--train-domain", choices=("vnc", "ccta"))
    common.add_argument("--test-domain", choices=("vnc", "ccta"))
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with all subcommands."""
    common = _common_options()
    parser = argparse.ArgumentParser(prog="vncseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", help="synthetic datasets")
    phantom_commands = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_commands.add_parser("gen", parents=[common], help="generate phantoms")
    gen.add_argument("--n", type=int, default=18, help="number of phantoms")
    gen.add_argument("--size", type=int, default=64, help="cube edge in voxels")
    gen.add_argument("--voxel-mm", type=float, default=0.8, help="phantom voxel spacing")
    gen.add_argument("--noise-sd", type=float, default=20.0, help="noise SD in HU")
    gen.set_defaults(func=cmd_phantom_gen)

    pre = commands.add_parser("preprocess", parents=[common], help="preprocess a dataset")
    pre.set_defaults(func=cmd_preprocess)

    train = commands.add_parser("train", parents=[common], help="train one model")
    train.add_argument("--fold", type=int, metavar="K", help="train on fold K only")
    train.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    train.set_defaults(func=cmd_train)

    predict = commands.add_parser("predict", parents=[common], help="segment a volume")
    predict.add_argument("model_dir")
    predict.add_argument("input")
    predict.add_argument("out_prefix")
    predict.add_argument("--save-probs", action="store_true", help="write class probabilities")
    predict.set_defaults(func=cmd_predict)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score a prediction")
    evaluate.add_argument("pred")
    evaluate.add_argument("ref")
    evaluate.add_argument("out_json")
    evaluate.set_defaults(func=cmd_evaluate)

    report = commands.add_parser("report", parents=[common], help="overlay images")
    report.add_argument("image")
    report.add_argument("labels")
    report.add_argument("out_dir")
    report.set_defaults(func=cmd_report)

    crossval = commands.add_parser("crossval", parents=[common], help="full experiment")
    crossval.set_defaults(func=cmd_crossval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return the exit status."""
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    func: Callable[[argparse.Namespace, ExperimentConfig], int] = args.func
    try:
        try:
            cfg = resolve_config(args)
            set_worker_count(None)
            return func(args, cfg)
        except OSError as e:
            path = e.filename
            detail = e.strerror or str(e)
            raise StorageError(
                f"{detail}: {path}" if path is not None else detail,
                path=None if path is None else str(path),
            ) from e
    except VncSegError as e:
        message = " ".join(str(e).split())
        print(f"vncseg: error {message}", file=sys.stderr)
        return 1

