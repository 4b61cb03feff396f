"""Soft-Dice training, cross-validation folds and ensemble inference.

Training is single-threaded over iterations; only the convolution kernels
fan out to the worker pool. The batch drawn at iteration ``i`` depends only on
``(seed, i)``, so a run resumed from a checkpoint replays the exact batches of
an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .config import NetworkConfig, PreprocessConfig, TrainConfig
from .exceptions import GeometryError, ShapeError, TrainingError, ValidationError
from .layers import Array, softmax_channels, softmax_channels_backward
from .metrics import FOREGROUND_CLASSES, dice
from .network import AdamState, Network, init_parameters, load_checkpoint, save_checkpoint
from .phantom import load_manifest
from .postprocess import argmax_labels
from .preprocess import extract_slab, preprocess_image, preprocess_labels, slab_indices
from .volume import N_CLASSES, LabelVolume, Volume, read_labels, read_volume

logger = logging.getLogger("vncseg")

PathLike = Union[str, Path]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INFERENCE_SLICES = 8
LOSS_LOG_COLUMNS = ["iteration", "lr", "loss", "val_dice"]


# =============================================================================
# Loss, optimizer, schedule
# =============================================================================


def soft_dice_loss(
    probs: Array, target_onehot: Array, eps: float = 1e-5
) -> tuple[float, Array]:
    """Negative sum over classes of the soft Dice score, with its gradient.

    For each class ``c``, over the whole batch,
    ``D_c = (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)`` and the loss is
    ``-sum_c D_c``. Background is included, and a class absent from both
    prediction and target scores 1.

    Args:
        probs: Class probabilities ``(B, C, H, W)``.
        target_onehot: One-hot targets of the same shape.
        eps: Smoothing term in numerator and denominator.

    Returns:
        ``(loss, grad_probs)``.

    Raises:
        ShapeError: If the shapes differ.
    """
    if probs.shape != target_onehot.shape or probs.ndim < 2:
        raise ShapeError(
            f"soft_dice_loss shapes differ: probs {probs.shape}, target {target_onehot.shape}"
        )
    axes = tuple(i for i in range(probs.ndim) if i != 1)
    intersection = (probs * target_onehot).sum(axis=axes)
    denominator = probs.sum(axis=axes) + target_onehot.sum(axis=axes) + eps
    numerator = 2.0 * intersection + eps
    scores = numerator / denominator
    loss = -float(scores.sum())

    shape = [1] * probs.ndim
    shape[1] = probs.shape[1]
    num = numerator.reshape(shape)
    den = denominator.reshape(shape)
    grad = -(2.0 * target_onehot / den - num / den**2)
    return loss, grad.astype(probs.dtype, copy=False)


def adam_step(
    params: Mapping[str, Array],
    grads: Mapping[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
    t: int | None = None,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Args:
        params: Parameter arrays, updated in place.
        grads: Gradients keyed like ``params``.
        state: Moment buffers and step counter, updated in place.
        lr: Learning rate.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator floor.
        t: Step number (1-based). Defaults to ``state.step + 1``.

    Raises:
        ShapeError: If a gradient is missing or has the wrong shape.
        ValidationError: If ``t < 1``.
    """
    step = state.step + 1 if t is None else t
    if step < 1:
        raise ValidationError(f"Adam step must be >= 1, got {step}")
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or grad.shape != param.shape:
            raise ShapeError(
                f"Gradient for {name!r} has shape {None if grad is None else grad.shape}, "
                f"expected {param.shape}"
            )
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    state.step = step


def learning_rate(iteration: int, cfg: TrainConfig) -> float:
    """Step-decay schedule ``lr0 * decay_factor ** floor(iteration / decay_every)``.

    Example:
        >>> learning_rate(2000, TrainConfig())
        0.0003
    """
    return cfg.lr0 * cfg.decay_factor ** (iteration // cfg.decay_every)


# =============================================================================
# Cross-validation folds
# =============================================================================


@dataclass(frozen=True)
class Fold:
    """One outer fold: held-out test IDs and the inner train/validation split."""

    index: int
    test: list[str]
    train: list[str]
    val: list[str]


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of IDs to folds."""

    folds: list[Fold]
    seed: int

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready mapping."""
        return {
            "seed": self.seed,
            "folds": [
                {"index": f.index, "test": f.test, "train": f.train, "val": f.val}
                for f in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FoldPlan:
        """Rebuild from :meth:`to_dict` output."""
        return cls(
            folds=[
                Fold(int(f["index"]), list(f["test"]), list(f["train"]), list(f["val"]))
                for f in data["folds"]
            ],
            seed=int(data["seed"]),
        )


def make_folds(
    ids: Sequence[str], n_folds: int, seed: int, val_fraction: float = 0.2
) -> FoldPlan:
    """Split IDs into outer test folds with an inner train/validation split.

    IDs are shuffled with ``numpy.random.default_rng(seed)`` and cut into
    ``n_folds`` contiguous chunks whose sizes differ by at most one. For each
    fold the remaining IDs are shuffled again by the same generator and the
    first ``round(val_fraction * n)`` (at least one when two or more remain
    and ``val_fraction > 0``) become validation IDs.

    Raises:
        ValidationError: If ``n_folds`` is not in ``1..len(ids)`` or IDs repeat.
    """
    if len(set(ids)) != len(ids):
        raise ValidationError("make_folds needs unique IDs")
    if not 1 <= n_folds <= len(ids):
        raise ValidationError(f"n_folds must be in 1..{len(ids)}, got {n_folds}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(order)), n_folds)

    folds = []
    for index, chunk in enumerate(chunks):
        test = [order[i] for i in chunk]
        held = set(test)
        train, val = split_train_val([x for x in order if x not in held], rng, val_fraction)
        folds.append(Fold(index=index, test=test, train=train, val=val))
    return FoldPlan(folds=folds, seed=seed)


def split_train_val(
    ids: Sequence[str], rng: np.random.Generator, val_fraction: float = 0.2
) -> tuple[list[str], list[str]]:
    """Shuffle IDs and cut off a validation share.

    Validation gets ``round(val_fraction * n)`` IDs, at least one when two or
    more IDs exist and ``val_fraction > 0``, and never all of them.

    Returns:
        ``(train, val)``.
    """
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_val = int(round(val_fraction * len(shuffled)))
    if val_fraction > 0 and len(shuffled) >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, max(0, len(shuffled) - 1))
    return shuffled[n_val:], shuffled[:n_val]


# =============================================================================
# Data
# =============================================================================


@dataclass(frozen=True)
class Case:
    """A preprocessed image with its labels on the same grid.

    Attributes:
        case_id: Identifier.
        image: Normalized intensities.
        labels: Reference labels.
        native_labels: Labels on the original grid, for native-space evaluation.
    """

    case_id: str
    image: Volume
    labels: LabelVolume
    native_labels: LabelVolume | None = None

    def __post_init__(self) -> None:
        """Check that image and labels share a grid."""
        self.image.require_same_geometry(self.labels, f"image and labels of {self.case_id}")


def load_cases(
    data_dir: PathLike,
    domain: str,
    pre_cfg: PreprocessConfig,
    ids: Sequence[str] | None = None,
) -> list[Case]:
    """Load dataset cases, preprocessing raw ones on the fly.

    Args:
        data_dir: Directory with ``manifest.json``.
        domain: ``"vnc"`` or ``"ccta"``.
        pre_cfg: Preprocessing used for raw datasets.
        ids: Subset of case IDs in the desired order. Defaults to all.

    Returns:
        Cases in the requested order.
    """
    root = Path(data_dir)
    manifest = load_manifest(root)
    entries = {case["id"]: case for case in manifest["cases"]}
    wanted = list(ids) if ids is not None else list(entries)
    unknown = [i for i in wanted if i not in entries]
    if unknown:
        raise ValidationError(f"Unknown case IDs: {', '.join(unknown)}")

    cases = []
    for case_id in wanted:
        entry = entries[case_id]
        image = read_volume(root / entry[f"{domain}_path"])
        labels = read_labels(root / entry["labels_path"])
        if manifest.get("preprocessed"):
            native_path = entry.get("native_labels_path")
            native = read_labels(root / native_path) if native_path else None
        else:
            image.require_same_geometry(labels, f"image and labels of {case_id}")
            native = labels
            image = preprocess_image(image, pre_cfg)
            labels = preprocess_labels(labels, pre_cfg)
        logger.debug("Loaded case %s (%s) dims=%s", case_id, domain, image.dims)
        cases.append(Case(case_id=case_id, image=image, labels=labels, native_labels=native))
    return cases


class SliceDataset:
    """All ``(case, axial slice)`` pairs of a set of cases."""

    def __init__(
        self, cases: Sequence[Case], slab_depth: int, n_classes: int = N_CLASSES
    ) -> None:
        """Index the cases.

        Raises:
            ValidationError: If there are no cases.
            ShapeError: If cases differ in in-plane size.
        """
        if not cases:
            raise ValidationError("Dataset is empty")
        in_plane = {case.image.data.shape[1:] for case in cases}
        if len(in_plane) != 1:
            raise ShapeError(f"Cases differ in in-plane size: {sorted(in_plane)}")
        self.cases = list(cases)
        self.slab_depth = slab_depth
        self.n_classes = n_classes
        self._offsets = np.cumsum([0] + [case.image.data.shape[0] for case in self.cases])

    def __len__(self) -> int:
        """Number of slices."""
        return int(self._offsets[-1])

    def locate(self, index: int) -> tuple[int, int]:
        """Map a flat slice index to ``(case index, z)``."""
        case_index = int(np.searchsorted(self._offsets, index, side="right")) - 1
        return case_index, int(index - self._offsets[case_index])


def one_hot(labels: NDArray[Any], n_classes: int) -> NDArray[np.float32]:
    """One-hot encode ``(..., H, W)`` labels into ``(..., C, H, W)``."""
    classes = np.arange(n_classes).reshape((n_classes,) + (1,) * 2)
    return (labels[..., None, :, :] == classes).astype(np.float32)


def sample_batch(
    dataset: SliceDataset, batch_size: int, rng: np.random.Generator
) -> tuple[NDArray[np.float32], NDArray[np.float32]]:
    """Draw a mini-batch of 2.5D slabs and center-slice targets.

    ``(case, slice)`` pairs are drawn uniformly with replacement.

    Returns:
        Inputs ``(B, slab_depth, H, W)`` and one-hot targets ``(B, C, H, W)``.
    """
    if len(dataset) == 0:
        raise ValidationError("Cannot sample from an empty dataset")
    picks = rng.integers(0, len(dataset), size=batch_size)
    inputs = []
    labels = []
    for flat in picks:
        case_index, z = dataset.locate(int(flat))
        case = dataset.cases[case_index]
        inputs.append(extract_slab(case.image, z, dataset.slab_depth))
        labels.append(case.labels.data[z])
    return np.stack(inputs), one_hot(np.stack(labels), dataset.n_classes)


# =============================================================================
# Inference
# =============================================================================


def _pad_in_plane(slabs: Array, multiple: int) -> tuple[Array, int, int]:
    h, w = slabs.shape[-2:]
    if h < multiple or w < multiple:
        raise GeometryError(
            f"Slice size {w}x{h} is smaller than the network's minimum {multiple}x{multiple}"
        )
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        slabs = np.pad(slabs, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return slabs, h, w


def ensemble_predict(
    models: Sequence[Network], volume: Volume, slices_per_batch: int = INFERENCE_SLICES
) -> list[Volume]:
    """Average the softmax outputs of several models over every axial slice.

    Args:
        models: Networks evaluated in eval mode.
        volume: Preprocessed volume.
        slices_per_batch: Slices forwarded together.

    Returns:
        One float32 probability volume per class on the grid of ``volume``.

    Raises:
        ValidationError: If no models are given.
        ShapeError: If models disagree on class or channel count.
        GeometryError: If slices are smaller than the network's downsampling factor.
    """
    if not models:
        raise ValidationError("ensemble_predict needs at least one model")
    n_classes = models[0].config.n_classes
    depth = models[0].config.in_channels
    multiple = models[0].config.spatial_multiple
    for model in models[1:]:
        if model.config.n_classes != n_classes or model.config.in_channels != depth:
            raise ShapeError("Ensemble members disagree on class or channel count")
        multiple = max(multiple, model.config.spatial_multiple)

    nz = volume.data.shape[0]
    probs = np.zeros((n_classes,) + volume.data.shape, dtype=np.float32)
    for start in range(0, nz, slices_per_batch):
        zs = range(start, min(nz, start + slices_per_batch))
        slabs = np.stack([volume.data[slab_indices(nz, z, depth)] for z in zs]).astype(np.float32)
        slabs, h, w = _pad_in_plane(slabs, multiple)
        total: Array | None = None
        for model in models:
            member = softmax_channels(model.forward(slabs, training=False))
            total = member if total is None else total + member
        assert total is not None
        mean = (total / len(models))[:, :, :h, :w]
        probs[:, start : start + len(zs)] = mean.transpose(1, 0, 2, 3)
    return [volume.with_data(probs[c]) for c in range(n_classes)]


def mean_foreground_dice(models: Sequence[Network], cases: Sequence[Case]) -> float:
    """Mean Dice over foreground classes and cases of the argmax prediction."""
    scores = []
    for case in cases:
        predicted = argmax_labels(ensemble_predict(models, case.image))
        for class_id in FOREGROUND_CLASSES:
            scores.append(dice(predicted.data == class_id, case.labels.data == class_id))
    return float(np.mean(scores))


# =============================================================================
# Training loop
# =============================================================================


@dataclass
class TrainResult:
    """Outputs of a training run.

    Attributes:
        final_checkpoint: Checkpoint after the last iteration.
        best_checkpoint: Checkpoint with the best validation Dice (the final
            one when there is no validation set).
        history: Loss log with columns iteration, lr, loss, val_dice.
        best_val_dice: Best validation Dice, NaN without validation.
    """

    final_checkpoint: Path
    best_checkpoint: Path
    history: pd.DataFrame
    best_val_dice: float = math.nan

    @property
    def loss_trace(self) -> list[float]:
        """Training loss of every iteration."""
        return [float(v) for v in self.history["loss"]]


@dataclass
class Trainer:
    """Runs the soft-Dice training loop for one model.

    Example:
        >>> trainer = Trainer(train_cases, val_cases, TrainConfig(iterations=300),
        ...                   NetworkConfig(base_channels=8), out_dir="runs/fold_0")
        >>> result = trainer.run()
        >>> result.best_checkpoint
        PosixPath('runs/fold_0/model_best.ckpt.json')
    """

    train_cases: Sequence[Case]
    val_cases: Sequence[Case]
    cfg: TrainConfig
    net_cfg: NetworkConfig
    out_dir: PathLike
    resume_from: PathLike | None = None
    _rows: list[dict[str, float]] = field(default_factory=list, init=False, repr=False)

    def _paths(self) -> dict[str, Path]:
        root = Path(self.out_dir)
        return {
            "final": root / "model_final",
            "best": root / "model_best",
            "log": root / "loss_log.csv",
            "checkpoints": root / "checkpoints",
        }

    def _start(self) -> Network:
        if self.resume_from is None:
            return init_parameters(self.net_cfg, self.cfg.seed)
        net = load_checkpoint(self.resume_from)
        if net.config != self.net_cfg:
            raise ValidationError("Resume checkpoint was trained with a different network config")
        log_path = self._paths()["log"]
        if log_path.is_file():
            previous = pd.read_csv(log_path, float_precision="round_trip")
            previous = previous[previous["iteration"] < net.iteration]
            self._rows = previous.to_dict("records")
        logger.info("Resuming from %s at iteration %d", self.resume_from, net.iteration)
        return net

    def _write_log(self) -> pd.DataFrame:
        history = pd.DataFrame(self._rows, columns=LOSS_LOG_COLUMNS)
        history["iteration"] = history["iteration"].astype(int)
        history.to_csv(self._paths()["log"], index=False, na_rep="")
        return history

    def run(self) -> TrainResult:
        """Train, validate and checkpoint.

        Returns:
            Checkpoint paths and the loss history.

        Raises:
            TrainingError: If the loss becomes non-finite.
        """
        paths = self._paths()
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        dataset = SliceDataset(self.train_cases, self.net_cfg.in_channels, self.net_cfg.n_classes)
        net = self._start()
        stored = net.metadata.get("best_val_dice")
        best = math.nan if stored is None else float(stored)
        has_val = len(self.val_cases) > 0

        for iteration in range(net.iteration, self.cfg.iterations):
            rng = np.random.default_rng([self.cfg.seed, iteration])
            inputs, targets = sample_batch(dataset, self.cfg.batch_size, rng)
            logits = net.forward(inputs, training=True)
            probs = softmax_channels(logits)
            loss, grad_probs = soft_dice_loss(probs, targets, self.cfg.dice_eps)
            if not math.isfinite(loss):
                self._write_log()
                raise TrainingError(
                    f"Non-finite loss {loss} at iteration {iteration}", iteration=iteration
                )
            grads = net.backward(softmax_channels_backward(probs, grad_probs))
            lr = learning_rate(iteration, self.cfg)
            adam_step(net.parameters(), grads, net.adam, lr)
            net.iteration = iteration + 1

            row = {"iteration": iteration, "lr": lr, "loss": loss, "val_dice": math.nan}
            if (iteration + 1) % self.cfg.log_every == 0 or iteration == 0:
                logger.info("iter %d lr %.3g loss %.5f", iteration, lr, loss)

            done = iteration + 1 == self.cfg.iterations
            if has_val and ((iteration + 1) % self.cfg.val_every == 0 or done):
                score = mean_foreground_dice([net], self.val_cases)
                row["val_dice"] = score
                logger.info("iter %d validation dice %.4f", iteration, score)
                if math.isnan(best) or score > best:
                    best = score
                    net.metadata["best_val_dice"] = best
                    net.metadata["best_iteration"] = iteration + 1
                    save_checkpoint(net, paths["best"])
            self._rows.append(row)

            if self.cfg.checkpoint_every and (iteration + 1) % self.cfg.checkpoint_every == 0:
                save_checkpoint(net, paths["checkpoints"] / f"iter_{iteration + 1:06d}")

        net.metadata["best_val_dice"] = None if math.isnan(best) else best
        save_checkpoint(net, paths["final"])
        if not has_val:
            save_checkpoint(net, paths["best"])
        history = self._write_log()
        return TrainResult(
            final_checkpoint=paths["final"].with_name("model_final.ckpt.json"),
            best_checkpoint=paths["best"].with_name("model_best.ckpt.json"),
            history=history,
            best_val_dice=best,
        )


def train_model(
    train_cases: Sequence[Case],
    val_cases: Sequence[Case],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    out_dir: PathLike,
    resume_from: PathLike | None = None,
) -> TrainResult:
    """Train one model; see :class:`Trainer`.

    Args:
        train_cases: Cases to sample batches from.
        val_cases: Cases for best-checkpoint selection (may be empty).
        cfg: Optimization parameters.
        net_cfg: Architecture.
        out_dir: Directory for checkpoints and the loss log.
        resume_from: Checkpoint to continue from.

    Returns:
        TrainResult with checkpoint paths and loss history.
    """
    return Trainer(train_cases, val_cases, cfg, net_cfg, out_dir, resume_from).run()


def find_checkpoints(model_dir: PathLike) -> list[Path]:
    """Checkpoint manifests directly inside a directory, sorted by name."""
    root = Path(model_dir)
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.name.endswith(".ckpt.json"))


def save_fold_plan(plan: FoldPlan, path: PathLike) -> Path:
    """Write a fold plan as JSON."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(plan.to_dict(), indent=2) + os.linesep, encoding="utf-8")
    return target
