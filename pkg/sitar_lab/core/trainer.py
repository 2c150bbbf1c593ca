"""
Joint training of the VAE and the classifier, model selection and prediction.

Randomness is split into three independent streams derived from the run seed:
parameter initialisation, mini-batch shuffling and training noise (the
reparameterisation draw followed by the perturbation draw). Prediction uses
the posterior mean and consumes no randomness.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, NoReturn, Sequence

import numpy as np

from ..config.settings import ExperimentConfig
from ..domain.grouped import GroupedDataset, SplitKind, majority_only_split
from ..domain.metrics import GroupMetrics, group_metrics
from .errors import DatasetError, NonFiniteError, TrainingDivergedError
from .networks import SitarModel, build_model
from .objectives import Batch, total_loss
from .optim import Optimizer, make_optimizer
from .shortcut_proxy import ShortcutTracker, append_v_trajectory
from .tensor import Array, backward

logger = logging.getLogger(__name__)

PREDICT_BATCH = 256

METRIC_COLUMNS: tuple[str, ...] = (
    "epoch",
    "recon",
    "kl",
    "robust_ce",
    "consistency",
    "total",
    "val_balanced_acc",
    "id_acc",
    "ood_acc",
    "worst_group",
)


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    kl: float
    robust_ce: float
    consistency: float
    total: float
    val_balanced_acc: float
    id_acc: float
    ood_acc: float
    worst_group: float
    best_val_balanced_acc: float
    v: Array

    def as_row(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


@dataclass
class TrainState:
    model: SitarModel
    optimizer: Optimizer
    config: ExperimentConfig
    epoch: int = 0
    best_state: dict[str, Array] | None = None
    best_metric: float = -math.inf
    best_epoch: int = -1
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


@dataclass
class RunStreams:
    init: np.random.Generator
    shuffle: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
        return cls(
            np.random.default_rng(init),
            np.random.default_rng(shuffle),
            np.random.default_rng(noise),
        )


def make_model(
    config: ExperimentConfig,
    image_shape: Sequence[int],
    rng: np.random.Generator | None = None,
) -> SitarModel:
    return build_model(
        rng if rng is not None else RunStreams.from_seed(config.seed).init,
        image_shape=image_shape,
        latent_dim=config.latent_dim,
        conv_channels=config.conv_channels,
        hidden_units=config.hidden_units,
    )


def predict(model: SitarModel | TrainState, images: Array) -> np.ndarray:
    """argmax_k f(mu(x))_k; ties go to the lowest class index."""
    net = model.model if isinstance(model, TrainState) else model
    labels = []
    for start in range(0, images.shape[0], PREDICT_BATCH):
        mu, _ = net.encode(images[start : start + PREDICT_BATCH])
        logits = net.classify(mu).data
        labels.append(np.argmax(logits, axis=1))
    if not labels:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(labels).astype(np.int64)


def predict_split(model: SitarModel | TrainState, data: GroupedDataset) -> np.ndarray:
    out = []
    for start in range(0, len(data), PREDICT_BATCH):
        index = np.arange(start, min(start + PREDICT_BATCH, len(data)))
        out.append(predict(model, data.batch_images(index)))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: SitarModel | TrainState, data: GroupedDataset) -> GroupMetrics:
    return group_metrics(predict_split(model, data), data)


def _prepare(
    config: ExperimentConfig, data: Mapping[SplitKind, GroupedDataset]
) -> tuple[GroupedDataset, GroupedDataset]:
    missing = [k.value for k in (SplitKind.TRAIN, SplitKind.VAL) if k not in data]
    if missing:
        raise DatasetError(f"training needs train and val splits; missing {missing}")
    train, val = data[SplitKind.TRAIN], data[SplitKind.VAL]
    if config.majority_only:
        train, val = majority_only_split(train), majority_only_split(val)
    if len(train) < 2:
        raise DatasetError(f"training split has {len(train)} examples")
    return train, val


def train(
    config: ExperimentConfig,
    data: Mapping[SplitKind, GroupedDataset],
    *,
    v_trajectory_path: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainState:
    """Run the joint optimisation and keep the best balanced-validation checkpoint.

    The best parameters are restored at the end. A non-finite loss raises
    ``TrainingDivergedError`` carrying the state reset to the last good
    checkpoint.
    """
    train_split, val_split = _prepare(config, data)
    streams = RunStreams.from_seed(config.seed)
    model = make_model(config, train_split.image_shape, streams.init)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.learning_rate)
    state = TrainState(model=model, optimizer=optimizer, config=config)
    tracker = ShortcutTracker(config.v_momentum, config.balanced_correlation)
    test_in = data.get(SplitKind.TEST_IN)
    test_ood = data.get(SplitKind.TEST_OOD)

    logger.info(
        "Training %d epochs on %d examples (alpha=%g beta=%g lambda=%g m=%d isotropic=%s)",
        config.epochs,
        len(train_split),
        config.alpha,
        config.beta,
        config.lambda_cons,
        config.latent_dim,
        config.isotropic,
    )
    n = len(train_split)
    for epoch in range(1, config.epochs + 1):
        order = streams.shuffle.permutation(n)
        sums = dict.fromkeys(("recon", "kl", "robust_ce", "consistency", "total"), 0.0)
        v_sum = np.zeros(config.latent_dim)
        seen = batches = 0
        for start in range(0, n, config.batch_size):
            index = order[start : start + config.batch_size]
            if index.size < 2:
                logger.debug("Skipping trailing batch of %d example", index.size)
                continue
            batch = Batch(
                train_split.batch_images(index), train_split.y[index].astype(np.float64)
            )
            model.zero_grad()
            try:
                loss = total_loss(batch, model, config, streams.noise, tracker)
            except NonFiniteError as exc:
                _abort(state, epoch, str(exc))
            values = loss.as_floats()
            if not math.isfinite(values["total"]):
                _abort(state, epoch, f"non-finite loss {values}")
            backward(loss.total)
            optimizer.step()
            for key, value in values.items():
                sums[key] += value * index.size
            v_sum += loss.weights.v
            seen += index.size
            batches += 1
            logger.debug("epoch %d step %d total=%.4f", epoch, batches, values["total"])

        means = {k: s / max(seen, 1) for k, s in sums.items()}
        v_epoch = v_sum / max(batches, 1)
        state.epoch = epoch
        val_metrics = evaluate(model, val_split)
        id_acc = evaluate(model, test_in).micro if test_in is not None else math.nan
        ood = evaluate(model, test_ood) if test_ood is not None else None
        if val_metrics.balanced > state.best_metric:
            state.best_metric = val_metrics.balanced
            state.best_epoch = epoch
            state.best_state = model.state_dict()
        record = EpochRecord(
            epoch=epoch,
            val_balanced_acc=val_metrics.balanced,
            id_acc=id_acc,
            ood_acc=ood.micro if ood is not None else math.nan,
            worst_group=ood.worst_group if ood is not None else val_metrics.worst_group,
            best_val_balanced_acc=state.best_metric,
            v=v_epoch,
            **means,
        )
        state.history.append(record)
        if v_trajectory_path is not None:
            append_v_trajectory(v_trajectory_path, epoch, v_epoch)
        if on_epoch is not None:
            on_epoch(record)
        logger.info(
            "epoch %d: total=%.3f recon=%.3f kl=%.3f ce=%.3f cons=%.4f "
            "val_bal=%.3f id=%.3f ood=%.3f worst=%.3f",
            epoch,
            means["total"],
            means["recon"],
            means["kl"],
            means["robust_ce"],
            means["consistency"],
            record.val_balanced_acc,
            record.id_acc,
            record.ood_acc,
            record.worst_group,
        )
        if config.patience and epoch - state.best_epoch >= config.patience:
            logger.info("Early stop: no validation gain for %d epochs", config.patience)
            state.stopped_early = True
            break

    if state.best_state is not None:
        model.load_state_dict(state.best_state)
        logger.info(
            "Restored best checkpoint from epoch %d (val balanced %.3f)",
            state.best_epoch,
            state.best_metric,
        )
    return state


def _abort(state: TrainState, epoch: int, detail: str) -> NoReturn:
    if state.best_state is not None:
        state.model.load_state_dict(state.best_state)
    message = f"training diverged in epoch {epoch}: {detail}"
    logger.error(message)
    raise TrainingDivergedError(message, state)


def write_metrics_csv(path: str | Path, history: Sequence[EpochRecord]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for record in history:
            writer.writerow(
                [record.epoch, *(f"{record.as_row()[c]:.6f}" for c in METRIC_COLUMNS[1:])]
            )
    return target
