"""Training loop, gradual unfreezing, evaluation, and the analysis metrics."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DomainError
from .interaction import GROUP_ORDER, MODES, READOUTS, TREE_KINDS, SentenceModel, predict
from .optim import AdamState, optimizer_step
from .seeding import substream
from .treeio import Example


class ConfigError(ValueError):
    """Invalid configuration value; the CLI maps it to exit code 2."""


class TrainingError(RuntimeError):
    """A run that cannot continue, e.g. a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_interaction: float = 0.004
    lr_classifier: float = 0.01
    dropout_layers: float = 0.4
    dropout_embed: float = 0.05
    clip_threshold: float = 5.0
    d_e: int = 400
    d_h: int = 200
    hidden: int = 100
    gamma: float = 0.5
    epochs: int = 10
    seed: int = 0
    mode: str = "hir"
    tree_kind: str = "constituency"
    readout: str = "maxpool"
    gir_include_self: bool = False
    batch_norm: bool = True
    bn_momentum: float = 0.9
    gradual_unfreeze: bool = True
    epochs_per_stage: int = 1
    patience: int = 5
    min_count: int = 1
    init_scale: float = 0.08
    target_train_error: float = -1.0  # stop once train error <= this; negative disables

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("batch_size", "lr_interaction", "lr_classifier", "clip_threshold", "d_e", "d_h", "hidden", "epochs", "epochs_per_stage", "patience", "min_count", "init_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ("dropout_layers", "dropout_embed"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must lie in [0, 1), got {self.bn_momentum}")
        if self.d_h % 2:
            raise ConfigError(f"d_h must be even (two LSTM directions), got {self.d_h}")
        for name, allowed in (("mode", MODES), ("tree_kind", TREE_KINDS), ("readout", READOUTS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class UnfreezeSchedule:
    groups: tuple[str, ...] = GROUP_ORDER  # input end first, classifier last
    epochs_per_stage: int = 1

    def __post_init__(self):
        if self.epochs_per_stage < 1:
            raise ConfigError(f"epochs_per_stage must be >= 1, got {self.epochs_per_stage}")


def gradual_unfreeze(schedule: UnfreezeSchedule, epoch: int) -> set[str]:
    """Groups trainable at ``epoch`` (1-based): the last ceil(epoch / stage) from the classifier end."""
    if epoch < 1:
        raise DomainError(f"epochs are 1-based, got {epoch}")
    k = min(len(schedule.groups), math.ceil(epoch / schedule.epochs_per_stage))
    return set(schedule.groups[len(schedule.groups) - k :])


def apply_unfreeze(groups: dict[str, list[dc.Parameter]], active: set[str], locked: set[str] = frozenset()) -> None:
    """Set ``frozen`` flags; groups in ``locked`` stay frozen regardless."""
    for name, params in groups.items():
        for p in params:
            p.frozen = name not in active or name in locked


# ------------------------------------------------------------------- metrics


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_error: float
    valid_loss: float | None = None
    valid_error: float | None = None
    batches: int = 0


@dataclass
class MetricsTable:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)
    test_loss: float | None = None
    test_error: float | None = None

    def add(self, epoch: int, split: str, loss: float, error_rate: float) -> None:
        if not 0.0 <= error_rate <= 100.0:
            raise DomainError(f"error rate {error_rate} outside [0, 100]")
        self.rows.append((epoch, split, loss, error_rate))

    def to_csv(self) -> str:
        lines = ["epoch,split,loss,error_rate"]
        lines += [f"{e},{s},{loss:.6f},{err:.6f}" for e, s, loss, err in self.rows]
        if self.test_error is not None:
            lines.append(f"final,test,{self.test_loss:.6f},{self.test_error:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    def series(self, split: str) -> list[tuple[int, float, float]]:
        return [(e, loss, err) for e, s, loss, err in self.rows if s == split]


# ------------------------------------------------------------------ training


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _learning_rate_groups(model: SentenceModel, config: TrainConfig) -> list[tuple[list[dc.Parameter], float]]:
    groups = model.groups()
    interaction = [p for name, ps in groups.items() if name != "classifier" for p in ps]
    return [(interaction, config.lr_interaction), (groups["classifier"], config.lr_classifier)]


def train_epoch(
    model: SentenceModel,
    dataset: Sequence[Example],
    config: TrainConfig,
    state: AdamState,
    shuffle_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
) -> tuple[float, int]:
    """One pass of shuffled mini-batches; returns (mean training loss, batch count)."""
    if not dataset:
        raise DomainError("cannot train on an empty dataset")
    params = model.parameters()
    routes = _learning_rate_groups(model, config)
    total, count = 0.0, 0
    batches = _batches(len(dataset), config.batch_size, shuffle_rng)
    for b, idx in enumerate(batches):
        batch = [dataset[i] for i in idx]
        dc.zero_grad(params)
        with dc.Tape() as tape:
            loss, _ = model.batch_loss(batch, config.gamma, training=True, rng=dropout_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at batch {b} (examples {idx.tolist()})")
        dc.backward(loss, tape)
        dc.clip_global_norm([p for p in params if not p.frozen], config.clip_threshold)
        for group, lr in routes:
            optimizer_step(group, lr, state)
        total += value * len(batch)
        count += len(batch)
    return total / count, len(batches)


def score(model: SentenceModel, dataset: Sequence[Example], gamma: float) -> tuple[float, float]:
    """(mean joint loss, error rate %) in inference mode."""
    if not dataset:
        raise DomainError("cannot evaluate an empty dataset")
    total, wrong = 0.0, 0
    with dc.no_grad():
        for start in range(0, len(dataset), 64):
            batch = list(dataset[start : start + 64])
            loss, probs = model.batch_loss(batch, gamma, training=False)
            total += loss.item() * len(batch)
            wrong += sum(predict(p) != ex.sentence.label for p, ex in zip(probs, batch))
    return total / len(dataset), 100.0 * wrong / len(dataset)


def evaluate(model: SentenceModel, dataset: Sequence[Example]) -> float:
    """Error rate in percent, dropout off."""
    if not dataset:
        raise DomainError("cannot evaluate an empty dataset")
    probs = model.predict_proba(list(dataset))
    wrong = sum(predict(p) != ex.sentence.label for p, ex in zip(probs, dataset))
    return 100.0 * wrong / len(dataset)


def _snapshot(model: SentenceModel):
    values = [p.data.copy() for p in model.parameters()]
    head = model.head()
    return values, head.running_mean.copy(), head.running_var.copy()


def _restore(model: SentenceModel, snap) -> None:
    values, mean, var = snap
    for p, v in zip(model.parameters(), values):
        p.data[...] = v
    head = model.head()
    head.running_mean, head.running_var = mean.copy(), var.copy()


@dataclass
class FitResult:
    metrics: MetricsTable
    epochs_run: int
    best_epoch: int
    first_epoch_loss: float


def fit(
    model: SentenceModel,
    train: Sequence[Example],
    config: TrainConfig,
    valid: Sequence[Example] = (),
    test: Sequence[Example] = (),
    stream: str = "",
    locked: set[str] = frozenset(),
    log=None,
) -> FitResult:
    """Train with gradual unfreezing and early stopping on validation error.

    When ``valid`` is given the parameters of the best validation epoch are
    restored at the end.  ``locked`` groups are never unfrozen.  ``stream``
    namespaces the random sub-streams so that pipeline stages draw
    independently.
    """
    shuffle_rng = substream(config.seed, stream + "shuffle")
    dropout_rng = substream(config.seed, stream + "dropout")
    schedule = UnfreezeSchedule(tuple(n for n in GROUP_ORDER if n in model.groups()), config.epochs_per_stage)
    groups = model.groups()
    state = AdamState()
    table = MetricsTable()
    best = (math.inf, 0, None)
    stale = 0
    first_loss = math.nan
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        active = gradual_unfreeze(schedule, epoch) if config.gradual_unfreeze else set(groups)
        apply_unfreeze(groups, active, locked)
        train_loss, n_batches = train_epoch(model, train, config, state, shuffle_rng, dropout_rng)
        if epoch == 1:
            first_loss = train_loss
        train_error = evaluate(model, train)
        table.add(epoch, "train", train_loss, train_error)
        if log:
            log(f"epoch {epoch} train loss {train_loss:.6f} error {train_error:.2f}")
        if valid:
            v_loss, v_err = score(model, valid, config.gamma)
            table.add(epoch, "valid", v_loss, v_err)
            if log:
                log(f"epoch {epoch} valid loss {v_loss:.6f} error {v_err:.2f}")
            if v_err < best[0]:
                best, stale = (v_err, epoch, _snapshot(model)), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        if 0.0 <= config.target_train_error and train_error <= config.target_train_error:
            break
    apply_unfreeze(groups, set(groups), locked)
    best_epoch = epoch
    if valid and best[2] is not None:
        _restore(model, best[2])
        best_epoch = best[1]
    if test:
        table.test_loss, table.test_error = score(model, test, config.gamma)
    return FitResult(table, epoch, best_epoch, first_loss)


# ------------------------------------------------------------------ analysis


def rer(errors: dict[float, float]) -> dict[float, float]:
    """Relative error rate against the best entry: ``(err - min) / min``."""
    if not errors:
        raise DomainError("RER needs at least one error rate")
    low = min(errors.values())
    if low <= 0:
        raise DomainError(f"RER is undefined when the lowest error rate is {low}")
    return {g: (e - low) / low for g, e in errors.items()}


def sweep_csv(rows: Sequence[tuple[float, float]]) -> str:
    """``gamma,error_rate,rer`` sorted by gamma."""
    rows = sorted(rows)
    ratios = rer(dict(rows))
    lines = ["gamma,error_rate,rer"] + [f"{g:.6f},{e:.6f},{ratios[g]:.6f}" for g, e in rows]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Bucket:
    lo: int
    hi: int | None  # None for the open tail
    count: int
    error_rate: float


def bucket_index(length: int, width: int, n_closed: int = 10) -> int:
    if length < 0:
        raise DomainError(f"negative text length {length}")
    return min(length // width, n_closed)


def length_buckets(model: SentenceModel, dataset: Sequence[Example], width: int = 100) -> list[Bucket]:
    """Error rate per half-open length range ``[k*w, (k+1)*w)``, k < 10, plus ``[10w, inf)``."""
    if width <= 0:
        raise DomainError(f"bucket width must be positive, got {width}")
    if not dataset:
        return []
    probs = model.predict_proba(list(dataset))
    counts: dict[int, list[int]] = {}
    for p, ex in zip(probs, dataset):
        k = bucket_index(ex.sentence.raw_length, width)
        slot = counts.setdefault(k, [0, 0])
        slot[0] += 1
        slot[1] += predict(p) != ex.sentence.label
    return [
        Bucket(k * width, None if k == 10 else (k + 1) * width, n, 100.0 * wrong / n)
        for k, (n, wrong) in sorted(counts.items())
    ]


def buckets_csv(buckets: Sequence[Bucket]) -> str:
    lines = ["bucket_lo,bucket_hi,count,error_rate"]
    lines += [f"{b.lo},{'' if b.hi is None else b.hi},{b.count},{b.error_rate:.6f}" for b in buckets]
    return "\n".join(lines) + "\n"


def copy_model(model: SentenceModel) -> SentenceModel:
    return copy.deepcopy(model)
