"""Epoch loop, early stopping, cross-validated runs, hyperparameter grid.

Determinism contract: every number in a run report is a pure function of
(manifest contents, hyper config, network config, loss config, augmentation
spec). Epoch shuffles draw from (hyper.seed, epoch_index); augmentation draw
k of epoch e uses draw_index e*len(records)+k; fold f trains a fresh network
seeded network_config.seed + f.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import Tensor
from .data import AugmentationSpec, Manifest, SampleRecord, augment, load_sample, resize
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    fold_records,
    kfold_plan,
    report_from_confusion,
    split_622,
)
from .model import NetworkConfig, NetworkState, build_network, forward, total_loss
from .nn import AdamState, LossConfig, adam_step, bce_loss


@dataclass
class HyperConfig:
    learning_rate: float = 4e-4
    filter_size: int | None = None  # widest encoder width; None keeps the network config lists
    batch_size: int = 16
    k: int = 10
    epochs_cap: int = 50
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.learning_rate <= 0:
            errs.append("hyper.learning_rate must be positive")
        if self.filter_size is not None:
            f = self.filter_size
            if f < 8 or f > 512 or (f & (f - 1)) != 0:
                errs.append("hyper.filter_size must be a power of 2 in [8, 512]")
        if self.batch_size < 1:
            errs.append("hyper.batch_size must be >= 1")
        if self.k < 2:
            errs.append("hyper.k must be >= 2")
        if self.epochs_cap < 1:
            errs.append("hyper.epochs_cap must be >= 1")
        if self.seed < 0:
            errs.append("hyper.seed must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "filter_size": self.filter_size,
                "batch_size": self.batch_size, "k": self.k,
                "epochs_cap": self.epochs_cap, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown hyper config keys: {', '.join(unknown)}")
        return cls(**d)


def apply_filter_size(config: NetworkConfig, hyper: HyperConfig) -> NetworkConfig:
    """filter_size names the widest encoder width; the rest halve from it
    (and the decoder mirrors), before base_filter_scale."""
    if hyper.filter_size is None:
        return config
    f = hyper.filter_size
    enc = tuple(max(1, f >> i) for i in range(4))
    return replace(config, encoder_filters=enc, decoder_filters=enc[::-1])


@dataclass
class EarlyStopPolicy:
    patience_epochs: int = 1


def check_early_stop(history: list[float], policy: EarlyStopPolicy) -> bool:
    """True iff the last patience_epochs deltas are all strictly positive."""
    if not history:
        raise ValueError("check_early_stop: history must be nonempty")
    p = policy.patience_epochs
    if len(history) < p + 1:
        return False
    return all(history[-i] > history[-i - 1] for i in range(1, p + 1))


class SampleCache:
    """Resized (image, mask) arrays keyed by record paths.

    Safe to share across fold threads: a racing double-load stores the same
    deterministic arrays, and entries are never mutated after insertion.
    """

    def __init__(self, input_size: int, input_channels: int):
        self.input_size = input_size
        self.input_channels = input_channels
        self._store: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
        key = record.image_path
        hit = self._store.get(key)
        if hit is None:
            image, mask = load_sample(record)
            if image.shape[0] != self.input_channels:
                raise ValueError(
                    f"{record.image_path}: has {image.shape[0]} channels, network expects "
                    f"{self.input_channels}")
            img = resize(image, self.input_size, kind="image").data
            msk = resize(mask, self.input_size, kind="mask").data
            hit = (img, msk)
            self._store[key] = hit
        return hit


def _stack_batch(records, cache: SampleCache, aug: AugmentationSpec | None,
                 draw_base: int, positions) -> tuple[Tensor, Tensor]:
    images, masks = [], []
    for pos, rec in zip(positions, records):
        img, msk = cache.get(rec)
        if aug is not None:
            img_t, msk_t = augment(Tensor(img), Tensor(msk), aug, draw_base + pos)
            img, msk = img_t.data, msk_t.data
        images.append(img)
        masks.append(msk)
    return Tensor(np.stack(images)), Tensor(np.stack(masks))


def train_epoch(state: NetworkState, records: list[SampleRecord], hyper: HyperConfig,
                adam: AdamState, aug: AugmentationSpec | None, epoch_index: int,
                loss_cfg: LossConfig | None = None, cache: SampleCache | None = None) -> float:
    """One pass over records in (hyper.seed, epoch_index)-shuffled order;
    returns the sample-weighted mean training loss."""
    if not records:
        raise ValueError("train_epoch: records must be nonempty")
    loss_cfg = loss_cfg or LossConfig()
    cache = cache or SampleCache(state.config.input_size, state.config.input_channels)
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, epoch_index]))
    order = rng.permutation(len(records))
    n = len(records)
    draw_base = epoch_index * n
    total = 0.0
    for start in range(0, n, hyper.batch_size):
        batch_idx = order[start:start + hyper.batch_size]
        batch = [records[int(i)] for i in batch_idx]
        try:
            images, masks = _stack_batch(batch, cache, aug, draw_base,
                                         [start + j for j in range(len(batch))])
            seg, edge, _ = forward(state, images)
            loss = total_loss(seg, edge, masks, loss_cfg, state.params)
            state.params.zero_grad()
            loss.backward()
            adam_step(state.params, adam)
            total += loss.item() * len(batch)
        except ValueError as exc:
            raise ValueError(f"batch {start // hyper.batch_size}: {exc}") from exc
    return total / n


def evaluate(state: NetworkState, records: list[SampleRecord],
             cache: SampleCache | None = None, threshold: float = 0.5,
             batch_size: int = 8) -> tuple[ConfusionMatrix, MetricsReport]:
    """Un-augmented forward over records; merged confusion plus
    pixel-weighted BCE."""
    if not records:
        raise ValueError("evaluate: records must be nonempty")
    cache = cache or SampleCache(state.config.input_size, state.config.input_channels)
    cm = ConfusionMatrix()
    bce_sum = 0.0
    pixel_sum = 0
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        images, masks = _stack_batch(batch, cache, None, 0, range(len(batch)))
        seg, _, _ = forward(state, images)
        cm = cm + confusion(seg, masks, threshold)
        npix = masks.size
        bce_sum += bce_loss(seg, masks).item() * npix
        pixel_sum += npix
    return cm, report_from_confusion(cm, bce_sum / pixel_sum)


def validation_loss(state: NetworkState, records: list[SampleRecord],
                    loss_cfg: LossConfig, cache: SampleCache | None = None,
                    batch_size: int = 8) -> float:
    """Sample-weighted composite loss on un-augmented records."""
    cache = cache or SampleCache(state.config.input_size, state.config.input_channels)
    total = 0.0
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        images, masks = _stack_batch(batch, cache, None, 0, range(len(batch)))
        seg, edge, _ = forward(state, images)
        total += total_loss(seg, edge, masks, loss_cfg, state.params).item() * len(batch)
    return total / len(records)


@dataclass
class FoldResult:
    fold: int
    epochs_run: int
    train_losses: list[float]
    val_losses: list[float]
    confusion: ConfusionMatrix
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"fold": self.fold, "epochs_run": self.epochs_run,
                "train_losses": self.train_losses, "val_losses": self.val_losses,
                "confusion": self.confusion.to_dict(), "report": self.report.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(fold=int(d["fold"]), epochs_run=int(d["epochs_run"]),
                   train_losses=[float(x) for x in d["train_losses"]],
                   val_losses=[float(x) for x in d["val_losses"]],
                   confusion=ConfusionMatrix.from_dict(d["confusion"]),
                   report=MetricsReport.from_dict(d["report"]))


@dataclass
class TrainRunReport:
    network_config: dict
    hyper: dict
    loss_config: dict
    augmentation: dict | None
    folds: list[FoldResult]
    aggregate_confusion: ConfusionMatrix
    aggregate: MetricsReport
    wall_clock_seconds: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        # wall clock deliberately excluded: reports must be byte-identical
        # across reruns of the same config
        return {"network_config": self.network_config, "hyper": self.hyper,
                "loss_config": self.loss_config, "augmentation": self.augmentation,
                "folds": [f.to_dict() for f in self.folds],
                "aggregate_confusion": self.aggregate_confusion.to_dict(),
                "aggregate": self.aggregate.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunReport":
        return cls(network_config=d["network_config"], hyper=d["hyper"],
                   loss_config=d["loss_config"], augmentation=d["augmentation"],
                   folds=[FoldResult.from_dict(f) for f in d["folds"]],
                   aggregate_confusion=ConfusionMatrix.from_dict(d["aggregate_confusion"]),
                   aggregate=MetricsReport.from_dict(d["aggregate"]))


def _train_until_stop(state: NetworkState, train_recs, val_recs, hyper: HyperConfig,
                      aug, loss_cfg: LossConfig, cache: SampleCache,
                      policy: EarlyStopPolicy) -> tuple[list[float], list[float]]:
    adam = AdamState.for_params(state.params, hyper.learning_rate)
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(hyper.epochs_cap):
        train_losses.append(train_epoch(state, train_recs, hyper, adam, aug, epoch,
                                        loss_cfg, cache))
        val_losses.append(validation_loss(state, val_recs, loss_cfg, cache))
        if check_early_stop(val_losses, policy):
            break
    return train_losses, val_losses


def _aggregate_report(folds: list[FoldResult]) -> tuple[ConfusionMatrix, MetricsReport]:
    merged = ConfusionMatrix()
    bce_sum = 0.0
    pixel_sum = 0
    for fr in folds:
        merged = merged + fr.confusion
        bce_sum += fr.report.bce * fr.confusion.total
        pixel_sum += fr.confusion.total
    return merged, report_from_confusion(merged, bce_sum / pixel_sum if pixel_sum else 0.0)


def _run_jobs(fn, indices, jobs: int) -> list:
    """Run fn over indices, optionally on a thread pool; results keep index
    order so parallel execution cannot change any reported number."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, indices))


def run_cv(manifest: Manifest, hyper: HyperConfig, network_config: NetworkConfig,
           aug: AugmentationSpec | None = None, loss_cfg: LossConfig | None = None,
           policy: EarlyStopPolicy | None = None, subject_wise: bool = True,
           jobs: int = 1) -> TrainRunReport:
    """k-fold cross-validation. Each fold trains a fresh network (seed+fold)
    on k-1 folds with early stopping monitored on one held-out training fold
    (for k=2 the single training fold doubles as the monitor), then evaluates
    on the remaining fold. Aggregate metrics merge pixel counts across folds.
    Folds are independent; jobs > 1 runs them on a thread pool.
    """
    started = time.monotonic()
    errs = hyper.validate()
    if errs:
        raise ValueError("invalid hyper config: " + "; ".join(errs))
    loss_cfg = loss_cfg or LossConfig()
    policy = policy or EarlyStopPolicy()
    net_cfg = apply_filter_size(network_config, hyper)
    plan = kfold_plan(manifest, hyper.k, hyper.seed, subject_wise=subject_wise)
    cache = SampleCache(net_cfg.input_size, net_cfg.input_channels)

    def run_fold(f: int) -> FoldResult:
        rest, test_recs = fold_records(manifest, plan, f)
        if hyper.k == 2:
            train_recs, val_recs = rest, rest
        else:
            val_fold = (f + 1) % hyper.k
            _, val_recs = fold_records(manifest, plan, val_fold)
            train_recs = [r for r in rest if r not in val_recs]
        state = build_network(replace(net_cfg, seed=net_cfg.seed + f))
        train_losses, val_losses = _train_until_stop(
            state, train_recs, val_recs, hyper, aug, loss_cfg, cache, policy)
        cm, report = evaluate(state, test_recs, cache)
        return FoldResult(fold=f, epochs_run=len(train_losses),
                          train_losses=train_losses, val_losses=val_losses,
                          confusion=cm, report=report)

    folds = _run_jobs(run_fold, range(hyper.k), jobs)
    merged, aggregate = _aggregate_report(folds)
    return TrainRunReport(
        network_config=net_cfg.to_dict(), hyper=hyper.to_dict(),
        loss_config=loss_cfg.to_dict(),
        augmentation=aug.to_dict() if aug is not None else None,
        folds=folds, aggregate_confusion=merged, aggregate=aggregate,
        wall_clock_seconds=time.monotonic() - started)


def train_622(manifest: Manifest, hyper: HyperConfig, network_config: NetworkConfig,
              aug: AugmentationSpec | None = None, loss_cfg: LossConfig | None = None,
              policy: EarlyStopPolicy | None = None) -> tuple[NetworkState, TrainRunReport]:
    """Single training on the 6/2/2 subject split; the trained state and a
    one-entry report evaluated on the test portion."""
    started = time.monotonic()
    errs = hyper.validate()
    if errs:
        raise ValueError("invalid hyper config: " + "; ".join(errs))
    loss_cfg = loss_cfg or LossConfig()
    policy = policy or EarlyStopPolicy()
    net_cfg = apply_filter_size(network_config, hyper)
    train_recs, val_recs, test_recs = split_622(manifest, hyper.seed)
    cache = SampleCache(net_cfg.input_size, net_cfg.input_channels)
    state = build_network(net_cfg)
    train_losses, val_losses = _train_until_stop(
        state, train_recs, val_recs, hyper, aug, loss_cfg, cache, policy)
    cm, report = evaluate(state, test_recs, cache)
    fold = FoldResult(fold=0, epochs_run=len(train_losses), train_losses=train_losses,
                      val_losses=val_losses, confusion=cm, report=report)
    report_out = TrainRunReport(
        network_config=net_cfg.to_dict(), hyper=hyper.to_dict(),
        loss_config=loss_cfg.to_dict(),
        augmentation=aug.to_dict() if aug is not None else None,
        folds=[fold], aggregate_confusion=cm, aggregate=report,
        wall_clock_seconds=time.monotonic() - started)
    return state, report_out


def _default_trial(manifest: Manifest, hyper: HyperConfig, network_config: NetworkConfig,
                   aug: AugmentationSpec | None, loss_cfg: LossConfig) -> float:
    """One Table-1 trial: train exactly one epoch on the 6/2/2 training
    portion, return validation BCE."""
    net_cfg = apply_filter_size(network_config, hyper)
    train_recs, val_recs, _ = split_622(manifest, network_config.seed)
    cache = SampleCache(net_cfg.input_size, net_cfg.input_channels)
    state = build_network(net_cfg)
    adam = AdamState.for_params(state.params, hyper.learning_rate)
    train_epoch(state, train_recs, hyper, adam, aug, 0, loss_cfg, cache)
    _, report = evaluate(state, val_recs, cache)
    return report.bce


def hyper_search(manifest: Manifest, grid: list[HyperConfig], network_config: NetworkConfig,
                 aug: AugmentationSpec | None = None, loss_cfg: LossConfig | None = None,
                 trial_fn=None, jobs: int = 1) -> list[dict]:
    """Train every grid config for exactly one epoch; rank ascending by
    validation BCE, ties broken by lower learning rate, then smaller filter
    size, then grid order. Per-config failures are recorded and skipped.
    Trials are independent; jobs > 1 runs them on a thread pool."""
    if not grid:
        raise ValueError("hyper_search: grid must be nonempty")
    loss_cfg = loss_cfg or LossConfig()
    trial_fn = trial_fn or _default_trial
    widest_default = max(network_config.encoder_filters)

    def run_trial(i: int) -> dict:
        hyper = grid[i]
        entry = {"grid_index": i, "hyper": hyper.to_dict(), "bce": None, "error": None}
        errs = hyper.validate()
        if errs:
            entry["error"] = "; ".join(errs)
        else:
            try:
                entry["bce"] = float(trial_fn(manifest, hyper, network_config, aug, loss_cfg))
            except Exception as exc:
                entry["error"] = str(exc)
        return entry

    results = _run_jobs(run_trial, range(len(grid)), jobs)

    def sort_key(entry):
        bce = entry["bce"] if entry["bce"] is not None else float("inf")
        h = entry["hyper"]
        filt = h["filter_size"] if h["filter_size"] is not None else widest_default
        return (bce, h["learning_rate"], filt, entry["grid_index"])

    ranked = sorted(results, key=sort_key)
    for rank, entry in enumerate(ranked, start=1):
        entry["rank"] = rank
    return ranked
