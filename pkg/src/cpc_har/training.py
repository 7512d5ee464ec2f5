"""Training harness: loops, model selection, metrics, and random search.

Pretraining optimizes a contrastive loss with Adam at a constant rate and
early-stops on validation loss (patience over strict improvement).
Classifier fine-tuning always runs its full epoch budget with a step-decayed
rate and keeps the best-validation-macro-F1 epoch; the backbone stays frozen
because classifiers only ever see precomputed feature arrays.

Evaluation is five-fold user-disjoint cross-validation repeated over
classifier seeds; every dataset-role access is recorded in an audit log so
tests can prove that test data never influences model selection.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cpc_har.cpc import ContrastiveBatch, contrastive_loss
from cpc_har.data import (
    DataError,
    WindowedDataset,
    limited_label_indices,
    zscore_apply,
    zscore_fit,
)
from cpc_har.models import (
    ConfigError,
    ModelConfig,
    ModelParams,
    add_classifier,
    backbone_forward,
    classifier_forward,
    init_params,
)
from cpc_har.tensor import (
    OptimizerState,
    Rng,
    Tensor,
    adam_step,
    no_grad,
    softmax_cross_entropy,
    zero_grads,
)


@dataclass
class TrainConfig:
    """Optimization settings shared by pretraining and fine-tuning."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    epochs: int = 50
    patience: int = 5  # consulted by pretraining only
    seed: int = 0
    pretrain_fraction: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.pretrain_fraction <= 1.0:
            raise ConfigError(
                f"pretrain_fraction must be in (0, 1], got {self.pretrain_fraction}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d).validate()


class AuditLog:
    """Append-only trace of (operation, dataset-role) accesses.

    The selection-integrity invariant: test data may appear only under the
    'report' operation. ``assert_test_only_reported`` enforces it.
    """

    def __init__(self):
        self.events: list[tuple[str, str]] = []

    def record(self, operation: str, role: str) -> None:
        self.events.append((operation, role))

    def assert_test_only_reported(self) -> None:
        offenders = [op for op, role in self.events
                     if role == "test" and op != "report"]
        if offenders:
            raise AssertionError(
                f"test data touched outside reporting: {sorted(set(offenders))}"
            )


def lr_at_epoch(base_lr: float, epoch: int, mode: str) -> float:
    """Classification decays by 0.8 every 10 epochs; pretraining is flat."""
    if mode == "classify":
        return base_lr * 0.8 ** (epoch // 10)
    if mode == "pretrain":
        return base_lr
    raise ConfigError(f"unknown schedule mode {mode!r}")


def _batch_indices(order: np.ndarray, batch_size: int):
    """Consecutive chunks of a permutation; chunks below 2 rows are dropped."""
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        if len(idx) >= 2:
            yield idx


def _contrastive_eval_loss(params: ModelParams, windows: np.ndarray,
                           batch_size: int, rng: Rng) -> float:
    """Dropout-free loss over a dataset with a caller-fixed negative stream."""
    total, weight = 0.0, 0
    with no_grad():
        for idx in _batch_indices(np.arange(len(windows)), batch_size):
            z, c = backbone_forward(params, Tensor(windows[idx]), training=False)
            batch = ContrastiveBatch(z=z, c=c, horizon=params.config.horizon,
                                     num_negatives=params.config.num_negatives)
            loss = contrastive_loss(batch, params, rng)
            total += loss.item() * len(idx)
            weight += len(idx)
    return total / weight


def pretrain(model_config: ModelConfig, train_ds: WindowedDataset,
             val_ds: WindowedDataset, config: TrainConfig,
             audit: AuditLog | None = None) -> tuple[ModelParams, list[dict]]:
    """Contrastive pretraining with best-validation-epoch parameter return.

    Mini-batches are reshuffled each epoch (a trailing batch below 2 windows
    is dropped; datasets smaller than batch_size train as one batch).
    Validation re-uses an identical negative/anchor stream every epoch so
    the early-stopping comparison is like against like. Stops after
    ``patience`` consecutive epochs without strict improvement
    (best - 1e-6), or at the epoch budget.
    """
    config.validate()
    model_config.validate()
    if len(train_ds) < 2:
        raise DataError(
            f"pretraining needs at least 2 windows for one contrastive batch, "
            f"got {len(train_ds)}"
        )
    if len(val_ds) < 2:
        raise DataError(f"validation needs at least 2 windows, got {len(val_ds)}")
    root = Rng(config.seed)
    params = init_params(model_config, root.child("init"))
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    xs = train_ds.windows
    best_val = np.inf
    best_epoch = -1
    best_snapshot: dict[str, np.ndarray] = {}
    bad_epochs = 0
    curves: list[dict] = []
    for epoch in range(config.epochs):
        if audit is not None:
            audit.record("pretrain-fit", "train")
        lr = lr_at_epoch(config.lr, epoch, "pretrain")
        order = root.child("shuffle", epoch).permutation(len(xs))
        epoch_rng = root.child("epoch", epoch)
        losses, weights = [], []
        for bi, idx in enumerate(_batch_indices(order, config.batch_size)):
            brng = epoch_rng.child("batch", bi)
            z, c = backbone_forward(params, Tensor(xs[idx]), training=True,
                                    rng=brng.child("fwd"))
            batch = ContrastiveBatch(z=z, c=c, horizon=model_config.horizon,
                                     num_negatives=model_config.num_negatives)
            loss = contrastive_loss(batch, params, brng.child("loss"))
            zero_grads(params.tensors)
            loss.backward()
            adam_step(params.tensors, state, lr=lr)
            losses.append(loss.item())
            weights.append(len(idx))
        if audit is not None:
            audit.record("pretrain-select", "val")
        val_loss = _contrastive_eval_loss(params, val_ds.windows,
                                          config.batch_size, root.child("val"))
        curves.append({
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "val_loss": float(val_loss),
            "lr": lr,
        })
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = {n: t.data.copy() for n, t in params.tensors.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    for name, arr in best_snapshot.items():
        params.tensors[name].data = arr
    params.meta["best_epoch"] = best_epoch
    params.meta["epochs_trained"] = len(curves)
    return params, curves


def extract_features(params: ModelParams, windows, batch_size: int = 256) -> np.ndarray:
    """Final-timestep context vector per window, eval mode, no graph."""
    if isinstance(windows, WindowedDataset):
        windows = windows.windows
    out = np.empty((len(windows), params.config.context_dim), dtype=np.float32)
    with no_grad():
        for lo in range(0, len(windows), batch_size):
            x = Tensor(windows[lo:lo + batch_size])
            _, c = backbone_forward(params, x, training=False)
            out[lo:lo + batch_size] = c.data[:, -1, :]
    return out


def predict_classes(params: ModelParams, features: np.ndarray,
                    batch_size: int = 4096) -> np.ndarray:
    preds = np.empty(len(features), dtype=np.int64)
    with no_grad():
        for lo in range(0, len(features), batch_size):
            logits = classifier_forward(params, Tensor(features[lo:lo + batch_size]),
                                        training=False)
            preds[lo:lo + batch_size] = logits.data.argmax(axis=1)
    return preds


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over classes that occur at all.

    A class present in neither truth nor prediction is excluded from the
    mean; one that occurs but has no true positives contributes 0.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or len(y_true) < 1:
        raise ValueError(f"need matching 1-D labels, got {y_true.shape} / {y_pred.shape}")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise IndexError(f"{name} labels outside [0, {num_classes})")
    scores = []
    for cls in range(num_classes):
        tp = int(((y_true == cls) & (y_pred == cls)).sum())
        fp = int(((y_true != cls) & (y_pred == cls)).sum())
        fn = int(((y_true == cls) & (y_pred != cls)).sum())
        if tp + fp + fn == 0:
            continue  # absent from both sides
        scores.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return float(np.mean(scores))


def finetune(params: ModelParams, head: str, train_ds: WindowedDataset,
             val_ds: WindowedDataset, config: TrainConfig, *,
             num_classes: int | None = None,
             features: tuple[np.ndarray, np.ndarray] | None = None,
             audit: AuditLog | None = None) -> list[dict]:
    """Train a classifier head on frozen features; keep the best-val epoch.

    Features are computed once from the frozen backbone (or passed in by a
    caller that already has them); gradient flow therefore cannot reach the
    backbone. Runs the full epoch budget with the decayed schedule and
    restores the parameters (and batch-norm buffers) of the epoch with the
    highest validation macro-F1.
    """
    config.validate()
    if train_ds.labels is None or val_ds.labels is None:
        raise DataError("fine-tuning needs labeled train and validation data")
    rng = Rng(config.seed)
    if num_classes is None:
        # floor of 2: single-class data still trains a valid head, and the
        # unused output class drops out of macro-F1
        num_classes = max(2, int(max(train_ds.labels.max(), val_ds.labels.max())) + 1)
    add_classifier(params, head, num_classes, rng.child("clf-init"))
    if features is None:
        f_train = extract_features(params, train_ds, config.batch_size)
        f_val = extract_features(params, val_ds, config.batch_size)
    else:
        f_train, f_val = features
    y_train = train_ds.labels
    y_val = val_ds.labels
    clf = params.subset(params.classifier_names())
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    best = {"f1": -1.0, "epoch": -1, "tensors": None, "buffers": None}
    curves: list[dict] = []
    for epoch in range(config.epochs):
        if audit is not None:
            audit.record("finetune-fit", "train")
        lr = lr_at_epoch(config.lr, epoch, "classify")
        order = rng.child("shuffle", epoch).permutation(len(f_train))
        epoch_rng = rng.child("epoch", epoch)
        losses, weights = [], []
        for bi, idx in enumerate(_batch_indices(order, config.batch_size)):
            logits = classifier_forward(params, Tensor(f_train[idx]), training=True,
                                        rng=epoch_rng.child("batch", bi))
            loss = softmax_cross_entropy(logits, y_train[idx])
            zero_grads(clf)
            loss.backward()
            adam_step(clf, state, lr=lr)
            losses.append(loss.item())
            weights.append(len(idx))
        if audit is not None:
            audit.record("finetune-select", "val")
        val_f1 = macro_f1(y_val, predict_classes(params, f_val), num_classes)
        curves.append({
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "val_macro_f1": float(val_f1),
            "lr": lr,
        })
        if val_f1 > best["f1"]:
            best = {
                "f1": val_f1,
                "epoch": epoch,
                "tensors": {n: clf[n].data.copy() for n in clf},
                "buffers": {n: b.copy() for n, b in params.buffers.items()
                            if n.startswith("classifier.")},
            }
    for name, arr in best["tensors"].items():
        params.tensors[name].data = arr
    for name, arr in best["buffers"].items():
        params.buffers[name] = arr
    params.meta["best_epoch"] = best["epoch"]
    params.meta["epochs_trained"] = len(curves)
    return curves


@dataclass
class RunMetrics:
    """Cross-validated probe scores: [folds, seeds] grid plus aggregates."""

    per_fold: np.ndarray  # test macro-F1, shape [num_folds, num_seeds]
    per_seed: np.ndarray  # mean over folds, shape [num_seeds]
    mean: float
    std: float  # population std across seeds
    records: list[dict] = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    @classmethod
    def from_grid(cls, grid: np.ndarray, records=None, curves=None) -> "RunMetrics":
        per_seed = grid.mean(axis=0)
        return cls(per_fold=grid, per_seed=per_seed, mean=float(per_seed.mean()),
                   std=float(per_seed.std()), records=records or [],
                   curves=curves or {})


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def cross_validate(ds: WindowedDataset, fold_plan, backbone: ModelParams,
                   head: str, config: TrainConfig, num_seeds: int = 5, *,
                   per_class: int | None = None, stats=None,
                   run_id: str = "", audit: AuditLog | None = None) -> RunMetrics:
    """Probe a frozen backbone across folds and classifier seeds.

    Per fold: normalize (with the provided source stats, else stats fit on
    the fold's training windows), extract features once, then for each seed
    fine-tune a fresh head and score the fold's test subjects. One "run" is
    the mean test macro-F1 over folds at a fixed seed; the reported mean and
    std are across seeds.
    """
    config.validate()
    if ds.labels is None:
        raise DataError("cross-validation needs labeled data")
    num_classes = max(2, int(ds.labels.max()) + 1)
    cfg_hash = config_hash({"train": config.to_dict(),
                            "model": backbone.config.to_dict(),
                            "head": head, "per_class": per_class})
    audit = audit if audit is not None else AuditLog()
    shared_features = None
    if stats is not None:
        normed = zscore_apply(ds, stats)
        shared_features = extract_features(backbone, normed, config.batch_size)
    grid = np.zeros((len(fold_plan), num_seeds))
    records: list[dict] = []
    curves: dict = {}
    for fold_idx, (train_subj, val_subj, test_subj) in enumerate(fold_plan):
        sets = {}
        for role, subjects in (("train", train_subj), ("val", val_subj),
                               ("test", test_subj)):
            part = ds.for_subjects(subjects)
            if len(part) == 0:
                raise DataError(f"fold {fold_idx}: empty {role} split")
            sets[role] = part
        if shared_features is not None:
            idx = {role: np.flatnonzero(
                np.isin(ds.subjects, np.array(list(subjects))))
                for role, subjects in (("train", train_subj), ("val", val_subj),
                                       ("test", test_subj))}
            feats = {role: shared_features[idx[role]] for role in idx}
            split = {role: ds.select(idx[role]) for role in idx}
        else:
            fold_stats = zscore_fit(sets["train"])
            split = {role: zscore_apply(sets[role], fold_stats) for role in sets}
            feats = {role: extract_features(backbone, split[role], config.batch_size)
                     for role in split}
        for seed_idx in range(num_seeds):
            seed_rng = Rng(config.seed).child("fold", fold_idx, "seed", seed_idx)
            train_split, f_train = split["train"], feats["train"]
            if per_class is not None:
                keep = limited_label_indices(train_split.labels, per_class,
                                             seed_rng.child("limit"))
                train_split = train_split.select(keep)
                f_train = f_train[keep]
            work = ModelParams(config=backbone.config,
                               tensors=dict(backbone.tensors),
                               buffers=dict(backbone.buffers),
                               meta=dict(backbone.meta))
            fold_config = replace(config, seed=seed_rng.seed)
            fold_curves = finetune(work, head, train_split, split["val"],
                                   fold_config, num_classes=num_classes,
                                   features=(f_train, feats["val"]), audit=audit)
            audit.record("report", "test")
            test_f1 = macro_f1(split["test"].labels,
                               predict_classes(work, feats["test"]), num_classes)
            grid[fold_idx, seed_idx] = test_f1
            curves[(fold_idx, seed_idx)] = fold_curves
            records.append({
                "run_id": run_id,
                "fold": fold_idx,
                "seed": seed_idx,
                "split": "test",
                "macro_f1": float(test_f1),
                "epochs_trained": work.meta["epochs_trained"],
                "config_hash": cfg_hash,
            })
    return RunMetrics.from_grid(grid, records=records, curves=curves)


# -- random search ---------------------------------------------------------------


PRETRAIN_GRID = {
    "lr": (1e-3, 1e-4, 5e-4),
    "weight_decay": (0.0, 1e-4, 1e-5),
    "causal_blocks": (2, 4, 6),
    "horizon": (10, 12),
    "num_negatives": (10, 15),
}
CLASSIFIER_GRID = {
    "lr": (1e-4, 5e-4, 1e-5),
    "weight_decay": (0.0, 1e-4, 1e-5),
}
ORIGINAL_KERNEL_GRID = {"original_kernel_size": (3, 5)}
BASELINE_HORIZON_GRID = (16, 32)


@dataclass(frozen=True)
class SearchSpace:
    """Named discrete grids; combinations are their Cartesian product."""

    grids: dict

    def __post_init__(self):
        for key, values in self.grids.items():
            if not isinstance(values, (tuple, list)) or len(values) == 0:
                raise ConfigError(f"grid {key!r} must be a non-empty sequence")

    def size(self) -> int:
        out = 1
        for values in self.grids.values():
            out *= len(values)
        return out

    def sample(self, budget: int, rng: Rng) -> list[dict]:
        """Distinct uniform draws; duplicates are redrawn.

        A budget above the grid size is clamped (with a notice on stderr).
        """
        if budget < 1:
            raise ConfigError(f"budget must be >= 1, got {budget}")
        total = self.size()
        if budget > total:
            print(f"search budget {budget} exceeds grid size {total}; "
                  f"evaluating all {total} combinations", file=sys.stderr)
            budget = total
        keys = sorted(self.grids)
        seen = set()
        combos = []
        while len(combos) < budget:
            pick = tuple(int(rng.integers(0, len(self.grids[k]))) for k in keys)
            if pick in seen:
                continue
            seen.add(pick)
            combos.append({k: self.grids[k][i] for k, i in zip(keys, pick)})
        return combos


def random_search(space: SearchSpace, budget: int, evaluator,
                  rng: Rng) -> list[tuple[dict, float]]:
    """Evaluate sampled combinations; best validation score first."""
    combos = space.sample(budget, rng)
    results = [(combo, float(evaluator(combo))) for combo in combos]
    results.sort(key=lambda cs: -cs[1])
    return results


# -- result files -----------------------------------------------------------------


def write_results_jsonl(path, records: list[dict]) -> None:
    """One sorted-key JSON object per line; no timestamps, reruns are stable."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_curves_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
