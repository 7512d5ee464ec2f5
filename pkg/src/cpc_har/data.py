"""Sensor-data pipeline: ingestion, windowing, splits and synthetic data.

The on-disk interchange format is CSV with header
``subject,timestamp,ax,ay,az[,label]``; timestamps are float seconds, or
integer milliseconds when their magnitude exceeds 1e6. Everything downstream
works on fixed-length windows grouped by subject, so user-disjoint splits
are a matter of partitioning subject ids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from cpc_har.tensor import Rng


class DataError(ValueError):
    """Raised for malformed files, impossible resampling, or bad splits."""


@dataclass
class Recording:
    """One subject's continuous triaxial stream at a known rate."""

    subject_id: str
    sample_rate_hz: float
    samples: np.ndarray  # [N, 3]
    labels: np.ndarray | None = None  # [N] int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise DataError(f"samples must be [N, 3], got {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.samples),):
                raise DataError(
                    f"labels length {self.labels.shape} != samples {len(self.samples)}"
                )

    def __len__(self):
        return len(self.samples)


@dataclass
class WindowedDataset:
    """Fixed-length windows [N, 3, W] with per-window subject (and label)."""

    windows: np.ndarray
    subjects: np.ndarray  # [N] str
    labels: np.ndarray | None = None  # [N] int
    stats: tuple[np.ndarray, np.ndarray] | None = None  # (mean[3], std[3])

    def __post_init__(self):
        self.windows = np.asarray(self.windows)
        if self.windows.ndim != 3 or self.windows.shape[1] != 3:
            raise DataError(f"windows must be [N, 3, W], got {self.windows.shape}")
        self.subjects = np.asarray(self.subjects)
        if self.subjects.shape != (len(self.windows),):
            raise DataError("one subject id per window required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.windows),):
                raise DataError("one label per window required")

    def __len__(self):
        return len(self.windows)

    @property
    def window_len(self) -> int:
        return self.windows.shape[2]

    def select(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        return WindowedDataset(
            windows=self.windows[idx],
            subjects=self.subjects[idx],
            labels=None if self.labels is None else self.labels[idx],
            stats=self.stats,
        )

    def for_subjects(self, subject_ids) -> "WindowedDataset":
        keep = set(subject_ids)
        mask = np.array([s in keep for s in self.subjects], dtype=bool)
        return self.select(np.flatnonzero(mask))


@dataclass
class FoldPlan:
    """Five user-disjoint folds: (train, val, test) subject-id tuples."""

    folds: list[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


# -- ingestion ----------------------------------------------------------------


_REQUIRED_COLUMNS = ("subject", "timestamp", "ax", "ay", "az")


def load_csv(path) -> list[Recording]:
    """Parse a sensor CSV into one Recording per subject, sorted by id.

    The sample rate is the reciprocal of the median timestamp delta per
    subject. Timestamps must strictly increase within a subject; values with
    magnitude above 1e6 are treated as integer milliseconds.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:5]) != _REQUIRED_COLUMNS or len(header) > 6 or (
            len(header) == 6 and header[5] != "label"
        ):
            raise DataError(
                f"{path}: header must be subject,timestamp,ax,ay,az[,label], "
                f"got {','.join(header)}"
            )
        has_label = len(header) == 6
        by_subject: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, "
                                f"got {len(row)}")
            subject = row[0].strip()
            try:
                ts = float(row[1])
                triple = (float(row[2]), float(row[3]), float(row[4]))
                label = int(row[5]) if has_label else None
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: unparseable numeric field "
                                f"({e})") from None
            by_subject.setdefault(subject, []).append((ts, triple, label))

    recordings = []
    for subject in sorted(by_subject):
        rows = by_subject[subject]
        times = np.array([r[0] for r in rows])
        if np.abs(times).max() > 1e6:  # millisecond timestamps
            times = times / 1000.0
        deltas = np.diff(times)
        if len(deltas) == 0:
            raise DataError(
                f"{path}: subject {subject!r} has a single sample; cannot infer rate"
            )
        if (deltas <= 0).any():
            bad = int(np.argmax(deltas <= 0))
            raise DataError(
                f"{path}: timestamps for subject {subject!r} not strictly "
                f"increasing around sample {bad + 1}"
            )
        rate = 1.0 / float(np.median(deltas))
        samples = np.array([r[1] for r in rows])
        labels = np.array([r[2] for r in rows]) if has_label else None
        recordings.append(Recording(subject_id=subject, sample_rate_hz=rate,
                                    samples=samples, labels=labels))
    return recordings


def write_csv(path, recordings: list[Recording]) -> None:
    """Inverse of load_csv; timestamps written as float seconds."""
    has_label = all(r.labels is not None for r in recordings)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(_REQUIRED_COLUMNS) + (["label"] if has_label else [])
        writer.writerow(header)
        for rec in sorted(recordings, key=lambda r: r.subject_id):
            for i in range(len(rec)):
                row = [rec.subject_id, repr(i / rec.sample_rate_hz),
                       repr(float(rec.samples[i, 0])), repr(float(rec.samples[i, 1])),
                       repr(float(rec.samples[i, 2]))]
                if has_label:
                    row.append(int(rec.labels[i]))
                writer.writerow(row)


# -- resampling and windowing ---------------------------------------------------


def downsample(rec: Recording, target_hz: float) -> Recording:
    """Integer-factor decimation (no filtering), within 1% of the ratio."""
    if target_hz > rec.sample_rate_hz:
        raise DataError(
            f"cannot downsample {rec.sample_rate_hz} Hz to higher {target_hz} Hz"
        )
    ratio = rec.sample_rate_hz / target_hz
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) / stride > 0.01:
        raise DataError(
            f"rate ratio {ratio:.4f} is not an integer decimation factor "
            f"(within 1%): {rec.sample_rate_hz} Hz -> {target_hz} Hz"
        )
    if stride == 1:
        return rec
    return Recording(
        subject_id=rec.subject_id,
        sample_rate_hz=rec.sample_rate_hz / stride,
        samples=rec.samples[::stride],
        labels=None if rec.labels is None else rec.labels[::stride],
    )


def _window_label(labels: np.ndarray) -> int:
    """Majority vote; ties go to the candidate seen latest in the window.

    When the window's final sample carries one of the tied labels, that
    label wins (its last occurrence is the window end).
    """
    counts = np.bincount(labels)
    top = counts.max()
    candidates = np.flatnonzero(counts == top)
    if len(candidates) == 1:
        return int(candidates[0])
    last_seen = {int(lab): i for i, lab in enumerate(labels)}
    return int(max(candidates, key=lambda c: last_seen[int(c)]))


def make_windows(rec: Recording, window_s: float = 2.0,
                 overlap: float = 0.0) -> WindowedDataset:
    """Cut a recording into fixed windows; trailing partial windows drop.

    overlap 0.5 halves the hop. A recording shorter than one window yields
    an empty dataset rather than an error.
    """
    if overlap not in (0.0, 0.5):
        raise DataError(f"overlap must be 0.0 or 0.5, got {overlap}")
    W = int(round(window_s * rec.sample_rate_hz))
    hop = int(W * (1.0 - overlap))
    N = len(rec)
    offsets = list(range(0, N - W + 1, hop)) if N >= W else []
    windows = np.empty((len(offsets), 3, W), dtype=np.float32)
    labels = None if rec.labels is None else np.empty(len(offsets), dtype=np.int64)
    for j, off in enumerate(offsets):
        windows[j] = rec.samples[off:off + W].T
        if labels is not None:
            labels[j] = _window_label(rec.labels[off:off + W])
    subjects = np.array([rec.subject_id] * len(offsets))
    return WindowedDataset(windows=windows, subjects=subjects, labels=labels)


def windows_from_recordings(recordings, window_s: float = 2.0,
                            overlap: float = 0.0) -> WindowedDataset:
    """Window every recording and concatenate, sorted by subject id."""
    parts = [make_windows(r, window_s, overlap)
             for r in sorted(recordings, key=lambda r: r.subject_id)]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise DataError("no recording long enough for a single window")
    all_labeled = all(p.labels is not None for p in parts)
    return WindowedDataset(
        windows=np.concatenate([p.windows for p in parts]),
        subjects=np.concatenate([p.subjects for p in parts]),
        labels=np.concatenate([p.labels for p in parts]) if all_labeled else None,
    )


# -- normalization ----------------------------------------------------------------


def zscore_fit(train: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over every sample of every window; std floored."""
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty dataset")
    flat = train.windows.astype(np.float64)
    mean = flat.mean(axis=(0, 2))
    std = np.maximum(flat.std(axis=(0, 2)), 1e-8)
    return mean, std


def zscore_apply(ds: WindowedDataset,
                 stats: tuple[np.ndarray, np.ndarray]) -> WindowedDataset:
    mean, std = stats
    scaled = ((ds.windows - mean[None, :, None]) / std[None, :, None]).astype(
        ds.windows.dtype
    )
    return replace(ds, windows=scaled, stats=(np.asarray(mean), np.asarray(std)))


# -- splits --------------------------------------------------------------------


def make_folds(subjects, k: int = 5, rng: Rng | None = None) -> FoldPlan:
    """User-disjoint k-fold plan: every subject tests exactly once.

    Subjects are shuffled once and cut into k near-equal test groups (the
    first |S| mod k groups take the extra subject). Within each fold the
    remaining subjects are reshuffled with a fold-derived stream and split
    80:20 into train/val (train floored, val gets the rest, at least 1).
    """
    subjects = sorted(subjects)
    if len(subjects) < k:
        raise DataError(f"need at least {k} subjects for {k} folds, "
                        f"got {len(subjects)}")
    rng = rng or Rng(0)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    base, extra = divmod(len(order), k)
    folds = []
    start = 0
    for fold_idx in range(k):
        size = base + (1 if fold_idx < extra else 0)
        test = tuple(order[start:start + size])
        start += size
        rest = [s for s in order if s not in test]
        fold_rng = rng.child("fold", fold_idx)
        rest = [rest[i] for i in fold_rng.permutation(len(rest))]
        n_train = int(0.8 * len(rest))
        if n_train == len(rest):
            n_train -= 1
        if n_train < 1:
            raise DataError(f"fold {fold_idx}: not enough non-test subjects "
                            f"({len(rest)}) for a train/val split")
        folds.append((tuple(rest[:n_train]), tuple(rest[n_train:]), test))
    return FoldPlan(folds=folds)


def pretrain_split(subjects, rng: Rng | None = None) -> tuple[tuple, tuple]:
    """90:10 subject split for pretraining; validation gets at least one."""
    subjects = sorted(subjects)
    if len(subjects) < 2:
        raise DataError(f"need at least 2 subjects to split, got {len(subjects)}")
    rng = rng or Rng(0)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_val = max(1, int(round(0.1 * len(order))))
    return tuple(order[n_val:]), tuple(order[:n_val])


def limited_label_indices(labels: np.ndarray, per_class: int,
                          rng: Rng) -> np.ndarray:
    """Indices of min(per_class, available) uniform draws per class, sorted."""
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    chosen = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        take = min(per_class, len(idx))
        chosen.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def sample_limited_labels(train: WindowedDataset, per_class: int,
                          rng: Rng) -> WindowedDataset:
    """Keep min(per_class, available) windows per class, drawn uniformly."""
    if train.labels is None:
        raise DataError("limited-label sampling needs a labeled dataset")
    return train.select(limited_label_indices(train.labels, per_class, rng))


def sample_window_fraction(ds: WindowedDataset, fraction: float,
                           rng: Rng) -> WindowedDataset:
    """Uniform window subsample (used to shrink the pretraining pool)."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    count = max(1, int(round(fraction * len(ds))))
    idx = np.sort(rng.choice(len(ds), size=count, replace=False))
    return ds.select(idx)


# -- synthetic data ---------------------------------------------------------------


def synth_generate(num_subjects: int, num_classes: int, rate_hz: float,
                   duration_s: float, rng: Rng) -> list[Recording]:
    """Sinusoid-burst activity data with per-sample labels.

    Class c oscillates at 1 + 2c Hz with a class-specific amplitude; each
    subject applies a global gain and every segment has a random phase.
    Channels carry the same tone phase-shifted and attenuated, plus Gaussian
    noise (sigma 0.1). Activity segments last 4-8 seconds.
    """
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if num_subjects < 1:
        raise DataError(f"need at least 1 subject, got {num_subjects}")
    total = int(round(rate_hz * duration_s))
    recordings = []
    for s in range(num_subjects):
        srng = rng.child("subject", s)
        gain = float(srng.uniform((), 0.7, 1.3))
        samples = np.zeros((total, 3))
        labels = np.zeros(total, dtype=np.int64)
        pos = 0
        while pos < total:
            seg_len = min(int(srng.integers(4 * rate_hz, 8 * rate_hz + 1)),
                          total - pos)
            cls = int(srng.integers(0, num_classes))
            freq = 1.0 + 2.0 * cls
            amp = gain * (0.5 + 0.25 * cls)
            phase = float(srng.uniform((), 0.0, 2 * np.pi))
            t = (np.arange(seg_len) + pos) / rate_hz
            for ch, (shift, att) in enumerate(((0.0, 1.0),
                                               (2 * np.pi / 3, 0.8),
                                               (4 * np.pi / 3, 0.6))):
                samples[pos:pos + seg_len, ch] = amp * att * np.sin(
                    2 * np.pi * freq * t + phase + shift
                )
            labels[pos:pos + seg_len] = cls
            pos += seg_len
        samples += srng.normal((total, 3), scale=0.1)
        recordings.append(Recording(subject_id=f"s{s:02d}", sample_rate_hz=rate_hz,
                                    samples=samples, labels=labels))
    return recordings


# -- window cache -----------------------------------------------------------------


def save_windows(path, ds: WindowedDataset) -> None:
    """Persist a windowed dataset; arrays round-trip bitwise."""
    payload = {
        "windows": ds.windows,
        "subjects": ds.subjects.astype(str),
        "has_labels": np.array(ds.labels is not None),
        "has_stats": np.array(ds.stats is not None),
    }
    if ds.labels is not None:
        payload["labels"] = ds.labels
    if ds.stats is not None:
        payload["stats_mean"], payload["stats_std"] = ds.stats
    np.savez(path, **payload)


def load_windows(path) -> WindowedDataset:
    with np.load(path) as zf:
        stats = None
        if bool(zf["has_stats"]):
            stats = (np.array(zf["stats_mean"]), np.array(zf["stats_std"]))
        return WindowedDataset(
            windows=np.array(zf["windows"]),
            subjects=np.array(zf["subjects"]),
            labels=np.array(zf["labels"]) if bool(zf["has_labels"]) else None,
            stats=stats,
        )
