"""
Weak-label data preparation: long labelled series -> label-consistent,
normalised, balanced batches of consecutive subsequences.

Order of operations in ``build_splits`` for every participant:
series normalisation -> sliding-window segmentation (50% overlap) -> label
enhancement -> subsequence normalisation -> chaining into N-step batches.
Training batches are then up-sampled on their target (last) label.
"""

import csv
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, ParseError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
NORMALIZATION_MODES = ("none", "subsequence", "series", "both")
PLACEHOLDER = 0.0


@dataclass
class RawSeries:
    participant: str
    values: np.ndarray
    labels: np.ndarray
    sample_rate: float = 128.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ConfigurationError(f"series values must be [C, T] with C >= 1, got {self.values.shape}")
        if self.labels.shape != (self.values.shape[1],):
            raise ConfigurationError(
                f"label stream length {self.labels.shape} does not match T={self.values.shape[1]}")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]


@dataclass
class Window:
    offset: int
    values: np.ndarray
    labels: np.ndarray
    participant: str = ""


@dataclass
class Subsequence:
    values: np.ndarray
    label: int
    mask: np.ndarray
    offset: int = 0
    participant: str = ""


@dataclass
class SequenceBatch:
    """N consecutive subsequences; the last one is the classification target."""

    subsequences: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    participant: str = ""
    index: int = 0

    @property
    def steps(self):
        return self.subsequences.shape[0]

    @property
    def target_label(self):
        return int(self.labels[-1])

    @classmethod
    def from_subsequences(cls, subs, index=0):
        return cls(
            subsequences=np.stack([s.values for s in subs]),
            labels=np.array([s.label for s in subs], dtype=np.int64),
            masks=np.stack([s.mask for s in subs]),
            participant=subs[0].participant,
            index=index,
        )


def _label(item):
    return item.target_label if isinstance(item, SequenceBatch) else int(item.label)


@dataclass
class PipelineConfig:
    window: int = 40
    steps: int = 4
    normalization: str = "both"
    upsample: bool = True
    seed: int = 0
    split: tuple = (12, 2, 4)

    def __post_init__(self):
        if self.window < 2 or self.window % 2:
            raise ConfigurationError(f"window length must be even and >= 2, got {self.window}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigurationError(
                f"normalization must be one of {NORMALIZATION_MODES}, got {self.normalization!r}")
        self.split = tuple(self.split)
        if len(self.split) != 3 or min(self.split) < 1:
            raise ConfigurationError(f"split needs three positive participant counts, got {self.split}")


@dataclass
class DatasetSplit:
    train: List[SequenceBatch]
    validation: List[SequenceBatch]
    test: List[SequenceBatch]
    stats: dict = field(default_factory=dict)
    participants: dict = field(default_factory=dict)

    def class_counts(self, part):
        counts = Counter(b.target_label for b in getattr(self, part))
        return {0: counts.get(0, 0), 1: counts.get(1, 0)}

    def fingerprint(self) -> str:
        """SHA-256 over every batch tensor and label, in split order."""
        h = hashlib.sha256()
        for part in ("train", "validation", "test"):
            h.update(part.encode())
            for b in getattr(self, part):
                h.update(np.ascontiguousarray(b.subsequences).tobytes())
                h.update(np.ascontiguousarray(b.labels).tobytes())
        return h.hexdigest()


def stack(batches):
    """``(X [M, N, C, L], y [M])`` for a list of SequenceBatch."""
    X = np.stack([b.subsequences for b in batches])
    y = np.array([b.target_label for b in batches], dtype=np.int64)
    return X, y


def segment(series: RawSeries, window: int, overlap: float = 0.5) -> List[Window]:
    """Sliding windows at stride ``window * (1 - overlap)``; the partial tail is dropped."""
    stride = window * (1.0 - overlap)
    if stride <= 0 or stride != int(stride):
        raise ConfigurationError(f"window {window} with overlap {overlap} gives a non-integer stride")
    stride = int(stride)
    T = series.length
    if T < window:
        logger.warning("series %s has %d timesteps, shorter than the window %d; no windows",
                       series.participant, T, window)
        return []
    return [
        Window(off, series.values[:, off:off + window], series.labels[off:off + window],
               series.participant)
        for off in range(0, T - window + 1, stride)
    ]


def label_groups(labels):
    """Contiguous runs as ``(label, start, stop)``."""
    labels = np.asarray(labels)
    cut = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cut])
    stops = np.concatenate([cut, [len(labels)]])
    return [(int(labels[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def enhance_labels(window: Window, placeholder: float = PLACEHOLDER) -> List[Subsequence]:
    """One subsequence per contiguous label group; windows with >2 groups are dropped.

    A two-group window yields two subsequences, each holding its group's
    timesteps left-aligned and padded with ``placeholder`` up to the window
    length; ``mask`` is False on the padding.
    """
    L = window.values.shape[1]
    groups = label_groups(window.labels)
    if len(groups) == 1:
        return [Subsequence(window.values.copy(), groups[0][0], np.ones(L, dtype=bool),
                            window.offset, window.participant)]
    if len(groups) > 2:
        return []
    out = []
    for label, start, stop in groups:
        vals = np.full(window.values.shape, placeholder, dtype=np.float64)
        vals[:, :stop - start] = window.values[:, start:stop]
        mask = np.zeros(L, dtype=bool)
        mask[:stop - start] = True
        out.append(Subsequence(vals, label, mask, window.offset + start, window.participant))
    return out


def upsample_minority(items, seed):
    """Append random duplicates of the minority class until both classes are equal, then shuffle."""
    items = list(items)
    labels = np.array([_label(it) for it in items], dtype=np.int64)
    counts = {c: int(np.sum(labels == c)) for c in (0, 1)}
    missing = [c for c, n in counts.items() if n == 0]
    if missing:
        raise ConfigurationError(f"class {missing[0]} is absent from the training data")
    rng = np.random.default_rng(seed)
    minority = min(counts, key=lambda c: (counts[c], c))
    deficit = max(counts.values()) - counts[minority]
    pool = np.flatnonzero(labels == minority)
    extra = [items[i] for i in rng.choice(pool, size=deficit, replace=True)] if deficit else []
    out = items + extra
    return [out[i] for i in rng.permutation(len(out))]


def _zscore(values, mask=None):
    cols = values if mask is None else values[:, mask]
    if cols.shape[1] == 0:
        return np.zeros_like(values)
    mu = cols.mean(axis=1, keepdims=True)
    sd = cols.std(axis=1, keepdims=True)
    out = (values - mu) / (sd + NORM_EPS)
    if mask is not None:
        out[:, ~mask] = PLACEHOLDER
    return out


def normalize(data, mode: str):
    """Apply the ``mode``'s normalisation appropriate to ``data``'s stage.

    A ``RawSeries`` is z-normalised per channel for modes ``series``/``both``;
    a ``Subsequence`` is z-normalised per channel over its unmasked positions
    for modes ``subsequence``/``both`` (padding reset to the placeholder).
    Lists are mapped element-wise.
    """
    if mode not in NORMALIZATION_MODES:
        raise ConfigurationError(f"unknown normalization mode {mode!r}")
    if isinstance(data, list):
        return [normalize(d, mode) for d in data]
    if isinstance(data, RawSeries):
        if mode in ("series", "both"):
            return RawSeries(data.participant, _zscore(data.values), data.labels, data.sample_rate)
        return data
    if isinstance(data, Subsequence):
        if mode in ("subsequence", "both"):
            return Subsequence(_zscore(data.values, data.mask), data.label, data.mask,
                               data.offset, data.participant)
        return data
    raise TypeError(f"cannot normalise {type(data).__name__}")


def series_batches(series: RawSeries, cfg: PipelineConfig, stats: Optional[Counter] = None):
    """Normalised N-step batches from one series, never crossing its boundary."""
    stats = stats if stats is not None else Counter()
    series = normalize(series, cfg.normalization)
    chain = []
    for win in segment(series, cfg.window):
        stats["windows"] += 1
        subs = enhance_labels(win)
        if not subs:
            stats["discarded"] += 1
        elif len(subs) == 2:
            stats["split_count"] += 1
        chain.extend(normalize(subs, cfg.normalization))
    n = cfg.steps
    return [SequenceBatch.from_subsequences(chain[i:i + n], index=i)
            for i in range(len(chain) - n + 1)]


def split_participants(ids, split, seed):
    ids = sorted(ids)
    need = sum(split)
    if len(ids) < need:
        raise ConfigurationError(
            f"split {split} needs {need} participants, only {len(ids)} available")
    order = np.random.default_rng(seed).permutation(len(ids))
    picked = [ids[i] for i in order]
    a, b, c = split
    return {"train": sorted(picked[:a]), "validation": sorted(picked[a:a + b]),
            "test": sorted(picked[a + b:a + b + c])}


def build_splits(series_list, cfg: PipelineConfig) -> DatasetSplit:
    by_id = {s.participant: s for s in series_list}
    if len(by_id) != len(series_list):
        raise ConfigurationError("participant ids must be unique")
    groups = split_participants(by_id, cfg.split, cfg.seed)
    stats = Counter({"windows": 0, "split_count": 0, "discarded": 0, "upsampled": 0})
    parts = {}
    for part, ids in groups.items():
        batches = []
        for pid in ids:
            batches.extend(series_batches(by_id[pid], cfg, stats))
        parts[part] = batches
    if cfg.upsample:
        before = len(parts["train"])
        parts["train"] = upsample_minority(parts["train"], cfg.seed)
        stats["upsampled"] = len(parts["train"]) - before
    split = DatasetSplit(parts["train"], parts["validation"], parts["test"], participants=groups)
    split.stats = {
        "windows": stats["windows"],
        "split_count": stats["split_count"],
        "discarded": stats["discarded"],
        "upsampled": stats["upsampled"],
        "class_counts": {p: split.class_counts(p) for p in ("train", "validation", "test")},
    }
    return split


def write_csv(series: RawSeries, path):
    """Write ``t,ch_0..ch_{C-1},label`` with shortest round-trip float formatting."""
    path = Path(path)
    C = series.channels
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"ch_{i}" for i in range(C)] + ["label"])
        for t in range(series.length):
            w.writerow([repr(t / series.sample_rate)]
                       + [repr(float(v)) for v in series.values[:, t]]
                       + [int(series.labels[t])])


def load_csv(path) -> RawSeries:
    """Read a series written in the ``t,ch_0..,label`` schema; the file stem is the participant id."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise ParseError("missing 'label' column", 1)
        if header[0] != "t":
            raise ParseError("first column must be 't'", 1)
        chans = header[1:-1]
        if not chans or chans != [f"ch_{i}" for i in range(len(chans))]:
            raise ParseError("channel columns must be ch_0..ch_{C-1}", 1)
        times, values, labels = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                times.append(float(row[0]))
                values.append([float(v) for v in row[1:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", lineno) from None
    if not values:
        raise ParseError("no data rows", 2)
    rate = 128.0
    if len(times) > 1:
        step = float(np.median(np.diff(times)))
        if step > 0:
            rate = 1.0 / step
    return RawSeries(path.stem, np.array(values).T, np.array(labels), rate)
