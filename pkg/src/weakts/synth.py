"""
Synthetic weakly-labelled multivariate series.

Each participant gets a two-state Markov label chain (class 1 is the
majority), a per-class sinusoidal motif, label-independent "redundant"
bursts from a shared frequency band, Gaussian noise, and jittered label
boundaries so annotations only roughly follow the underlying signal.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .pipeline import RawSeries, write_csv


@dataclass
class SynthConfig:
    channels: int = 6
    length: int = 8000
    sample_rate: float = 128.0
    persistence: float = 0.99
    imbalance: float = 2.0
    noise: float = 1.25
    redundancy: float = 0.3
    # cycles per sample; class 0 first, class 1 second
    class_freqs: tuple = ((0.05, 0.125), (0.075, 0.15))
    redundancy_freqs: tuple = (0.2, 0.25)
    burst_length: int = 40
    boundary_jitter: int = 8
    seed: int = 0

    def __post_init__(self):
        self.class_freqs = tuple(tuple(f) for f in self.class_freqs)
        self.redundancy_freqs = tuple(self.redundancy_freqs)
        if self.channels < 1 or self.length < 2:
            raise ConfigurationError("channels must be >= 1 and length >= 2")
        if not 0.0 < self.persistence < 1.0:
            raise ConfigurationError(
                f"persistence must lie in (0, 1); {self.persistence} gives a degenerate chain")
        if self.imbalance < 1.0:
            raise ConfigurationError(f"imbalance ratio must be >= 1, got {self.imbalance}")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ConfigurationError(f"redundancy rate must lie in [0, 1], got {self.redundancy}")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")
        if len(self.class_freqs) != 2:
            raise ConfigurationError("class_freqs needs one frequency tuple per class")
        if self.burst_length >= self.length:
            raise ConfigurationError("burst_length must be shorter than the series")

    @property
    def leave_probs(self):
        """Per-step probability of leaving class 0 and class 1.

        Class 0 (minority) stays with probability ``persistence``; class 1
        leaves ``imbalance`` times less often, so the stationary ratio of
        class 1 to class 0 equals ``imbalance``.
        """
        leave0 = 1.0 - self.persistence
        return leave0, leave0 / self.imbalance

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def label_chain(cfg: SynthConfig, T: int, rng) -> np.ndarray:
    leave = cfg.leave_probs
    stationary1 = leave[0] / (leave[0] + leave[1])
    state = int(rng.random() < stationary1)
    out = np.empty(T, dtype=np.int64)
    pos = 0
    while pos < T:
        run = int(rng.geometric(leave[state]))
        out[pos:pos + run] = state
        pos += run
        state = 1 - state
    return out


def _jitter_boundaries(labels, jitter, rng):
    """Shift every label boundary by up to ``jitter`` steps, keeping runs non-empty and ordered."""
    if jitter <= 0:
        return labels.copy()
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    if len(cuts) == 0:
        return labels.copy()
    T = len(labels)
    nxt = np.r_[cuts[1:], T]
    moved = np.empty_like(cuts)
    prev = 0
    for j, c in enumerate(cuts):
        prev = moved[j] = int(np.clip(c + rng.integers(-jitter, jitter + 1), prev + 1, nxt[j] - 1))
    run_labels = labels[np.r_[0, cuts]]
    return np.repeat(run_labels, np.diff(np.r_[0, moved, T]))


def _motif(freqs, amps, phases, t):
    return sum(a * np.sin(2 * np.pi * f * t + p) for f, a, p in zip(freqs, amps, phases))


def generate_series(cfg: SynthConfig, participant: int) -> RawSeries:
    rng = np.random.default_rng([cfg.seed, participant])
    T, C = cfg.length, cfg.channels
    truth = label_chain(cfg, T, rng)
    t = np.arange(T, dtype=np.float64)

    values = np.zeros((C, T))
    # per-participant channel mixing: how strongly each channel expresses each motif component
    n_cls = max(len(f) for f in cfg.class_freqs)
    amps = rng.uniform(0.5, 1.0, size=(2, C, n_cls))
    red_amps = rng.uniform(0.5, 1.0, size=(C, len(cfg.redundancy_freqs)))

    cuts = np.flatnonzero(truth[1:] != truth[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [T]])
    for s, e in zip(starts, stops):
        cls = truth[s]
        freqs = cfg.class_freqs[cls]
        for ch in range(C):
            phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
            values[ch, s:e] = _motif(freqs, amps[cls, ch], phases, t[s:e])

    # label-independent bursts from the shared band
    n_slots = T // cfg.burst_length
    for slot in np.flatnonzero(rng.random(n_slots) < cfg.redundancy):
        s = slot * cfg.burst_length
        e = s + cfg.burst_length
        for ch in range(C):
            phases = rng.uniform(0, 2 * np.pi, size=len(cfg.redundancy_freqs))
            values[ch, s:e] += _motif(cfg.redundancy_freqs, red_amps[ch], phases, t[s:e])

    values += rng.normal(0.0, cfg.noise, size=(C, T)) if cfg.noise > 0 else 0.0
    labels = _jitter_boundaries(truth, cfg.boundary_jitter, rng)
    return RawSeries(f"p{participant:02d}", values, labels, cfg.sample_rate)


def generate(cfg: SynthConfig, participants: int = 18):
    return [generate_series(cfg, i) for i in range(participants)]


def write_corpus(series_list, cfg: SynthConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in series_list:
        write_csv(s, out / f"{s.participant}.csv")
    (out / "synth_config.json").write_text(cfg.to_json())
    return out
