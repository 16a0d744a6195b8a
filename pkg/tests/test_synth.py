import json

import numpy as np
import pytest

from weakts.errors import ConfigurationError
from weakts.pipeline import label_groups, load_csv
from weakts.synth import SynthConfig, generate, generate_series, label_chain, write_corpus


def run_lengths(labels):
    out = {0: [], 1: []}
    for label, start, stop in label_groups(labels):
        out[label].append(stop - start)
    return out


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(persistence=1.0), dict(persistence=0.0), dict(imbalance=0.5), dict(noise=-1.0),
        dict(redundancy=1.5), dict(channels=0), dict(burst_length=9000),
        dict(class_freqs=((0.1,),)),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            SynthConfig(**kwargs)

    def test_json_roundtrip(self):
        cfg = SynthConfig(noise=0.3, seed=5)
        assert SynthConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_leave_probabilities(self):
        assert SynthConfig(persistence=0.9, imbalance=2.0).leave_probs == pytest.approx((0.1, 0.05))


class TestLabelChain:
    def test_stationary_ratio(self):
        labels = label_chain(SynthConfig(imbalance=2.0), 400_000, np.random.default_rng(0))
        ratio = np.sum(labels == 1) / np.sum(labels == 0)
        assert abs(ratio - 2.0) <= 0.05 * 2.0

    @pytest.mark.parametrize("p", [0.9, 0.99])
    def test_run_lengths_are_geometric(self, p):
        cfg = SynthConfig(persistence=p, imbalance=2.0)
        runs = run_lengths(label_chain(cfg, 600_000, np.random.default_rng(1)))
        # the minority class stays with probability p; the majority leaves half as often
        assert np.mean(runs[0][1:-1]) == pytest.approx(1 / (1 - p), rel=0.05)
        assert np.mean(runs[1][1:-1]) == pytest.approx(2 / (1 - p), rel=0.05)

    def test_balanced_chain_is_symmetric(self):
        runs = run_lengths(label_chain(SynthConfig(persistence=0.95, imbalance=1.0), 400_000,
                                       np.random.default_rng(2)))
        assert np.mean(runs[0]) == pytest.approx(np.mean(runs[1]), rel=0.05)


class TestGenerate:
    def test_shapes_and_ids(self):
        out = generate(SynthConfig(length=500, channels=3), 4)
        assert [s.participant for s in out] == ["p00", "p01", "p02", "p03"]
        assert all(s.values.shape == (3, 500) and s.labels.shape == (500,) for s in out)

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(length=700)
        a, b = generate(cfg, 3), generate(cfg, 3)
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values) and np.array_equal(x.labels, y.labels)
        c = generate(SynthConfig(length=700, seed=1), 1)[0]
        assert not np.array_equal(a[0].values, c.values)

    def test_participants_are_independent_streams(self):
        cfg = SynthConfig(length=600)
        assert np.array_equal(generate(cfg, 5)[3].values, generate_series(cfg, 3).values)

    def test_noiseless_values_are_bounded_motifs(self):
        cfg = SynthConfig(length=2000, noise=0.0, redundancy=0.0)
        s = generate_series(cfg, 0)
        # at most two sinusoids with amplitude <= 1 each
        assert np.abs(s.values).max() <= 2.0

    def test_redundancy_is_label_independent(self):
        base = dict(length=100_000, noise=0.0, boundary_jitter=0, channels=1, seed=3)
        clean = generate_series(SynthConfig(redundancy=0.0, **base), 0)
        noisy = generate_series(SynthConfig(redundancy=0.4, **base), 0)
        assert np.array_equal(clean.labels, noisy.labels)
        burst = np.abs(noisy.values[0] - clean.values[0]) > 0
        rate0 = burst[clean.labels == 0].mean()
        rate1 = burst[clean.labels == 1].mean()
        assert rate0 == pytest.approx(0.4, abs=0.03) and rate1 == pytest.approx(0.4, abs=0.03)

    def test_class_motifs_use_distinct_bands(self):
        cfg = SynthConfig(length=20_000, noise=0.0, redundancy=0.0, boundary_jitter=0, channels=1)
        s = generate_series(cfg, 0)
        for cls, freqs in enumerate(cfg.class_freqs):
            longest = max((g for g in label_groups(s.labels) if g[0] == cls), key=lambda g: g[2] - g[1])
            seg = s.values[0, longest[1]:longest[2]]
            spectrum = np.abs(np.fft.rfft(seg))
            grid = np.fft.rfftfreq(len(seg))
            peak = grid[np.argmax(spectrum[1:]) + 1]
            assert min(abs(peak - f) for f in freqs) < 0.01

    def test_jitter_only_moves_boundaries(self):
        base = dict(length=5000, noise=0.0, redundancy=0.0)
        a = generate_series(SynthConfig(boundary_jitter=0, **base), 0).labels
        b = generate_series(SynthConfig(boundary_jitter=8, **base), 0).labels
        ga, gb = label_groups(a), label_groups(b)
        assert [g[0] for g in ga] == [g[0] for g in gb]
        for (_, sa, _), (_, sb, _) in zip(ga, gb):
            assert abs(sa - sb) <= 8


def test_write_corpus(tmp_path):
    cfg = SynthConfig(length=300, channels=2)
    series = generate(cfg, 2)
    out = write_corpus(series, cfg, tmp_path / "corpus")
    assert sorted(p.name for p in out.iterdir()) == ["p00.csv", "p01.csv", "synth_config.json"]
    back = load_csv(out / "p01.csv")
    assert np.array_equal(back.values, series[1].values)
    assert SynthConfig.from_dict(json.loads((out / "synth_config.json").read_text())) == cfg
