"""Generator determinism, ground-truth consistency, and spectral effect of
injected slowing and site distortion."""

import numpy as np
import pytest
from scipy import stats

from slowave.errors import ConfigError
from slowave.spectral import feature_matrix
from slowave.synth import (
    CHANNELS_1020,
    GroundTruth,
    SLOW_FREE_FLOOR,
    SlowingSpec,
    SynthConfig,
    generate_cohort,
    load_manifest,
    site_shift,
    window_grid,
    write_cohort,
)


def small_cfg(**overrides):
    base = dict(
        site="test", n_subjects=4, duration_s=40.0, fs=128.0, seed=11,
    )
    base.update(overrides)
    return SynthConfig(**base)


class TestDeterminism:
    def test_identical_config_identical_cohort(self):
        a = generate_cohort(small_cfg())
        b = generate_cohort(small_cfg())
        for (rec_a, gt_a), (rec_b, gt_b) in zip(a, b):
            assert np.array_equal(rec_a.data, rec_b.data)
            assert gt_a.eeg_label == gt_b.eeg_label
            assert np.array_equal(gt_a.window_flags, gt_b.window_flags)

    def test_seed_changes_cohort(self):
        a = generate_cohort(small_cfg())
        b = generate_cohort(small_cfg(seed=12))
        assert not np.array_equal(a[0][0].data, b[0][0].data)


class TestGroundTruth:
    def test_zero_amplitude_all_slow_free(self):
        cfg = small_cfg(slowing=SlowingSpec(amplitude=0.0))
        cohort = generate_cohort(cfg)
        for _, gt in cohort:
            assert gt.eeg_label == 0
            assert gt.degree_category == "slow-free"
            assert not gt.window_flags.any()

    def test_generalized_persistent_config(self):
        cfg = small_cfg(
            n_subjects=6,
            slowing_fraction=1.0,
            slowing=SlowingSpec(
                coverage_slowing=(0.65, 0.70),
                coverage_slow_free=(0.0, 0.0),
                generalized_fraction=1.0,
            ),
        )
        cohort = generate_cohort(cfg)
        for _, gt in cohort:
            assert gt.eeg_label == 1
            assert gt.degree_category == "GPS"

    def test_label_matches_floor_rule(self):
        cohort = generate_cohort(small_cfg(n_subjects=10, duration_s=60.0))
        for _, gt in cohort:
            expected = int(np.any(gt.channel_coverage > SLOW_FREE_FLOOR))
            assert gt.eeg_label == expected

    def test_window_grid_matches_segmenter(self):
        starts = window_grid(30.0)
        assert starts.size == 21
        assert starts[1] == pytest.approx(1.25)

    def test_flags_require_half_window_coverage(self):
        cfg = small_cfg(
            n_subjects=3,
            slowing_fraction=1.0,
            slowing=SlowingSpec(coverage_slowing=(0.4, 0.6), coverage_slow_free=(0, 0)),
        )
        for _, gt in generate_cohort(cfg):
            for w, t0 in enumerate(window_grid(cfg.duration_s)):
                t1 = t0 + 5.0
                for ch in range(len(CHANNELS_1020)):
                    covered = sum(
                        max(0.0, min(e.end_s, t1) - max(e.start_s, t0))
                        for e in gt.events if e.channel == ch
                    )
                    assert gt.window_flags[w, ch] == (covered >= 2.5)

    def test_round_trip_json(self):
        import json

        cohort = generate_cohort(small_cfg(n_subjects=2))
        gt = cohort[0][1]
        doc = json.loads(json.dumps(gt.to_json_dict()))
        back = GroundTruth.from_json_dict(doc)
        assert back.eeg_label == gt.eeg_label
        assert np.array_equal(back.window_flags, gt.window_flags)
        assert back.degree_category == gt.degree_category


class TestSpectralEffect:
    def test_delta_bursts_raise_delta_power(self):
        # Paired comparison: burst windows vs quiet windows on one channel.
        cfg = SynthConfig(
            site="fx", n_subjects=100, duration_s=40.0, seed=5,
            slowing_fraction=1.0,
            slowing=SlowingSpec(
                coverage_slowing=(0.3, 0.5),
                coverage_slow_free=(0.0, 0.0),
                generalized_fraction=0.0,
                focal_channels=(1, 1),
            ),
        )
        diffs = []
        for rec, gt in generate_cohort(cfg):
            burst_channels = {e.channel for e in gt.events}
            if not burst_channels:
                continue
            ch = sorted(burst_channels)[0]
            starts = window_grid(cfg.duration_s)
            windows = np.stack([
                rec.data[ch, int(round(t0 * 128)) : int(round(t0 * 128)) + 640]
                for t0 in starts
            ])
            rp_delta = feature_matrix(windows)[:, 0]
            flags = gt.window_flags[:, ch]
            if flags.any() and (~flags).any():
                diffs.append(rp_delta[flags].mean() - rp_delta[~flags].mean())
        assert len(diffs) >= 80
        t_stat, p = stats.ttest_1samp(diffs, 0.0, alternative="greater")
        assert p < 0.01

    def test_site_shift_identity_at_factor_one(self):
        rec, _ = generate_cohort(small_cfg(n_subjects=1))[0]
        shifted = site_shift(rec, 1.0)
        assert np.array_equal(shifted.data, rec.data)

    def test_site_shift_raises_delta_power(self):
        cohort = generate_cohort(small_cfg(n_subjects=6, seed=21))
        base_rp, boosted_rp = [], []
        for rec, _ in cohort:
            starts = window_grid(rec.duration_s)
            boosted = site_shift(rec, 4.0, seed=9)
            for source, sink in ((rec, base_rp), (boosted, boosted_rp)):
                windows = np.concatenate([
                    source.data[:, int(round(t0 * 128)) : int(round(t0 * 128)) + 640]
                    for t0 in starts
                ])
                sink.append(feature_matrix(windows)[:, 0].mean())
        assert np.mean(boosted_rp) > np.mean(base_rp)

    def test_site_shift_preserves_labels(self):
        rec, gt = generate_cohort(small_cfg(n_subjects=1, slowing_fraction=1.0))[0]
        site_shift(rec, 4.0, seed=3)
        # Ground truth is the event log; nothing about it changes.
        assert gt.eeg_label == int(np.any(gt.channel_coverage > SLOW_FREE_FLOOR))

    def test_bad_factor_rejected(self):
        rec, _ = generate_cohort(small_cfg(n_subjects=1))[0]
        with pytest.raises(ConfigError):
            site_shift(rec, 0.5)


class TestCohortFiles:
    def test_write_and_manifest(self, tmp_path):
        cohort = generate_cohort(small_cfg(n_subjects=3))
        manifest = write_cohort(cohort, tmp_path, site="test")
        entries = load_manifest(manifest)
        assert len(entries) == 3
        for entry in entries:
            assert (tmp_path / entry["edf"]).exists()
            assert (tmp_path / entry["ground_truth"]).exists()
            assert entry["site"] == "test"

    def test_manifest_merges_sites(self, tmp_path):
        write_cohort(generate_cohort(small_cfg(n_subjects=2, site="x")), tmp_path, site="x")
        manifest = write_cohort(
            generate_cohort(small_cfg(n_subjects=2, site="y", seed=3)), tmp_path, site="y"
        )
        entries = load_manifest(manifest)
        assert len(entries) == 4
        assert {e["site"] for e in entries} == {"x", "y"}

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(duration_s=2.0)
        with pytest.raises(ConfigError):
            SynthConfig(delta_boost=0.5)
        with pytest.raises(ConfigError):
            SlowingSpec(band="gamma")
        with pytest.raises(ConfigError):
            SlowingSpec(coverage_slowing=(0.5, 0.99))
