"""Detector rules, normalizer arithmetic, histogram conventions, degree
rules, threshold classification, annotation sampling."""

import numpy as np
import pytest

from slowave import Recording
from slowave.detect import (
    TABLE_THRESHOLDS,
    AnnotationSegment,
    CnnDetector,
    ShallowDetector,
    SlowingDegreeReport,
    UlsNormalizer,
    UlsThresholdDetector,
    build_histogram,
    categorize_fractions,
    degrees_of_slowing,
    eeg_level_features,
    fit_segment_or_eeg_classifier,
    fit_uls_normalizer,
    histogram_features,
    segment_level_features,
    select_annotation_segments,
    threshold_classify_eeg,
    uls_channel_score,
)
from slowave.errors import FeatureError, ModelError
from slowave.preprocess import Segment
from slowave.spectral import SpectralFeatures


def make_features(**overrides):
    base = dict(
        rp_delta=0.25, rp_theta=0.25, rp_alpha=0.25, rp_beta=0.25,
        pri=1.0, dar=1.0, tar=1.0, tbar=0.5,
    )
    base.update(overrides)
    return SpectralFeatures(**base)


class TestUlsChannelScore:
    def test_up_feature_above(self):
        assert uls_channel_score(make_features(pri=5.0), "pri", 3.5) == 1

    def test_down_feature_not_below(self):
        assert uls_channel_score(make_features(rp_alpha=0.5), "rp_alpha", 0.3) == 0

    def test_down_feature_below(self):
        assert uls_channel_score(make_features(rp_alpha=0.1), "rp_alpha", 0.3) == 1

    def test_boundary_is_zero(self):
        assert uls_channel_score(make_features(pri=3.5), "pri", 3.5) == 0

    def test_unknown_feature(self):
        with pytest.raises(FeatureError):
            uls_channel_score(make_features(), "gamma_power", 1.0)


def tone_recording(freq, n_channels=2, seconds=30, fs=128.0, amplitude=1.0):
    t = np.arange(int(seconds * fs)) / fs
    rng = np.random.default_rng(0)
    data = np.vstack(
        [amplitude * np.sin(2 * np.pi * freq * t + rng.uniform(0, 6)) + 0.1 * rng.normal(size=t.size)
         for _ in range(n_channels)]
    )
    return Recording([f"ch{i}" for i in range(n_channels)], fs, data)


class TestNormalizer:
    def test_constant_pool(self):
        # All pooled values equal -> c equals that value (std 0).
        norm = UlsNormalizer("pri", 2.0)
        assert np.allclose(norm.normalize(np.array([2.0, 4.0])), [1.0, 2.0])

    def test_mean_plus_three_std(self):
        rng = np.random.default_rng(1)
        values = rng.normal(1.0, 0.5, 20000)
        c = float(values.mean() + 3 * values.std())
        assert c == pytest.approx(2.5, abs=0.02)

    def test_three_sigma_coverage(self):
        rng = np.random.default_rng(2)
        values = np.abs(rng.normal(1.0, 0.4, 50000))
        c = values.mean() + 3 * values.std()
        assert np.mean(values / c <= 1.05) >= 0.99

    def test_fit_on_recordings(self):
        recs = [tone_recording(10.0, seconds=20) for _ in range(3)]
        norm = fit_uls_normalizer(recs, "pri", expected_n=3)
        assert norm.c > 0
        # Alpha-dominated windows keep PRI small, so c stays modest.
        assert norm.c < 1.0

    def test_warning_under_expected_count(self, caplog):
        import logging

        recs = [tone_recording(10.0, seconds=10)]
        with caplog.at_level(logging.WARNING, logger="slowave.detect"):
            fit_uls_normalizer(recs, "pri")
        assert any("recommended" in r.message for r in caplog.records)

    def test_invalid_constant(self):
        with pytest.raises(ValueError):
            UlsNormalizer("pri", 0.0)


class TestHistogram:
    def test_unit_two_bins_half_goes_up(self):
        hist = build_histogram(np.full(10, 0.5), 2, "unit")
        assert hist.counts.tolist() == [0, 10]

    def test_uls_outlier_high(self):
        hist = build_histogram(np.array([4.5]), 20, "uls")
        assert hist.counts[-1] == 1
        assert hist.counts[:-1].sum() == 0

    def test_uls_outlier_low_and_edges(self):
        hist = build_histogram(np.array([-0.5, 0.0, 4.0]), 5, "uls")
        assert hist.counts[0] == 1  # [-100, 0)
        assert hist.counts[1] == 1  # 0 in the first core bin
        assert hist.counts[-2] == 1  # 4 closes the last core bin
        assert hist.counts[-1] == 0

    def test_uniform_binomial_bound(self):
        rng = np.random.default_rng(3)
        n = 10_000
        values = rng.uniform(0, 1, n)
        hist = build_histogram(values, 10, "unit")
        p = 0.1
        bound = 3 * np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(hist.counts - n * p) <= bound)

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(4)
        values = rng.uniform(-1, 5, 500)
        hist = build_histogram(values, 15, "uls")
        assert hist.n_values == 500

    def test_clamping_warns(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING, logger="slowave.detect"):
            hist = build_histogram(np.array([150.0, -150.0]), 2, "uls")
        assert hist.counts[0] == 1 and hist.counts[-1] == 1
        assert any("clamped" in r.message for r in caplog.records)

    def test_bad_bin_count(self):
        with pytest.raises(ValueError):
            build_histogram(np.array([0.5]), 7, "unit")

    def test_unit_range_enforced(self):
        with pytest.raises(ValueError):
            build_histogram(np.array([1.5]), 2, "unit")


class TestHistogramFeatures:
    def test_constant_values(self):
        values = np.full(50, 0.3)
        hist = build_histogram(values, 10, "unit")
        feats = histogram_features(values, hist)
        s = feats.stats
        assert s["mean"] == pytest.approx(0.3)
        assert s["std"] == 0.0
        assert s["range"] == 0.0
        assert s["skewness"] == 0.0
        assert s["kurtosis"] == 0.0

    def test_bernoulli_values(self):
        values = np.array([0.0, 1.0] * 25)
        hist = build_histogram(values, 2, "unit")
        feats = histogram_features(values, hist)
        assert feats.stats["mean"] == 0.5
        assert feats.stats["std"] == 0.5
        assert feats.stats["range"] == 1.0

    def test_gaussian_moments(self):
        rng = np.random.default_rng(5)
        values = np.clip(rng.normal(0.5, 0.15, 10_000), 0, 1)
        hist = build_histogram(values, 20, "unit")
        feats = histogram_features(values, hist)
        assert abs(feats.stats["skewness"]) < 0.1
        assert abs(feats.stats["kurtosis"]) < 0.2

    def test_frequencies_sum_to_one(self):
        rng = np.random.default_rng(6)
        values = rng.uniform(0, 1, 321)
        hist = build_histogram(values, 5, "unit")
        feats = histogram_features(values, hist)
        assert feats.frequencies.sum() == pytest.approx(1.0, abs=1e-9)
        assert len(feats.vector()) == 5 + 9

    def test_mode_tie_takes_lower_bin(self):
        values = np.array([0.1, 0.9])
        hist = build_histogram(values, 2, "unit")
        feats = histogram_features(values, hist)
        assert feats.stats["mode"] == 0.25  # center of [0, 0.5)


class FakeDetector:
    """Fixed per-channel scores for histogram plumbing tests."""

    histogram_mode = "unit"

    def __init__(self, scores):
        self.fixed = np.asarray(scores, dtype=np.float64)

    def score_windows(self, windows):
        reps = windows.shape[0] // self.fixed.size
        return np.tile(self.fixed, reps)

    def histogram_values(self, windows):
        return self.score_windows(windows)


class TestSegmentAndEegFeatures:
    def test_constant_zero_detector(self):
        seg = Segment(data=np.zeros((19, 640)), start_s=0.0)
        feats = segment_level_features(seg, FakeDetector(np.zeros(19)), 2)
        assert feats.frequencies.tolist() == [1.0, 0.0]
        assert feats.stats["mean"] == 0.0

    def test_one_hot_channel(self):
        seg = Segment(data=np.zeros((19, 640)), start_s=0.0)
        scores = np.zeros(19)
        scores[7] = 1.0
        feats = segment_level_features(seg, FakeDetector(scores), 2)
        assert feats.frequencies == pytest.approx([18 / 19, 1 / 19])

    def test_eeg_level_window_count(self):
        rec = tone_recording(10.0, n_channels=19, seconds=30)
        det = FakeDetector(np.zeros(19))
        from slowave.detect import eeg_level_values

        values = eeg_level_values(rec, det)
        assert values.size == 21 * 19  # 399

    def test_too_short_recording(self):
        rec = tone_recording(10.0, n_channels=2, seconds=4)
        with pytest.raises(ValueError):
            eeg_level_features(rec, FakeDetector(np.zeros(2)), 2)

    def test_classifier_delegates_to_shallow(self):
        rng = np.random.default_rng(7)
        feats = []
        labels = []
        for i in range(30):
            label = i % 2
            values = np.clip(rng.normal(0.2 + 0.6 * label, 0.05, 19), 0, 1)
            hist = build_histogram(values, 5, "unit")
            feats.append(histogram_features(values, hist))
            labels.append(label)
        model = fit_segment_or_eeg_classifier(feats, np.array(labels), kind="lr", seed=0)
        X = np.vstack([f.vector() for f in feats])
        pred = (model.predict_score(X) > 0.5).astype(int)
        assert np.array_equal(pred, np.array(labels))


class TestThresholdClassification:
    def hist_with(self, normal_frac, slow_frac, n=1000):
        # Mass in bin 1 (normal), bin 20 (slow), remainder mid (bin 10).
        values = np.concatenate([
            np.full(int(n * normal_frac), 0.01),
            np.full(int(n * slow_frac), 0.99),
            np.full(n - int(n * normal_frac) - int(n * slow_frac), 0.49),
        ])
        return build_histogram(values, 20, "unit")

    def test_table_values(self):
        assert TABLE_THRESHOLDS["uls"]["normal"] == 55.0
        assert TABLE_THRESHOLDS["uls"]["slow"] == 10.0
        assert TABLE_THRESHOLDS["ssls"]["normal"] == 80.0
        assert TABLE_THRESHOLDS["ssls"]["slow"] == 5.0
        assert TABLE_THRESHOLDS["sdls"]["normal"] == 90.0
        assert TABLE_THRESHOLDS["sdls"]["slow"] == 5.0

    def test_uls_normal_mode_slowing(self):
        decision = threshold_classify_eeg(self.hist_with(0.40, 0.10), "normal", 55.0)
        assert decision.normal_pct == pytest.approx(40.0)
        assert decision.label == 1

    def test_sdls_normal_mode_slow_free(self):
        decision = threshold_classify_eeg(self.hist_with(0.95, 0.01), "normal", 90.0)
        assert decision.label == 0

    def test_mass_all_middle(self):
        values = np.full(100, 0.5)
        decision = threshold_classify_eeg(build_histogram(values, 20, "unit"), "normal", 1.0)
        assert decision.normal_pct == 0.0
        assert decision.label == 1

    def test_mass_conservation(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(0, 1, 500)
        decision = threshold_classify_eeg(build_histogram(values, 20, "unit"), "slow", 10.0)
        total = decision.normal_pct + decision.slow_pct + decision.middle_pct
        assert total == pytest.approx(100.0, abs=1e-9)

    def test_needs_20_bins(self):
        with pytest.raises(ValueError):
            threshold_classify_eeg(build_histogram(np.array([0.5]), 10, "unit"), "normal", 55.0)

    def test_slow_mode_direction(self):
        decision = threshold_classify_eeg(self.hist_with(0.2, 0.3), "slow", 10.0)
        assert decision.label == 1
        decision = threshold_classify_eeg(self.hist_with(0.2, 0.05), "slow", 10.0)
        assert decision.label == 0

    def test_uls_outliers_excluded_from_percentages(self):
        values = np.concatenate([np.full(50, 0.1), np.full(50, 3.9), np.full(100, 50.0)])
        hist = build_histogram(values, 20, "uls")
        decision = threshold_classify_eeg(hist, "normal", 55.0)
        # Outlier mass is ignored: core is 50/50 normal/slow.
        assert decision.normal_pct == pytest.approx(50.0)
        assert decision.slow_pct == pytest.approx(50.0)


class TestDegrees:
    def test_gps(self):
        fractions = {f"ch{i}": 0.6 for i in range(19)}
        flagged, category = categorize_fractions(fractions)
        assert len(flagged) == 19
        assert category == "GPS"

    def test_fis(self):
        fractions = {f"ch{i}": 0.3 if i < 3 else 0.05 for i in range(19)}
        flagged, category = categorize_fractions(fractions)
        assert len(flagged) == 3
        assert category == "FIS"

    def test_slow_free(self):
        fractions = {f"ch{i}": 0.05 for i in range(19)}
        assert categorize_fractions(fractions) == ([], "slow-free")

    def test_gis_and_fps(self):
        gis = {f"ch{i}": 0.3 for i in range(19)}
        assert categorize_fractions(gis)[1] == "GIS"
        fps = {f"ch{i}": 0.8 if i < 4 else 0.0 for i in range(19)}
        assert categorize_fractions(fps)[1] == "FPS"

    def test_total_function_over_random_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            fractions = {f"ch{i}": float(rng.uniform(0, 1)) for i in range(19)}
            _, category = categorize_fractions(fractions)
            assert category in ("GPS", "GIS", "FPS", "FIS", "slow-free")

    def test_report_on_recording(self):
        rec = tone_recording(2.0, n_channels=4, seconds=30, amplitude=5.0)
        det = FakeDetector(np.array([1.0, 1.0, 1.0, 0.0]))
        report = degrees_of_slowing(rec, det)
        assert report.category == "GPS"  # 3/4 flagged at 100%
        assert set(report.flagged) == {"ch0", "ch1", "ch2"}
        doc = report.to_json_dict()
        assert doc["category"] == "GPS"
        csv = report.scalp_csv()
        assert csv.startswith("channel,slow_fraction,flagged")


class TestAnnotationSelection:
    def make_pool(self, n_recs=8, seconds=40, seed=0):
        # Delta/alpha mixtures spanning high (PRI > 3.5), mid (1 < PRI < 3.5)
        # and low PRI regimes.
        rng = np.random.default_rng(seed)
        ratios = [8.0, 8.0, 6.0, 1.6, 1.4, 1.2, 0.3, 0.2]
        recs = []
        for i in range(n_recs):
            ratio = ratios[i % len(ratios)]
            t = np.arange(int(seconds * 128)) / 128.0
            data = np.vstack([
                np.sqrt(ratio) * np.sin(2 * np.pi * 2.0 * t + rng.uniform(0, 6))
                + np.sin(2 * np.pi * 10.0 * t + rng.uniform(0, 6))
                + 0.05 * rng.normal(size=t.size)
                for _ in range(3)
            ])
            rec = Recording(["a", "b", "c"], 128.0, data, meta={"subject_id": f"r{i}"})
            recs.append(rec)
        return recs

    def test_cap_and_duplicates(self):
        recs = self.make_pool()
        out = select_annotation_segments(recs, n_segments=40, n_duplicates=5, seed=1)
        unique = [s for s in out if s.duplicate_of is None]
        dups = [s for s in out if s.duplicate_of is not None]
        assert len(dups) == 5
        per_rec = {}
        for s in unique:
            per_rec[s.recording_id] = per_rec.get(s.recording_id, 0) + 1
        assert all(v <= 20 for v in per_rec.values())
        # Duplicate markers point at a matching original.
        for d in dups:
            src = out[d.duplicate_of]
            assert src.recording_id == d.recording_id
            assert src.start_s == d.start_s

    def test_strata_ratio(self):
        recs = self.make_pool(n_recs=12, seconds=60)
        out = select_annotation_segments(recs, n_segments=50, n_duplicates=0, seed=2)
        high = sum(1 for s in out if s.stratum == "high")
        assert abs(high / len(out) - 0.9) <= 0.02

    def test_insufficient_pool_warns(self, caplog):
        import logging

        recs = self.make_pool(n_recs=2, seconds=10)
        with caplog.at_level(logging.WARNING, logger="slowave.detect"):
            out = select_annotation_segments(recs, n_segments=900, n_duplicates=0, seed=3)
        assert len(out) < 900
        assert any("short" in r.message for r in caplog.records)

    def test_deterministic(self):
        recs = self.make_pool()
        a = select_annotation_segments(recs, n_segments=30, n_duplicates=3, seed=7)
        b = select_annotation_segments(recs, n_segments=30, n_duplicates=3, seed=7)
        assert [(s.recording_id, s.start_s, s.duplicate_of) for s in a] == [
            (s.recording_id, s.start_s, s.duplicate_of) for s in b
        ]
