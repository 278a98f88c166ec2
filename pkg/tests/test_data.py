"""Ingestion, exposure-series construction, smoothing, and binning."""

import io

import numpy as np
import pytest

from peakshift.data import (
    ExposureSeries,
    MovingAverageSmoother,
    SchemaError,
    aggregate_curve,
    build_exposure_series,
    events_to_csv,
    ingest_events,
    moving_average,
    series_from_csv,
    series_to_csv,
    smooth_series,
)

HEADER = "user_id,item_id,group,rating,timestamp\n"


def _ingest(text, schema=None):
    return ingest_events(io.StringIO(text), schema)


class TestIngest:
    def test_three_valid_rows(self):
        events, report = _ingest(HEADER + "u1,i1,g,4.5,1\nu1,i2,g,3.0,2\nu2,i1,g,5.0,3\n")
        assert len(events) == 3
        assert report.accepted == 3 and report.rejected == 0
        assert report.n_users == 2 and report.n_groups == 1

    def test_rating_out_of_range_rejected(self):
        events, report = _ingest(HEADER + "u1,i1,g,7.2,1\nu1,i2,g,4.0,2\n")
        assert len(events) == 1
        assert report.rejected_rating == 1

    def test_duplicate_rows_both_kept(self):
        # events are occurrences, not keys: round-trip count oracle
        row = "u1,i1,g,4.5,1\n"
        events, report = _ingest(HEADER + row + row)
        assert len(events) == 2 == report.accepted

    def test_malformed_row_counted(self):
        events, report = _ingest(HEADER + "u1,i1,g,not_a_number,1\nu1,i2,g,4,2\n")
        assert report.malformed == 1 and report.accepted == 1

    def test_missing_column_hard_error(self):
        with pytest.raises(SchemaError, match="missing columns"):
            _ingest("user_id,item_id,rating\nu1,i1,4.0\n")

    def test_schema_mapping(self):
        text = "uid,thing,genre,score,ts\nu1,i1,g,4.5,1\n"
        events, report = _ingest(
            text,
            schema={
                "user_id": "uid",
                "item_id": "thing",
                "group": "genre",
                "rating": "score",
                "timestamp": "ts",
            },
        )
        assert report.accepted == 1
        assert events[0].user_id == "u1" and events[0].rating == 4.5

    def test_unknown_schema_key_rejected(self):
        with pytest.raises(SchemaError, match="unknown schema"):
            _ingest(HEADER, schema={"color": "c"})

    def test_empty_timestamp_allowed(self):
        events, report = _ingest(HEADER + "u1,i1,g,4.0,\n")
        assert report.accepted == 1 and events[0].timestamp is None


class TestExposureSeries:
    def test_threshold_binarization(self):
        events, _ = _ingest(HEADER + "u1,i1,g,5,1\nu1,i2,g,3,2\nu1,i3,g,4,3\n")
        (series,) = build_exposure_series(events, threshold=4.0)
        assert series.engagement.tolist() == [1, 0, 1]
        assert series.raw_ratings.tolist() == [5.0, 3.0, 4.0]

    def test_tiny_threshold_all_engaged(self):
        events, _ = _ingest(HEADER + "u1,i1,g,0.5,1\nu1,i2,g,1,2\n")
        (series,) = build_exposure_series(events, threshold=0.0001)
        assert series.engagement.tolist() == [1, 1]

    def test_interleaved_users_lengths(self):
        rows = "".join(
            f"u{i % 3},i{i},g,4.0,{100 - i}\n" for i in range(12)
        )
        events, _ = _ingest(HEADER + rows)
        series = build_exposure_series(events)
        counts = {s.user_id: len(s) for s in series}
        assert counts == {"u0": 4, "u1": 4, "u2": 4}

    def test_ordering_by_timestamp_then_input(self):
        text = HEADER + "u1,a,g,5,20\nu1,b,g,1,10\nu1,c,g,4,10\n"
        events, _ = _ingest(text)
        (series,) = build_exposure_series(events)
        # ts=10 rows first (input order ties), ts=20 last
        assert series.raw_ratings.tolist() == [1.0, 4.0, 5.0]

    def test_exposure_indices_contiguous_random_order(self):
        rng = np.random.default_rng(9)
        rows = [f"u{rng.integers(5)},i{i},g,{rng.uniform(0, 5):.2f},{rng.integers(1000)}" for i in range(200)]
        events, _ = _ingest(HEADER + "\n".join(rows) + "\n")
        for s in build_exposure_series(events):
            assert s.exposures.tolist() == list(range(1, len(s) + 1))

    def test_bad_threshold(self):
        with pytest.raises(ValueError, match="threshold"):
            build_exposure_series([], threshold=0.0)

    def test_group_filter(self):
        events, _ = _ingest(HEADER + "u1,i1,g1,4,1\nu1,i2,g2,4,2\n")
        series = build_exposure_series(events, group="g1")
        assert len(series) == 1 and series[0].group == "g1"


class TestSmoothing:
    def test_constant_series_invariant(self):
        out = moving_average([1, 1, 1, 1, 1], 5)
        assert out.tolist() == [1, 1, 1, 1, 1]

    def test_truncated_windows_hand_enumerated(self):
        out = moving_average([0, 0, 1, 0, 0], 5)
        assert np.allclose(out, [1 / 3, 1 / 4, 1 / 5, 1 / 4, 1 / 3])

    def test_window_one_is_identity(self):
        x = [0, 1, 1, 0, 1]
        assert moving_average(x, 1).tolist() == x

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            moving_average([1, 0, 1], 4)

    def test_range_preserved(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 2, 50)
        out = moving_average(x, 5)
        assert out.min() >= 0 and out.max() <= 1

    def test_values_within_window_extrema(self):
        rng = np.random.default_rng(4)
        x = rng.random(30)
        out = moving_average(x, 7)
        for i in range(30):
            lo, hi = max(0, i - 3), min(30, i + 4)
            assert x[lo:hi].min() - 1e-12 <= out[i] <= x[lo:hi].max() + 1e-12

    def test_smooth_series_preserves_length(self):
        s = ExposureSeries("u", "g", np.array([1, 0, 1, 0, 1, 1, 0]))
        assert len(smooth_series(s, 5)) == 7

    def test_transformer_matches_function(self):
        x = np.array([1, 0, 0, 1, 1, 0, 1], dtype=float)
        smoother = MovingAverageSmoother(window=5).fit(x)
        assert np.allclose(smoother.transform(x), moving_average(x, 5))


class TestAggregateCurve:
    def test_identical_users_reproduce_series(self):
        users = [
            ExposureSeries("u1", "g", [1, 0, 1]),
            ExposureSeries("u2", "g", [1, 0, 1]),
        ]
        curve = aggregate_curve(users)
        assert curve.means.tolist() == [1.0, 0.0, 1.0]
        assert curve.counts.tolist() == [2, 2, 2]

    def test_survivor_weighted_means(self):
        users = [ExposureSeries("u1", "g", [1, 1]), ExposureSeries("u2", "g", [0])]
        curve = aggregate_curve(users)
        assert curve.means.tolist() == [0.5, 1.0]
        assert curve.counts.tolist() == [2, 1]

    def test_min_bin_count_filter(self):
        users = [ExposureSeries("u1", "g", [1, 1]), ExposureSeries("u2", "g", [0])]
        curve = aggregate_curve(users, min_bin_count=2)
        assert curve.exposures.tolist() == [1]

    def test_no_surviving_bins_is_error(self):
        users = [ExposureSeries("u1", "g", [1])]
        with pytest.raises(ValueError, match="insufficient population coverage"):
            aggregate_curve(users, min_bin_count=5)

    def test_matches_survival_weighted_formula(self):
        # oracle: mean at n must equal sum_u S_u(n) e_u(n) / sum_u S_u(n)
        rng = np.random.default_rng(12)
        users = [
            ExposureSeries(f"u{i}", "g", rng.integers(0, 2, rng.integers(1, 20)))
            for i in range(30)
        ]
        curve = aggregate_curve(users)
        for n, mean, count in zip(curve.exposures, curve.means, curve.counts):
            contributors = [u.engagement[n - 1] for u in users if len(u) >= n]
            assert count == len(contributors)
            assert mean == pytest.approx(np.mean(contributors))


class TestSeriesCsvRoundTrip:
    def test_round_trip_preserves_everything(self, tmp_path):
        users = [
            ExposureSeries("u1", "g1", [1, 0, 1], [4.5, 2.0, 5.0]),
            ExposureSeries("u2", "g2", [0, 1], [1.0, 4.0]),
        ]
        path = tmp_path / "series.csv"
        series_to_csv(users, path)
        back = series_from_csv(path)
        assert len(back) == 2
        for orig, loaded in zip(sorted(users, key=lambda s: s.user_id), back):
            assert loaded.user_id == orig.user_id
            assert loaded.group == orig.group
            assert loaded.engagement.tolist() == orig.engagement.tolist()
            assert loaded.raw_ratings.tolist() == orig.raw_ratings.tolist()

    def test_events_csv_reingests(self, tmp_path):
        events, _ = _ingest(HEADER + "u1,i1,g,4.5,1\nu1,i2,g,2.0,2\n")
        path = tmp_path / "events.csv"
        events_to_csv(events, path)
        again, report = ingest_events(path)
        assert report.accepted == 2
        assert [e.rating for e in again] == [4.5, 2.0]
