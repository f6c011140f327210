import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blenlos.errors import DataError, ParseError
from blenlos.types import (BeaconMap, GroundtruthPose, RssiObservation, TrainingPoint,
                           downsample, load_beacon_map, load_groundtruth, load_rssi_log,
                           median_window_filter, save_beacon_map, write_groundtruth,
                           write_rssi_log)


def obs(t, rssi, bid="b1"):
    return RssiObservation(t, bid, rssi)


class TestRssiLog:
    def test_parse_row(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("0.10,b1,-58\n")
        assert load_rssi_log(p) == [RssiObservation(0.10, "b1", -58.0)]

    def test_header_is_optional(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("t_seconds,beacon_id,rssi_dbm\n0.10,b1,-58\n")
        assert len(load_rssi_log(p)) == 1

    def test_empty_file(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("")
        assert load_rssi_log(p) == []

    def test_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("x,b1,-58\n")
        with pytest.raises(ParseError) as err:
            load_rssi_log(p)
        assert err.value.line == 1

    def test_malformed_later_line(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("0.1,b1,-58\n0.2,b1\n")
        with pytest.raises(ParseError, match=":2:"):
            load_rssi_log(p)

    def test_unknown_beacons_accepted(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("0.1,nobody,-70\n")
        assert load_rssi_log(p)[0].beacon_id == "nobody"

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1e5, allow_nan=False),
                              st.sampled_from(["a", "b-2", "c_3"]),
                              st.floats(-120, 10, allow_nan=False)), max_size=30))
    def test_round_trip(self, tmp_path_factory, rows):
        p = tmp_path_factory.mktemp("rt") / "log.csv"
        records = [RssiObservation(t, b, r) for t, b, r in sorted(rows)]
        write_rssi_log(records, p)
        assert load_rssi_log(p) == records


def test_groundtruth_round_trip(tmp_path):
    poses = [GroundtruthPose(0.0, (0.0, 1.0, 0.3)), GroundtruthPose(0.1, (0.02, 1.0, 0.3))]
    write_groundtruth(poses, tmp_path / "gt.csv")
    assert load_groundtruth(tmp_path / "gt.csv") == poses


def test_groundtruth_requires_increasing_time(tmp_path):
    p = tmp_path / "gt.csv"
    p.write_text("0.1,0,0,0\n0.1,1,0,0\n")
    with pytest.raises(ParseError):
        load_groundtruth(p)


class TestBeaconMap:
    def test_round_trip(self, tmp_path):
        m = BeaconMap([("b1", (0, 0, 2)), ("b2", (3.5, 1, 2))])
        save_beacon_map(m, tmp_path / "m.json")
        back = load_beacon_map(tmp_path / "m.json")
        assert back.ids == ["b1", "b2"]
        np.testing.assert_array_equal(back["b2"], [3.5, 1, 2])

    def test_duplicate_ids(self):
        with pytest.raises(DataError):
            BeaconMap([("b", (0, 0, 0)), ("b", (1, 0, 0))])

    def test_empty(self):
        with pytest.raises(DataError):
            BeaconMap([])

    def test_non_finite(self):
        with pytest.raises(DataError):
            BeaconMap([("b", (0, np.nan, 0))])

    def test_unknown_lookup(self):
        with pytest.raises(DataError):
            BeaconMap([("b", (0, 0, 0))])["zz"]


def test_training_point_label_validation():
    with pytest.raises(DataError):
        TrainingPoint(1.0, -60, 0)


class TestMedianWindow:
    def test_odd_bucket(self):
        out = median_window_filter([obs(0.001, -50), obs(0.002, -60), obs(0.003, -90)], 0.01)
        assert [o.rssi for o in out] == [-60]

    def test_single(self):
        out = median_window_filter([obs(0.5, -71)], 0.01)
        assert out[0].rssi == -71 and out[0].t == 0.5

    def test_even_bucket_midpoint(self):
        out = median_window_filter([obs(0.001, -50), obs(0.002, -60)], 0.01)
        assert out[0].rssi == -55

    def test_empty(self):
        assert median_window_filter([], 0.01) == []

    def test_window_must_be_positive(self):
        with pytest.raises(ValueError):
            median_window_filter([obs(0, -50)], 0)

    def test_per_beacon_mode(self):
        data = [obs(0.001, -50, "a"), obs(0.002, -60, "b"), obs(0.003, -70, "a")]
        out = median_window_filter(data, 0.01, per_beacon=True)
        assert {(o.beacon_id, o.rssi) for o in out} == {("a", -60), ("b", -60)}

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 2, allow_nan=False), st.integers(-100, -30)),
                    max_size=60),
           st.sampled_from([0.01, 0.05, 0.3]))
    def test_count_and_range(self, rows, window):
        data = [obs(t, r) for t, r in sorted(rows)]
        out = median_window_filter(data, window)
        buckets = {}
        for o in data:
            buckets.setdefault(int(np.floor(o.t / window + 1e-9)), []).append(o.rssi)
        assert len(out) == len(buckets)
        for o, (k, vals) in zip(out, sorted(buckets.items())):
            assert min(vals) <= o.rssi <= max(vals)


class TestDownsample:
    @staticmethod
    def points(n_pos, n_neg):
        return ([TrainingPoint(i * 0.01, -60, 1) for i in range(n_pos)]
                + [TrainingPoint(i * 0.01, -70, -1) for i in range(n_neg)])

    def test_size(self):
        assert len(downsample(self.points(1200, 800), 1000)) == 1000

    def test_small_input_unchanged(self):
        pts = self.points(3, 2)
        assert downsample(pts, 10) == pts

    def test_label_balance(self):
        out = downsample(self.points(50, 50), 10)
        n_pos = sum(p.label == 1 for p in out)
        assert abs(n_pos - 5) <= 1 and abs(len(out) - n_pos - 5) <= 1

    def test_seeded_determinism(self):
        pts = self.points(700, 300)
        assert downsample(pts, 100, seed=3) == downsample(pts, 100, seed=3)
        assert downsample(pts, 100, seed=3) != downsample(pts, 100, seed=4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 200), st.integers(1, 150))
    def test_proportional_within_one(self, n_pos, n_neg, target):
        out = downsample(self.points(n_pos, n_neg), target)
        n = n_pos + n_neg
        assert len(out) == min(target, n)
        if n > target:
            got = sum(p.label == 1 for p in out)
            assert abs(got - target * n_pos / n) <= 1
