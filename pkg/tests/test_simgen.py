import numpy as np
import pytest

from blenlos import simgen
from blenlos.errors import ConfigError
from blenlos.pathloss import PathLossParams, mean_rssi
from blenlos.simgen import Rect, Scenario
from blenlos.types import BeaconMap

ONE = BeaconMap([("a", (0.0, 0.0, 0.0))])


def straight(**kw):
    return Scenario(ONE, ((1.0, 0.0), (11.0, 0.0)), **kw)


class TestTrajectory:
    def test_pose_count_and_spacing(self):
        poses = simgen.generate_trajectory(straight(speed=0.2, sample_rate=10))
        assert len(poses) == 501
        xy = np.array([p.position[:2] for p in poses])
        np.testing.assert_allclose(np.linalg.norm(np.diff(xy, axis=0), axis=1), 0.02, atol=1e-12)
        assert poses[-1].t == pytest.approx(50.0)

    def test_corner_keeps_arc_length(self):
        sc = Scenario(ONE, ((0, 0), (1, 0), (1, 1)), speed=0.5, sample_rate=2)
        xy = np.array([p.position[:2] for p in simgen.generate_trajectory(sc)])
        np.testing.assert_allclose(xy, [[0, 0], [0.25, 0], [0.5, 0], [0.75, 0], [1, 0],
                                        [1, 0.25], [1, 0.5], [1, 0.75], [1, 1]], atol=1e-12)

    def test_receiver_height(self):
        poses = simgen.generate_trajectory(straight(receiver_height=0.3))
        assert all(p.position[2] == 0.3 for p in poses)

    def test_zero_length(self):
        with pytest.raises(ConfigError):
            simgen.generate_trajectory(Scenario(ONE, ((1, 1), (1, 1))))


def _dense_oracle(p, q, rects, n=4001):
    t = np.linspace(0, 1, n)[:, None]
    pts = np.asarray(p) + t * (np.asarray(q) - np.asarray(p))
    for r in rects:
        if np.any((pts[:, 0] > r.x0) & (pts[:, 0] < r.x1) & (pts[:, 1] > r.y0) & (pts[:, 1] < r.y1)):
            return False
    return True


class TestOcclusion:
    def test_simple_cases(self):
        wall = Rect(4, -1, 5, 1)
        assert not simgen.is_los((0, 0), (10, 0), [wall])
        assert simgen.is_los((0, 2), (10, 2), [wall])
        assert simgen.is_los((0, 1), (10, 1), [wall])  # grazing an edge
        assert simgen.is_los((0, 0), (3, 0), [wall])

    def test_dense_sampling_oracle(self):
        rng = np.random.default_rng(0)
        disagreements = 0
        for _ in range(1000):
            x0, y0 = rng.uniform(0, 8, 2)
            r = Rect(x0, y0, x0 + rng.uniform(0.2, 3), y0 + rng.uniform(0.2, 3))
            p, q = rng.uniform(-2, 12, 2), rng.uniform(-2, 12, 2)
            disagreements += simgen.is_los(p, q, [r]) != _dense_oracle(p, q, [r])
        # sampling can miss a corner clipped by less than its step
        assert disagreements <= 2


class TestStream:
    def test_dropout_rate(self):
        sc = simgen.office_scenario(seed=1)
        stream = simgen.sample_rssi_stream(sc)
        duration = stream.groundtruth[-1].t - stream.groundtruth[0].t + 0.1
        rate = len(stream.observations) / (duration * len(sc.beacons))
        assert rate == pytest.approx(7.0, abs=0.2)

    def test_los_matches_pathloss(self):
        sc = straight(speed=0.02, pathloss=PathLossParams(-60, -2.0, 1.0, sigma=3.0), seed=2)
        stream = simgen.sample_rssi_stream(sc)
        assert all(lab.los for lab in stream.labels)
        d = np.array([p.position[0] for p in stream.groundtruth])
        r = np.array([o.rssi for o in stream.observations])
        resid = r - mean_rssi(sc.pathloss, d)
        assert resid.std() == pytest.approx(3.0, rel=0.03)
        for lo in range(1, 11):
            m = (d >= lo) & (d < lo + 1)
            # 4 SE keeps the family-wise false alarm rate near 1e-3 over ten bins
            assert abs(resid[m].mean()) < 4 * 3.0 / np.sqrt(m.sum())

    def test_blocked_is_all_nlos_and_weaker(self):
        pl = PathLossParams(-60, -2.0, 1.0, sigma=2.0)
        clear = simgen.sample_rssi_stream(simgen.ranging_scenario(False, pathloss=pl, seed=3))
        blocked = simgen.sample_rssi_stream(simgen.ranging_scenario(True, pathloss=pl, seed=3))
        assert simgen.nlos_fraction(clear) == 0.0
        assert simgen.nlos_fraction(blocked) == 1.0
        gap = np.mean([o.rssi for o in clear.observations]) - np.mean(
            [o.rssi for o in blocked.observations])
        assert gap == pytest.approx(simgen.NLOS_EXTRA_LOSS, abs=0.3)

    def test_seeded(self):
        a = simgen.sample_rssi_stream(simgen.office_scenario(seed=5))
        b = simgen.sample_rssi_stream(simgen.office_scenario(seed=5))
        assert a.observations == b.observations and a.labels == b.labels

    def test_office_nlos_share(self):
        frac = simgen.nlos_fraction(simgen.sample_rssi_stream(simgen.office_scenario(seed=0)))
        assert 0.3 <= frac <= 0.5

    def test_training_points_use_true_range(self):
        sc = simgen.ranging_scenario(False, n_beacons=2, length=2.0, seed=0)
        stream = simgen.sample_rssi_stream(sc)
        pts = simgen.training_points(stream, sc.beacons)
        gt = {p.t: p.position[0] for p in stream.groundtruth}
        for o, tp in zip(stream.observations, pts):
            assert tp.distance == pytest.approx(gt[o.t]) and tp.rssi == o.rssi and tp.label == 1


def test_scenario_round_trip(tmp_path):
    sc = simgen.office_scenario(seed=9)
    sc.save(tmp_path / "s.json")
    back = Scenario.load(tmp_path / "s.json")
    assert back.to_dict() == sc.to_dict()


@pytest.mark.parametrize("kw", [dict(speed=0), dict(dropout=1.0), dict(sample_rate=-1),
                                dict(nlos_extra_loss=-1)])
def test_invalid_scenarios(kw):
    with pytest.raises(ConfigError):
        straight(**kw)


def test_bad_scenario_file(tmp_path):
    (tmp_path / "s.json").write_text('{"waypoints": [[0, 0], [1, 1]]}')
    with pytest.raises(ConfigError):
        Scenario.load(tmp_path / "s.json")
