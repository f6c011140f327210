import hashlib
import json

import numpy as np
import pytest

from blenlos import cli, report, simgen
from blenlos.gpc import GpcModel
from blenlos.loscache import LosGrid
from blenlos.pathloss import PathLossParams, mean_rssi
from blenlos.types import BeaconMap, load_groundtruth


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_scenario(path, **kw):
    beacons = BeaconMap([("a", (0.0, 0.0, 0.0)), ("b", (0.0, 0.0, 0.0))])
    sc = simgen.Scenario(beacons, ((0.3, 0.0), (8.3, 0.0)), **kw)
    sc.save(path)
    return sc


@pytest.fixture(scope="module")
def office(tmp_path_factory):
    d = tmp_path_factory.mktemp("office")
    assert run("simulate", "--preset", "office", "--seed", 3, "--out", d / "data") == 0
    PathLossParams(-64.53, -1.72, 1.78, 3.0).save(d / "pl.json")
    return d


class TestSimulate:
    def test_writes_dataset(self, office, capsys):
        data = office / "data"
        for name in ("rssi.csv", "labels.csv", "groundtruth.csv", "beacons.json", "scenario.json"):
            assert (data / name).exists()

    def test_summary_and_determinism(self, tmp_path, capsys):
        write_scenario(tmp_path / "s.json", seed=4)
        assert run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path / "a") == 0
        assert "observations" in capsys.readouterr().out
        run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path / "b")
        for name in ("rssi.csv", "labels.csv", "groundtruth.csv"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_missing_file(self, tmp_path, capsys):
        assert run("simulate", "--scenario", tmp_path / "nope.json", "--out", tmp_path) == 2
        assert "error" in capsys.readouterr().err

    def test_invalid_scenario(self, tmp_path):
        (tmp_path / "s.json").write_text('{"beacons": [], "waypoints": [[0, 0]], "speed": -1}')
        assert run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path) != 0


class TestFitPathloss:
    def test_noiseless_generate_then_fit(self, tmp_path):
        truth = PathLossParams(-62.0, -2.1, 1.0, sigma=0.0)
        write_scenario(tmp_path / "s.json", pathloss=truth, seed=1)
        run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path / "d")
        d = tmp_path / "d"
        assert run("fit-pathloss", "--log", d / "rssi.csv", "--groundtruth", d / "groundtruth.csv",
                   "--beacons", d / "beacons.json", "--out", tmp_path / "pl.json") == 0
        fitted = PathLossParams.load(tmp_path / "pl.json")
        grid = np.linspace(0.3, 8.3, 100)
        resid = mean_rssi(fitted, grid) - mean_rssi(truth, grid)
        assert np.sqrt(np.mean(resid ** 2)) < 0.5
        table = report.read_table(tmp_path / "pl_residuals.csv")
        assert np.abs(table["residual_db"]).max() < 1e-6

    def test_zero_window(self, office, tmp_path):
        d = office / "data"
        assert run("fit-pathloss", "--log", d / "rssi.csv", "--groundtruth", d / "groundtruth.csv",
                   "--beacons", d / "beacons.json", "--window", 0, "--out", tmp_path / "p.json") == 2


class TestTrainGpc:
    @pytest.fixture(scope="class")
    @staticmethod
    def separable(tmp_path_factory):
        d = tmp_path_factory.mktemp("sep")
        # the wall hides the beacons once the receiver is past x = 4.2
        write_scenario(d / "s.json", obstacles=[(4.0, -1.0, 4.2, 1.0)], nlos_extra_loss=15.0,
                       pathloss=PathLossParams(-60.0, -2.0, 1.0, sigma=1.0), seed=5)
        run("simulate", "--scenario", d / "s.json", "--out", d)
        return d

    def _args(self, d, out, *extra):
        return ("train-gpc", "--log", d / "rssi.csv", "--labels", d / "labels.csv",
                "--groundtruth", d / "groundtruth.csv", "--beacons", d / "beacons.json",
                "--out", out, *extra)

    def test_separable_accuracy(self, separable, tmp_path, capsys):
        assert run(*self._args(separable, tmp_path / "m.json", "--target", 150,
                               "--max-evals", 60)) == 0
        assert "training_accuracy" in capsys.readouterr().out
        model = GpcModel.load(tmp_path / "m.json")
        assert model.meta["training_accuracy"] >= 0.95

    def test_target_size(self, office, tmp_path):
        d = office / "data"
        assert run(*self._args(d, tmp_path / "m.json", "--target", 1000, "--no-optimize")) == 0
        assert len(GpcModel.load(tmp_path / "m.json").train_labels) == 1000

    def test_deterministic(self, separable, tmp_path):
        for name in ("a.json", "b.json"):
            run(*self._args(separable, tmp_path / name, "--target", 60, "--max-evals", 20,
                            "--seed", 9))
        assert digest(tmp_path / "a.json") == digest(tmp_path / "b.json")

    def test_pooled_recordings(self, separable, tmp_path):
        write_scenario(tmp_path / "s.json", seed=1)
        run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path)
        pooled = list(self._args(separable, tmp_path / "m.json", "--no-optimize"))
        pooled[1:1] = ["--log", tmp_path / "rssi.csv", "--labels", tmp_path / "labels.csv",
                       "--groundtruth", tmp_path / "groundtruth.csv",
                       "--beacons", tmp_path / "beacons.json"]
        assert run(*pooled) == 0
        alone = self._args(separable, tmp_path / "a.json", "--no-optimize")
        assert run(*alone) == 0
        n_pooled = len(GpcModel.load(tmp_path / "m.json").train_labels)
        assert n_pooled > len(GpcModel.load(tmp_path / "a.json").train_labels)

    def test_unequal_repeats(self, separable, tmp_path):
        args = list(self._args(separable, tmp_path / "m.json", "--no-optimize"))
        args[1:1] = ["--log", separable / "rssi.csv"]
        assert run(*args) == 2

    def test_single_class(self, tmp_path):
        write_scenario(tmp_path / "s.json", seed=1)
        run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path)
        assert run(*self._args(tmp_path, tmp_path / "m.json", "--no-optimize")) == 3


@pytest.fixture(scope="module")
def grid_file(office):
    # a quick classifier: no hyperparameter search, small training set
    d = office / "data"
    run("train-gpc", "--log", d / "rssi.csv", "--labels", d / "labels.csv", "--groundtruth",
        d / "groundtruth.csv", "--beacons", d / "beacons.json", "--target", 200,
        "--no-optimize", "--init-lengthscales", 3, 15, "--init-variance", 4,
        "--out", office / "model.json")
    assert run("build-cache", "--model", office / "model.json", "--out", office / "grid.npz") == 0
    return office / "grid.npz"


def test_build_cache_shape(grid_file):
    assert LosGrid.load(grid_file).p_los.shape == (101, 61)


class TestLocalize:
    def _base(self, office, out, *extra):
        d = office / "data"
        return ("localize", "--log", d / "rssi.csv", "--beacons", d / "beacons.json",
                "--pathloss", office / "pl.json", "--groundtruth", d / "groundtruth.csv",
                "--receiver-height", 0.3, "--out", out, *extra)

    def test_repeat_writes_one_trace_per_run(self, office, tmp_path):
        assert run(*self._base(office, tmp_path, "--mode", "pfg", "--repeat", 3)) == 0
        files = sorted((tmp_path / "pfg").glob("run_*.csv"))
        assert len(files) == 3
        tr = report.read_trace(files[0])
        assert tr.est.shape[1] == 2 and np.all(tr.ess >= 1) and np.all(tr.ess <= 100)

    def test_defaults_recorded(self, office, tmp_path):
        run(*self._base(office, tmp_path, "--mode", "pfl"))
        saved = json.loads((tmp_path / "run_config.json").read_text())
        assert saved["n_p"] == 100 and saved["n_thr"] == 20

    def test_same_seed_same_trace(self, office, tmp_path):
        for sub in ("a", "b"):
            run(*self._base(office, tmp_path / sub, "--mode", "pfl", "--seed", 11))
        assert digest(tmp_path / "a/pfl/run_000.csv") == digest(tmp_path / "b/pfl/run_000.csv")

    def test_classifier_mode_needs_grid(self, office, tmp_path):
        assert run(*self._base(office, tmp_path, "--mode", "pfg-c")) == 2

    def test_config_file_with_flag_override(self, office, grid_file, tmp_path):
        d = office / "data"
        cfg = {"log": str(d / "rssi.csv"), "beacons": str(d / "beacons.json"),
               "pathloss": str(office / "pl.json"), "grid": str(grid_file),
               "groundtruth": str(d / "groundtruth.csv"), "modes": ["pfg-c"], "n_p": 500,
               "receiver_height": 0.3}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert run("localize", "--config", tmp_path / "cfg.json", "--particles", 50,
                   "--out", tmp_path / "o") == 0
        saved = json.loads((tmp_path / "o/run_config.json").read_text())
        assert saved["n_p"] == 50 and saved["modes"] == ["pfg-c"]

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text('{"particles": 10}')
        assert run("localize", "--config", tmp_path / "cfg.json", "--out", tmp_path) == 2

    def test_bad_mode_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("localize", "--mode", "kalman", "--out", tmp_path)
        assert exc.value.code == 2


class TestEvaluate:
    @pytest.fixture(scope="class")
    @staticmethod
    def traces(office, grid_file, tmp_path_factory):
        out = tmp_path_factory.mktemp("traces")
        d = office / "data"
        run("localize", "--log", d / "rssi.csv", "--beacons", d / "beacons.json", "--pathloss",
            office / "pl.json", "--grid", grid_file, "--groundtruth", d / "groundtruth.csv",
            "--receiver-height", 0.3, "--mode", "pfg", "--mode", "pfg-c", "--repeat", 2,
            "--out", out)
        return out

    def test_report_and_figures(self, office, traces, tmp_path, capsys):
        d = office / "data"
        assert run("evaluate", "--traces", traces, "--labels", d / "labels.csv",
                   "--model", office / "model.json", "--out", tmp_path) == 0
        metrics = report.read_metrics(tmp_path / "metrics.csv")
        assert set(metrics) == {"pfg", "pfg-c"}
        for m in metrics.values():
            assert m["n_runs"] == 2 and m["crlb_rms"] > 0 and m["eta_mean"] > 0
        assert metrics["pfg-c"]["rmse_mean"] < metrics["pfg"]["rmse_mean"]
        cdf = report.read_table(tmp_path / "cdf.csv")
        assert np.all(np.diff(cdf["pfg"]) >= 0) and cdf["pfg-c"][-1] == 1.0
        auc = report.read_table(tmp_path / "classifier.csv")
        assert auc["auc_trapezoid"][0] == pytest.approx(auc["auc_mann_whitney"][0], abs=1e-12)
        for stem in ("cdf", "rmse_box", "trajectory", "roc"):
            assert (tmp_path / f"{stem}.png").stat().st_size > 0
            assert (tmp_path / f"{stem}.svg").read_text().lstrip().startswith("<?xml")

    def test_perfect_traces_flag_efficiency(self, office, tmp_path, capsys):
        gt = load_groundtruth(office / "data/groundtruth.csv")
        t = np.array([p.t for p in gt])
        xy = np.array([p.position[:2] for p in gt])
        from blenlos.filter import Trace
        (tmp_path / "tr/pfg").mkdir(parents=True)
        report.write_trace(Trace(t, xy, np.full(len(t), 100.0), np.zeros(len(t), bool)),
                           tmp_path / "tr/pfg/run_000.csv")
        d = office / "data"
        assert run("evaluate", "--traces", tmp_path / "tr", "--groundtruth", d / "groundtruth.csv",
                   "--beacons", d / "beacons.json", "--log", d / "rssi.csv",
                   "--pathloss", office / "pl.json", "--no-figures", "--out", tmp_path / "r") == 0
        assert "efficiency undefined" in capsys.readouterr().out
        m = report.read_metrics(tmp_path / "r/metrics.csv")["pfg"]
        assert m["rmse_mean"] == 0.0 and np.isnan(m["eta_mean"])

    def test_empty_trace_set(self, office, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("evaluate", "--traces", tmp_path / "empty", "--groundtruth",
                   office / "data/groundtruth.csv", "--out", tmp_path / "r") == 3
