import filecmp
from pathlib import Path

import numpy as np
import pytest

from dyncs import harness
from dyncs.harness import (
    ExperimentSpec,
    TraceDataset,
    compute_metrics,
    estimate_noise_variance,
    match_events,
    time_averaged_error,
)
from dyncs.solver import SolverConfig
from dyncs.spikes import SpikeTrain

FAST = SolverConfig(outer_iters=2, inner_iters=1)


def small_spec(tmp_path, **kw):
    base = dict(seeds=(0,), snr_db=(10.0,), compression=(0.0, 0.5), p=20, T=15,
                s_first=3, s_rest=2, solver=FAST, out_dir=str(tmp_path / "runs"))
    base.update(kw)
    return ExperimentSpec(**base)


class TestNoiseVariance:
    def test_constant_traces(self):
        d = TraceDataset(np.full((50, 3), 2.0), inactive=(0, 50))
        assert estimate_noise_variance(d) == 0.0

    def test_small_noise(self):
        rng = np.random.default_rng(0)
        d = TraceDataset(np.sqrt(1e-5) * rng.standard_normal((1000, 5)))
        assert estimate_noise_variance(d, (0, 1000)) == pytest.approx(1e-5, rel=0.2)

    def test_median_over_coordinates(self):
        x = np.random.default_rng(1).standard_normal((40, 3)) * [1.0, 2.0, 100.0]
        d = TraceDataset(x)
        v = x.var(axis=0, ddof=1)
        assert estimate_noise_variance(d, (0, 40)) == pytest.approx(np.median(v))

    @pytest.mark.parametrize("rng_", [(0, 10), (5, 3), (0, 500), None])
    def test_bad_ranges(self, rng_):
        with pytest.raises(ValueError):
            estimate_noise_variance(TraceDataset(np.zeros((100, 2))), rng_)

    def test_dataset_validation(self):
        for bad in (np.zeros(5), np.zeros((1, 3)), np.array([[np.nan, 0.0], [0.0, 0.0]])):
            with pytest.raises(ValueError):
                TraceDataset(bad)


class TestMetrics:
    def test_exact_truth(self):
        x = np.random.default_rng(0).standard_normal((6, 4))
        w = np.zeros((6, 4))
        w[2, 1] = 1.0
        m = compute_metrics(x, x, w, w != 0)
        assert m["l2_error"] == 0 and m["relative_mse"] == 0 and m["f1"] == 1.0

    def test_zero_estimate(self):
        x = np.array([[3.0, 4.0], [0.0, 0.0]])
        m = compute_metrics(x, np.zeros_like(x))
        assert m["l2_error"] == pytest.approx(2.5) and m["relative_mse"] == 1.0
        assert np.isnan(m["f1"])

    def test_independent_error(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
        ref = sum(np.sqrt(sum((a[t, j] - b[t, j]) ** 2 for j in range(3))) for t in range(7)) / 7
        assert time_averaged_error(a, b) == pytest.approx(ref)
        assert time_averaged_error(b, a) == time_averaged_error(a, b)

    def test_matching_tolerance_is_one_to_one(self):
        truth = np.zeros((10, 1), dtype=bool)
        truth[[3, 4]] = True
        det = np.zeros_like(truth)
        det[[2, 5, 9]] = True
        assert match_events(truth, det) == (2, 2, 3)
        det = np.zeros_like(truth)
        det[4] = True
        assert match_events(truth, det, tolerance=0) == (1, 2, 1)

    def test_detection_scores(self):
        truth = np.zeros((10, 2))
        truth[[1, 6], 0] = 1.0
        truth[3, 1] = 1.0
        sp = SpikeTrain(coords=np.array([0, 1]), times=np.array([1, 8]),
                        amplitudes=np.ones(2))
        m = compute_metrics(np.zeros((10, 2)), np.zeros((10, 2)), truth, sp, bound=1.0)
        assert m["precision"] == 0.5 and m["recall"] == pytest.approx(1 / 3)
        assert m["f1"] == pytest.approx(0.4)
        assert m["bound_holds"] is True

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            time_averaged_error(np.zeros((2, 2)), np.zeros((2, 3)))


class TestFiles:
    def test_trace_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((5, 3)) * 1e-7
        harness.write_trace_csv(tmp_path / "t.csv", x)
        np.testing.assert_array_equal(harness.read_trace_csv(tmp_path / "t.csv"), x)

    @pytest.mark.parametrize("body,needle", [
        ("coord_0,coord_1\n1,2\n3\n", ":3:"),
        ("coord_0,coord_1\n1,2\n3,x\n", ":3:"),
        ("a,b\n1,2\n", ":1:"),
        ("", "empty"),
        ("coord_0\n", "no samples"),
    ])
    def test_trace_errors(self, tmp_path, body, needle):
        f = tmp_path / "bad.csv"
        f.write_text(body)
        with pytest.raises(ValueError, match=needle):
            harness.read_trace_csv(f)

    def test_raster_roundtrip(self, tmp_path):
        sp = SpikeTrain(np.array([0, 2]), np.array([5, 1]), np.array([0.1, 2.5]))
        harness.write_raster_csv(tmp_path / "r.csv", sp)
        back = harness.read_raster_csv(tmp_path / "r.csv")
        np.testing.assert_array_equal(back.coords, sp.coords)
        np.testing.assert_array_equal(back.times, sp.times)
        np.testing.assert_array_equal(back.amplitudes, sp.amplitudes)

    def test_observations_roundtrip(self, tmp_path):
        obs = [np.arange(3.0), np.array([0.5])]
        harness.write_observations_csv(tmp_path / "o.csv", obs)
        back = harness.read_observations_csv(tmp_path / "o.csv", [3, 1])
        for a, b in zip(obs, back):
            np.testing.assert_array_equal(a, b)
        with pytest.raises(ValueError):
            harness.read_observations_csv(tmp_path / "o.csv", [3, 2])


class TestSimulate:
    def test_default_grid(self):
        assert len(ExperimentSpec().cells()) == 4

    def test_spec_roundtrip_and_validation(self, tmp_path):
        spec = small_spec(tmp_path)
        assert ExperimentSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError):
            ExperimentSpec.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            ExperimentSpec(compression=(1.0,))
        with pytest.raises(ValueError):
            ExperimentSpec(seeds=(1, 1))

    def test_rerun_is_byte_identical(self, tmp_path):
        a = harness.cmd_simulate(small_spec(tmp_path / "a"))
        b = harness.cmd_simulate(small_spec(tmp_path / "b"))
        for da, db in zip(a, b):
            names = sorted(p.name for p in Path(da).iterdir())
            match, mismatch, errors = filecmp.cmpfiles(da, db, names, shallow=False)
            assert not mismatch and not errors

    def test_load_cell_matches_simulation(self, tmp_path):
        spec = small_spec(tmp_path)
        d = harness.cmd_simulate(spec)[1]
        cell = harness.load_cell(d)
        ref = harness.simulate_cell(spec, 0, 10.0, 0.5)
        np.testing.assert_array_equal(cell.trajectory.states, ref.trajectory.states)
        np.testing.assert_array_equal(cell.ensemble.base, ref.ensemble.base)
        for a, b in zip(cell.observations, ref.observations):
            np.testing.assert_array_equal(a, b)

    def test_full_reference_shares_ground_truth(self, tmp_path):
        spec = small_spec(tmp_path, snr_reference="full")
        a = harness.simulate_cell(spec, 0, 10.0, 0.0)
        b = harness.simulate_cell(spec, 0, 10.0, 0.5)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)

    def test_sweep_rows_deterministic(self, tmp_path, monkeypatch):
        spec = small_spec(tmp_path)
        r1 = harness.run_sweep(spec, workers=1)
        monkeypatch.setenv(harness.WORKERS_ENV, "2")
        r2 = harness.run_sweep(spec)
        assert len(r1) == 4
        harness.write_metrics_csv(tmp_path / "m1.csv", r1)
        harness.write_metrics_csv(tmp_path / "m2.csv", r2)
        assert filecmp.cmp(tmp_path / "m1.csv", tmp_path / "m2.csv", shallow=False)


class TestTraces:
    def test_identity_zero_traces(self):
        out = harness.deconvolve_traces(TraceDataset(np.zeros((20, 3))), FAST, sigma2=0.01)
        assert np.abs(out.result.states).max() < 1e-12 and len(out.spikes) == 0

    def test_compressed_mode_runs(self, tmp_path):
        rng = np.random.default_rng(0)
        x = 0.1 * rng.standard_normal((30, 10))
        x[10:, 2] += 0.9 ** np.arange(20) * 3
        out = harness.deconvolve_traces(TraceDataset(x), FAST, sigma2=0.01,
                                        observed_fraction=0.6)
        assert out.result.states.shape == (30, 10)
        harness.write_deconvolution(tmp_path / "o", out)
        for name in ("states.csv", "lower.csv", "upper.csv", "innovations.csv",
                     "spikes.csv", "objective.csv", "summary.json"):
            assert (tmp_path / "o" / name).exists()

    def test_argument_checks(self):
        d = TraceDataset(np.zeros((5, 2)))
        with pytest.raises(ValueError):
            harness.deconvolve_traces(d, FAST, sigma2=1.0, observed_fraction=0.0)
        with pytest.raises(ValueError):
            harness.deconvolve_traces(d, FAST, sigma2=1.0, sparsity=3)


class TestWorkers:
    def test_env(self, monkeypatch):
        monkeypatch.delenv(harness.WORKERS_ENV, raising=False)
        assert harness.worker_count() == 1
        monkeypatch.setenv(harness.WORKERS_ENV, "3")
        assert harness.worker_count() == 3
        for bad in ("0", "x"):
            monkeypatch.setenv(harness.WORKERS_ENV, bad)
            with pytest.raises(ValueError):
                harness.worker_count()


class TestBoundAndCV:
    def test_bound_trial_small(self):
        r = harness.bound_trial(10, 3, 1, [600, 600, 600], 0.9, 1e-4, seed=0)
        assert r["bound_holds"] and r["l2_error"] < r["bound"]

    def test_holdout_keeps_nesting(self):
        from dyncs.sensing import build_ensemble
        ens = build_ensemble(6, [10, 6, 4], seed=0)
        obs = [np.arange(n, dtype=float) for n in ens.row_counts]
        train, y, val = harness._holdout_split(ens, obs, range(2, 5))
        assert list(train.row_counts) == [7, 3, 2]
        np.testing.assert_array_equal(train.A(1), ens.base[[0, 1, 5]])
        np.testing.assert_array_equal(y[1], [0.0, 1.0, 5.0])
        np.testing.assert_array_equal(y[2], [0.0, 1.0])
        np.testing.assert_array_equal(val[2][1], [2.0, 3.0])

    def test_cross_validation_smoke(self):
        spec = ExperimentSpec(p=15, T=10, s_first=2, s_rest=1, snr_db=(10.0,),
                              compression=(0.0,))
        cell = harness.simulate_cell(spec, 0, 10.0, 0.0)
        best, errs = harness.cross_validate_lambda(
            cell.observations, cell.ensemble, cell.schedule, cell.sigma2,
            [0.5, 2.0], FAST, folds=3, workers=1)
        assert best in (0.5, 2.0) and errs.shape == (2, 3) and np.all(errs > 0)
