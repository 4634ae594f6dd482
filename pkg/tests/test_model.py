import numpy as np
import pytest

from dyncs.model import (
    ModelParams,
    best_s_term,
    compressibility_report,
    data_misfit,
    dual_objective,
    innovation_sequence,
    make_innovations,
    propagate_states,
    smoothed_objective,
    theorem_bound,
)
from dyncs.sensing import MeasurementEnsemble, build_ensemble, observe


def _params(**kw):
    base = dict(theta=0.5, sigma2=0.5, lam=1.0, eps_smooth=1e-10,
                schedule=[1], row_counts=[1], p=1)
    base.update(kw)
    return ModelParams(**base)


class TestModelParams:
    def test_valid(self):
        p = _params()
        assert p.T == 1

    @pytest.mark.parametrize("kw", [
        dict(theta=1.0), dict(theta=-1.2), dict(sigma2=0.0), dict(lam=-1.0),
        dict(eps_smooth=0.0), dict(schedule=[0]), dict(schedule=[2], row_counts=[1], p=3),
        dict(schedule=[1, 1], row_counts=[1]),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _params(**kw)


class TestMakeInnovations:
    def test_default_schedule_counts(self):
        sched = np.full(200, 4)
        sched[0] = 8
        w = make_innovations(200, sched, seed=3)
        nnz = np.count_nonzero(w, axis=1)
        assert nnz[0] == 8 and np.all(nnz[1:] == 4)

    def test_zero_schedule(self):
        assert not make_innovations(10, [0, 0, 0], seed=1).any()

    def test_deterministic(self):
        a = make_innovations(6, [2, 2], seed=11)
        b = make_innovations(6, [2, 2], seed=11)
        assert a.tobytes() == b.tobytes()

    def test_compressible_decay(self):
        w = make_innovations(50, [1, 1], mode="compressible", xi=0.5, seed=0)
        mags = np.sort(np.abs(w[0]))[::-1]
        k = np.arange(1, 51)
        ref = k ** -2.0
        np.testing.assert_allclose(mags, ref / np.linalg.norm(ref), rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0)

    @pytest.mark.parametrize("xi", [None, 0.0, 1.0, 1.5])
    def test_bad_xi(self, xi):
        with pytest.raises(ValueError):
            make_innovations(5, [1], mode="compressible", xi=xi)

    def test_s_above_p(self):
        with pytest.raises(ValueError):
            make_innovations(3, [4])


class TestPropagate:
    def test_theta_zero(self):
        w = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(propagate_states(0.0, w).states, w)

    def test_geometric_decay(self):
        w = np.zeros((10, 2))
        w[0, 0] = 1.0
        x = propagate_states(0.95, w).states
        np.testing.assert_allclose(x[:, 0], 0.95 ** np.arange(10), rtol=1e-14)
        assert not x[:, 1].any()

    def test_recursion_residual_is_zero(self):
        sched = np.full(200, 4)
        sched[0] = 8
        traj = propagate_states(0.95, make_innovations(200, sched, seed=5))
        x, w = traj.states, traj.innovations
        prev = np.vstack([np.zeros(200), x[:-1]])
        assert np.max(np.abs(x - 0.95 * prev - w)) == 0.0
        assert not traj.x0.any()

    def test_bad_theta(self):
        with pytest.raises(ValueError):
            propagate_states(1.0, np.zeros((2, 2)))


class TestBestSTerm:
    def test_basic(self):
        support, approx, sigma = best_s_term(np.array([3, -1, 0.5, 0]), 1)
        assert support.tolist() == [0]
        assert sigma == 1.5
        np.testing.assert_array_equal(approx, [3, 0, 0, 0])

    def test_exact_sparse(self):
        assert best_s_term(np.array([0, 1.0, -2.0, 0, 5.0]), 3)[2] == 0.0

    def test_tie_goes_to_lower_index(self):
        support, _, sigma = best_s_term(np.array([2.0, -2.0, 1.0]), 1)
        assert support.tolist() == [0]
        assert sigma == 3.0

    @pytest.mark.parametrize("s", [-1, 4])
    def test_range(self, s):
        with pytest.raises(ValueError):
            best_s_term(np.ones(3), s)

    def test_report(self):
        traj = propagate_states(0.9, make_innovations(8, [2, 2, 2], seed=0))
        rep = compressibility_report(traj.states, 0.9, [2, 2, 2])
        np.testing.assert_allclose(rep.errors, 0.0, atol=1e-12)
        assert all(len(s) == 2 for s in rep.supports)


def _scalar_ensemble():
    return MeasurementEnsemble(base=np.ones((1, 1)), row_counts=np.array([1]))


class TestObjectives:
    def test_zero(self):
        ens = build_ensemble(4, [3, 2], seed=0)
        params = _params(schedule=[1, 1], row_counts=[3, 2], p=4)
        obs = [np.zeros(3), np.zeros(2)]
        assert dual_objective(np.zeros((2, 4)), 0.5, ens, obs, params) == 0.0

    def test_scalar_example(self):
        params = _params(theta=0.3, lam=1.0, sigma2=0.5)
        val = dual_objective(np.array([[2.0]]), 0.3, _scalar_ensemble(), [np.array([1.0])], params)
        assert val == pytest.approx(3.0, rel=1e-15)

    def test_independent_evaluator(self):
        rng = np.random.default_rng(7)
        p, T, theta, lam, s2 = 6, 4, 0.8, 0.7, 0.3
        rows = [5, 3, 3, 4]
        ens = build_ensemble(p, rows, seed=2)
        sched = [2, 1, 1, 2]
        x = rng.standard_normal((T, p))
        obs = [rng.standard_normal(n) for n in rows]
        params = _params(theta=theta, lam=lam, sigma2=s2, schedule=sched, row_counts=rows, p=p)
        ref = 0.0
        prev = np.zeros(p)
        for t in range(T):
            ref += lam * np.sum(np.abs(x[t] - theta * prev)) / np.sqrt(sched[t])
            ref += np.sum((obs[t] - ens.base[: rows[t]] @ x[t]) ** 2) / (2 * s2 * rows[t])
            prev = x[t]
        assert dual_objective(x, theta, ens, obs, params) == pytest.approx(ref, rel=1e-13)

    def test_smoothed_exceeds_dual_by_at_most_eps_terms(self):
        rng = np.random.default_rng(1)
        ens = build_ensemble(5, [4, 4], seed=1)
        params = _params(schedule=[1, 4], row_counts=[4, 4], p=5, eps_smooth=1e-3)
        x = rng.standard_normal((2, 5))
        obs = observe(ens, x, 0.1, seed=0)
        d = dual_objective(x, 0.5, ens, obs, params)
        s = smoothed_objective(x, 0.5, ens, obs, params)
        assert d <= s <= d + params.lam * 1e-3 * 5 * (1 + 0.5)

    def test_per_time_sigma2(self):
        ens = build_ensemble(3, [3, 3], seed=0)
        x = np.ones((2, 3))
        obs = [np.zeros(3), np.zeros(3)]
        terms = data_misfit(x, ens, obs, np.array([1.0, 2.0]))
        assert terms[0] == pytest.approx(2 * terms[1])

    def test_dimension_mismatch(self):
        ens = build_ensemble(3, [3, 3], seed=0)
        params = _params(schedule=[1, 1], row_counts=[3, 3], p=3)
        with pytest.raises(ValueError):
            dual_objective(np.zeros((3, 3)), 0.5, ens, [np.zeros(3)] * 2, params)
        with pytest.raises(ValueError):
            dual_objective(np.zeros((2, 3)), 0.5, ens, [np.zeros(3), np.zeros(2)], params)

    def test_innovation_sequence(self):
        x = np.array([[1.0], [2.0], [0.5]])
        np.testing.assert_allclose(innovation_sequence(x, 0.5)[:, 0], [1.0, 1.5, -0.5])


class TestTheoremBound:
    def test_exact_sparse_drops_tail(self):
        b = theorem_bound(0.5, 10, 8, 8, 0.0, np.zeros(10), np.full(10, 2))
        assert b == 0.0

    def test_theta_zero_equal_rows(self):
        assert theorem_bound(0.0, 7, 9, 9, 0.3, np.zeros(7), np.ones(7)) == pytest.approx(12.6 * 0.3)

    def test_full_size_value(self):
        b = theorem_bound(0.95, 200, 50, 50, 0.1, np.zeros(200), np.full(200, 4))
        assert b == pytest.approx(1.26 * (1 - 0.95**200) / 0.05, rel=1e-13)

    def test_row_correction_and_tail(self):
        theta, T, n1, n2, eps = 0.6, 4, 16, 4, 0.2
        sig = np.array([0.1, 0.0, 0.3, 0.2])
        s = np.array([4, 1, 1, 4])
        gain = (1 - theta**T) / (1 - theta)
        ref = gain * (12.6 * (1 + (4 - 2) / (T * 2)) * eps + 3 / T * np.sum(sig / np.sqrt(s)))
        assert theorem_bound(theta, T, n1, n2, eps, sig, s) == pytest.approx(ref, rel=1e-14)

    @pytest.mark.parametrize("args", [
        (1.0, 5, 4, 4, 0.1), (0.5, 5, 3, 4, 0.1), (0.5, 5, 4, 0, 0.1), (0.5, 5, 4, 4, -1.0),
    ])
    def test_preconditions(self, args):
        with pytest.raises(ValueError):
            theorem_bound(*args, np.zeros(5), np.ones(5))
