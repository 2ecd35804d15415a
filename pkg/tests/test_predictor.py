import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmpc.errors import ConfigurationError, PredictionError
from cpmpc.predictor import (LINEAR, OneStepModel, build_prediction_table, build_prediction_tables,
                             constant_velocity, fit_linear_one_step, load_model, pair_mask,
                             predict_from, ridge_objective, save_model)
from cpmpc.trajectory import Trajectory


def affine(N, p, A=None, b=0.0):
    n = N * p
    A = np.eye(n) if A is None else A
    return OneStepModel(LINEAR, N, p, A, np.full(n, b))


@pytest.fixture
def noisy_train():
    rng = np.random.default_rng(0)
    arr = np.cumsum(rng.normal(size=(30, 11, 2, 2)) * 0.1, axis=1)
    return arr + np.array([[1.0, -2.0], [0.5, 3.0]])


class TestFit:
    def test_recovers_known_affine_map(self):
        rng = np.random.default_rng(1)
        start = rng.normal(size=(20, 1, 3, 2))
        arr = start + 0.1 * np.arange(9)[None, :, None, None]
        model = fit_linear_one_step(arr, ridge=0.0)
        # the data spans x_t + 0.1 only in a degenerate way, so check the map, not A
        resid = model.step(arr[:, :-1]) - arr[:, 1:]
        assert np.abs(resid).max() < 1e-9

    def test_recovers_identity_with_offset_on_rich_data(self):
        rng = np.random.default_rng(2)
        n_traj, T, N, p = 40, 6, 2, 2
        arr = np.empty((n_traj, T + 1, N, p))
        arr[:, 0] = rng.normal(size=(n_traj, N, p))
        for t in range(T):
            arr[:, t + 1] = arr[:, t] + 0.1
        # every step has the same form, but distinct starts span the full space
        model = fit_linear_one_step(arr, ridge=0.0)
        np.testing.assert_allclose(model.A, np.eye(N * p), atol=1e-9)
        np.testing.assert_allclose(model.b, 0.1, atol=1e-9)

    def test_constant_trajectory_is_fixed_point(self):
        y_star = np.array([[0.3, -1.2], [2.0, 0.7]])
        arr = np.broadcast_to(y_star, (1, 8, 2, 2))
        model = fit_linear_one_step(arr, ridge=1e-6)
        np.testing.assert_allclose(model.step(y_star), y_star, atol=1e-6)

    def test_ridge_shrinks_A(self, noisy_train):
        small = fit_linear_one_step(noisy_train, ridge=1e-6)
        big = fit_linear_one_step(noisy_train, ridge=1e3)
        assert np.linalg.norm(big.A) < np.linalg.norm(small.A)

    def test_fit_is_a_local_minimum(self, noisy_train):
        ridge = 0.5
        m = fit_linear_one_step(noisy_train, ridge)
        f0 = ridge_objective(noisy_train, m.A, m.b, ridge)
        rng = np.random.default_rng(3)
        for _ in range(20):
            dA = rng.normal(size=m.A.shape) * 1e-4
            db = rng.normal(size=m.b.shape) * 1e-4
            assert ridge_objective(noisy_train, m.A + dA, m.b + db, ridge) >= f0 - 1e-12

    def test_singular_without_ridge(self):
        arr = np.zeros((2, 4, 1, 2))
        with pytest.raises(PredictionError):
            fit_linear_one_step(arr, ridge=0.0)

    def test_negative_ridge(self, noisy_train):
        with pytest.raises(ConfigurationError):
            fit_linear_one_step(noisy_train, ridge=-1.0)

    def test_save_load(self, tmp_path, noisy_train):
        m = fit_linear_one_step(noisy_train)
        back = load_model(save_model(m, tmp_path / "m.json"))
        np.testing.assert_array_equal(back.A, m.A)
        np.testing.assert_array_equal(back.b, m.b)


class TestPredictFrom:
    def test_identity_rollout(self):
        y = np.random.default_rng(0).normal(size=(3, 2))
        out = predict_from(affine(3, 2), y, t=5, T=10)
        assert out.shape == (5, 3, 2)
        np.testing.assert_array_equal(out, np.broadcast_to(y, out.shape))

    def test_affine_composition(self):
        out = predict_from(affine(2, 2, b=0.1), np.zeros((2, 2)), t=0, T=3)
        np.testing.assert_allclose(out[2], 0.3)

    def test_constant_velocity(self):
        prev = np.zeros((2, 2))
        cur = np.array([[1.0, 0.0], [1.0, 0.0]])
        out = predict_from(constant_velocity(2), cur, t=4, T=8, previous=prev)
        for k in range(4):
            np.testing.assert_allclose(out[k], cur + (k + 1) * np.array([1.0, 0.0]))

    def test_divergence_names_tau(self):
        model = affine(1, 2, A=np.eye(2) * 1e200)
        with pytest.raises(PredictionError) as exc:
            predict_from(model, np.ones((1, 2)), t=0, T=5)
        assert exc.value.tau == 2


class TestTables:
    def test_pair_count(self):
        mask = pair_mask(2)
        assert [tuple(ix) for ix in np.argwhere(mask)] == [(0, 1), (0, 2), (1, 2)]

    def test_identity_on_constant_has_zero_error(self):
        traj = Trajectory(np.ones((6, 2, 2)) * 3.0)
        table = build_prediction_table(affine(2, 2), traj)
        for t, tau in table.pairs():
            np.testing.assert_array_equal(table[t, tau], traj.joint(tau))

    def test_matches_predict_from(self, noisy_train):
        m = fit_linear_one_step(noisy_train)
        tables = build_prediction_tables(m, noisy_train[:3])
        T = noisy_train.shape[1] - 1
        for k in range(3):
            for t in range(T):
                np.testing.assert_allclose(tables[k, t, t + 1:],
                                           predict_from(m, noisy_train[k, t], t, T), rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(t=st.integers(0, 7), seed=st.integers(0, 2**16))
    def test_causal(self, t, seed):
        rng = np.random.default_rng(seed)
        states = rng.normal(size=(9, 2, 2))
        model = affine(2, 2, A=np.eye(4) * 0.9, b=0.05)
        for m in (model, constant_velocity(2)):
            before = build_prediction_table(m, Trajectory(states)).values[t]
            perturbed = states.copy()
            perturbed[t + 1:] += rng.normal(size=perturbed[t + 1:].shape)
            after = build_prediction_table(m, Trajectory(perturbed)).values[t]
            np.testing.assert_array_equal(before, after)
