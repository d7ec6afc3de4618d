import numpy as np
import pytest

from binnet.data import (
    DERMATOLOGY_ENV,
    SHHS_TASKS,
    DataError,
    Dataset,
    TaskSuite,
    gen_gaussian_chain,
    gen_shhs_surrogate,
    gen_toy_line,
    load_dermatology,
    make_splits,
    metrics,
)
from binnet.inference import InferenceOptions, infer_batch
from binnet.model import BinModel
from binnet.training import TrainConfig, bin_train


def write_derm(path, rows=366, missing_age=(3, 10), seed=0):
    """Synthetic file in the UCI layout: 33 ordinal attributes, age, class."""
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(rows):
        attrs = [str(int(a)) for a in rng.integers(0, 4, 33)]
        attrs[10] = str(int(rng.integers(0, 2)))
        age = "?" if i in missing_age else str(int(rng.integers(5, 75)))
        lines.append(",".join(attrs + [age, str(int(rng.integers(1, 7)))]))
    path.write_text("\n".join(lines) + "\n")
    return path


class TestSplits:
    def test_disjoint_and_exhaustive(self):
        s = make_splits(101, seed=3)
        allidx = np.concatenate([s["train"], s["val"], s["test"]])
        assert sorted(allidx.tolist()) == list(range(101))
        assert len(s["train"]) == 71 and len(s["val"]) == 10

    def test_depends_only_on_seed(self):
        a, b, c = make_splits(50, 1), make_splits(50, 1), make_splits(50, 2)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["train"], c["train"])

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            make_splits(10, 0, (0.5, 0.5, 0.5))


class TestStandardization:
    def test_train_columns_standardized(self):
        ds, _ = gen_gaussian_chain(3, 500, seed=0)
        X, V = ds.split("train")
        for a in (X, V):
            assert np.all(np.abs(a.mean(0)) < 1e-9)
            assert np.all(np.abs(a.std(0) - 1) < 1e-9)

    def test_round_trip(self, rng):
        ds, _ = gen_gaussian_chain(3, 200, seed=1)
        V = rng.normal(size=(7, 3)) * 5
        np.testing.assert_allclose(ds.raw_v(ds.std_v(V)), V, rtol=0, atol=1e-12)

    def test_rejects_nonfinite(self):
        splits = {"train": np.arange(2), "val": np.arange(0), "test": np.arange(0)}
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1)), np.array([[1.0], [np.nan]]), ["a"], splits)


class TestToyLine:
    def test_deterministic(self):
        a, b = gen_toy_line(6, seed=4), gen_toy_line(6, seed=4)
        assert a.V.shape == (6, 2) and a.X.shape == (6, 0)
        np.testing.assert_array_equal(a.V, b.V)

    def test_noiseless(self):
        ds = gen_toy_line(20, seed=0, noise=0.0)
        np.testing.assert_allclose(ds.V[:, 1], 3 * ds.V[:, 0] + 1, rtol=1e-15)

    def test_ols_recovers_line(self):
        ds = gen_toy_line(10_000, seed=5)
        A = np.column_stack([ds.V[:, 0], np.ones(10_000)])
        coef, res, *_ = np.linalg.lstsq(A, ds.V[:, 1], rcond=None)
        sigma2 = res[0] / (10_000 - 2)
        se = np.sqrt(np.diag(sigma2 * np.linalg.inv(A.T @ A)))
        assert np.all(np.abs(coef - [3.0, 1.0]) < 3 * se)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            gen_toy_line(1)


class TestGaussianChain:
    def test_noiseless_is_deterministic_in_x(self):
        ds, truth = gen_gaussian_chain(3, 50, seed=2, sigma=[0, 0, 0])
        np.testing.assert_allclose(ds.V, truth.mean(ds.X), atol=1e-12)

    def test_two_variable_conditioning(self):
        ds, t = gen_gaussian_chain(2, 10, seed=3)
        X, V = ds.X[:4], ds.V[:4]
        # Bayes rule for v1 | x, v2 with v2 = b v1 + a2.x + c2 + noise
        mu1 = X @ t.A[0] + t.c[0]
        b = t.B[1, 0]
        resid = V[:, 1] - X @ t.A[1] - t.c[1]
        prec = 1 / t.sigma[0] ** 2 + b * b / t.sigma[1] ** 2
        mode = (mu1 / t.sigma[0] ** 2 + b * resid / t.sigma[1] ** 2) / prec
        np.testing.assert_allclose(t.conditional_mean(X, V, [0])[:, 0], mode, rtol=1e-10)

    def test_sample_covariance(self):
        ds, t = gen_gaussian_chain(3, 200_000, seed=4)
        resid = ds.V - t.mean(ds.X)
        C = np.cov(resid.T)
        exact = t.cov()
        # standard error of a covariance entry: sqrt((S_ii S_jj + S_ij^2) / m)
        se = np.sqrt((np.outer(np.diag(exact), np.diag(exact)) + exact**2) / len(resid))
        assert np.all(np.abs(C - exact) < 3.5 * se)

    def test_needs_two_variables(self):
        with pytest.raises(ValueError):
            gen_gaussian_chain(1, 10)


class TestShhsSurrogate:
    def test_shape_and_tasks(self):
        ds = gen_shhs_surrogate(300, seed=0)
        assert ds.X.shape == (300, 16) and ds.V.shape == (300, 8)
        assert set(np.unique(ds.V)) <= {0.0, 1.0}
        suite = TaskSuite(SHHS_TASKS, "accuracy", n_vars=8)
        assert suite.labels()[0] == "{v1,v3}" and len(suite.tasks) == 7

    def test_threshold_is_train_mean(self):
        ds = gen_shhs_surrogate(400, seed=1)
        Z = ds.extra["latent"]
        thr = Z[ds.splits["train"]].mean(0)
        np.testing.assert_array_equal(ds.extra["thresholds"], thr)
        np.testing.assert_array_equal(ds.V, (Z >= thr).astype(float))
        train = ds.V[ds.splits["train"]]
        assert np.all(train.min(0) == 0) and np.all(train.max(0) == 1)

    def test_seeded(self):
        np.testing.assert_array_equal(gen_shhs_surrogate(150, 3).V, gen_shhs_surrogate(150, 3).V)

    def test_independent_scores_give_base_rate(self):
        ds = gen_shhs_surrogate(3000, seed=2, independent=True)
        X, V = ds.split("train", standardized=False)
        model = BinModel.build(ds.variables(), 16, hidden=(8,), seed=0)
        bin_train(model, X, V, TrainConfig(T_w=10, T_t=0, rho=1e-2, batch_size=64))
        Xt, Vt = ds.split("test", standardized=False)
        for task, mode in [((0, 2), "auto"), ((3, 4), "general"), ((5, 6, 7), "forward")]:
            res = infer_batch(model, Xt, Vt, task, mode, InferenceOptions(max_iters=50))
            acc = metrics("accuracy", res.V[:, list(task)], Vt[:, list(task)])
            # constant guess of each variable's training-majority class
            major = V[:, list(task)].mean(0) >= 0.5
            base = 100 * np.mean(Vt[:, list(task)] == major)
            assert abs(acc - base) < 5.0

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            gen_shhs_surrogate(50)


class TestDermatology:
    def test_synthetic_file(self, tmp_path):
        ds = load_dermatology(write_derm(tmp_path / "d.data"))
        assert ds.V.shape == (366, 3) and ds.X.shape == (366, 12)
        assert ds.extra["n_imputed"] == 2
        assert set(np.round(np.unique(ds.V) * 3, 12)) <= {0.0, 1.0, 2.0, 3.0}
        assert np.all(np.isfinite(ds.X))
        # imputed rows carry the training mean of the observed ages
        raw = [l.split(",")[33] for l in (tmp_path / "d.data").read_text().splitlines()]
        observed = [float(a) for i, a in enumerate(raw) if a != "?" and i in set(ds.splits["train"])]
        assert ds.X[3, 11] == pytest.approx(np.mean(observed))

    def test_bundled_file(self, monkeypatch):
        monkeypatch.delenv(DERMATOLOGY_ENV, raising=False)
        ds = load_dermatology()
        assert ds.n_vars == 3 and len(ds.V) == 358
        assert set(np.round(np.unique(ds.V) * 3, 12)) <= {0.0, 1.0, 2.0, 3.0}

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(DERMATOLOGY_ENV, str(write_derm(tmp_path / "e.data", rows=120)))
        assert len(load_dermatology().V) == 120

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.data"
        p.write_text("1,2,3\n")
        with pytest.raises(DataError, match="35 fields"):
            load_dermatology(p)
        p.write_text(",".join(["1"] * 20 + ["x"] + ["1"] * 14) + "\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_dermatology(p)
        with pytest.raises(DataError, match="no such file"):
            load_dermatology(tmp_path / "missing.data")


class TestMetrics:
    def test_perfect(self):
        t = np.array([[0.0, 1.0], [1.0, 1.0]])
        assert metrics("rmse", t, t) == 0.0
        assert metrics("accuracy", t, t) == 100.0

    def test_hand_fixture(self):
        pred = np.array([0.5, 1.0, -1.0, 2.0])
        truth = np.array([0.0, 1.5, -1.0, 1.0])
        # squared errors 0.25, 0.25, 0, 1 -> mean 0.375
        assert metrics("rmse", pred, truth) == pytest.approx(np.sqrt(0.375), abs=1e-12)

    def test_tie_goes_to_one(self):
        truth = np.array([0.0, 1.0, 0.0, 1.0])
        assert metrics("accuracy", np.full(4, 0.5), truth) == 50.0
        assert metrics("accuracy", np.full(2, 0.5), np.ones(2)) == 100.0

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics("rmse", np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            metrics("rmse", np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            metrics("mae", np.zeros(1), np.zeros(1))

    def test_suite_validation(self):
        with pytest.raises(ValueError):
            TaskSuite(((),))
        with pytest.raises(ValueError):
            TaskSuite(((0, 5),), n_vars=3)
