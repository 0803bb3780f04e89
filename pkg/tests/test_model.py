"""Model tests: losses, exact derivatives vs finite differences, datasets.

The derivative oracles are central finite differences of loss/grad; the
MLP forward oracle is a duplicate implementation written from the math,
not from the module code.
"""
import numpy as np
import pytest
import scipy.optimize

from iflab import model
from iflab.errors import BadConfig, DimTooLarge, NonFiniteError
from iflab.model import Batch, Dataset, ModelSpec


def make_batch(rng, n, d, k):
    return Batch(rng.standard_normal((n, d)), rng.integers(0, k, n))


def fixtures():
    rng = np.random.default_rng(100)
    specs = [
        ModelSpec("logistic", (3, 3), l2_reg=0.01),
        ModelSpec("mlp", (2, 4, 2), activation="tanh", l2_reg=1e-3),
        ModelSpec("mlp", (2, 4, 3), activation="relu", l2_reg=0.0),
    ]
    out = []
    for spec in specs:
        d = spec.layer_dims[0]
        k = spec.layer_dims[-1]
        out.append((spec, make_batch(rng, 12, d, k)))
    a_half = rng.standard_normal((5, 5))
    quad = ModelSpec("quadratic", quad_a=a_half @ a_half.T + np.eye(5), quad_b=rng.standard_normal(5))
    out.append((quad, make_batch(rng, 4, 5, 2)))
    return out


def fd_grad(f, theta, h=1e-5):
    out = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def mlp_forward_oracle(theta, X, y, dims, l2):
    """Independent tanh-MLP cross-entropy, written straight from the math."""
    d, h, k = dims
    o = 0
    w1 = theta[o:o + h * d].reshape(h, d); o += h * d
    b1 = theta[o:o + h]; o += h
    w2 = theta[o:o + k * h].reshape(k, h); o += k * h
    b2 = theta[o:o + k]
    total = 0.0
    for xi, yi in zip(X, y):
        hid = np.tanh(w1 @ xi + b1)
        z = w2 @ hid + b2
        p = np.exp(z - z.max())
        p /= p.sum()
        total += -np.log(p[yi])
    return total / len(y) + 0.5 * l2 * float(theta @ theta)


class TestLoss:
    def test_quadratic_closed_form(self):
        spec = ModelSpec("quadratic", quad_a=np.eye(2), quad_b=np.zeros(2))
        batch = Batch(np.zeros((1, 2)), np.zeros(1, dtype=int))
        assert model.loss(spec, np.array([3.0, 4.0]), batch) == pytest.approx(12.5, abs=1e-12)

    def test_logistic_zero_params_gives_log2(self):
        spec = ModelSpec("logistic", (4, 2))
        rng = np.random.default_rng(0)
        batch = make_batch(rng, 7, 4, 2)
        got = model.loss(spec, np.zeros(spec.num_params), batch)
        assert got == pytest.approx(np.log(2.0), abs=1e-12)

    def test_mlp_matches_independent_forward(self):
        spec = ModelSpec("mlp", (3, 5, 4), activation="tanh", l2_reg=0.02)
        rng = np.random.default_rng(1)
        batch = make_batch(rng, 9, 3, 4)
        theta = rng.standard_normal(spec.num_params)
        expect = mlp_forward_oracle(theta, batch.X, batch.y, (3, 5, 4), 0.02)
        assert model.loss(spec, theta, batch) == pytest.approx(expect, rel=1e-12)

    def test_nonfinite_raises(self):
        spec = ModelSpec("logistic", (2, 2))
        batch = Batch(np.zeros((1, 2)), np.zeros(1, dtype=int))
        theta = np.full(spec.num_params, np.nan)
        with pytest.raises(NonFiniteError):
            model.loss(spec, theta, batch)

    def test_data_loss_excludes_reg(self):
        spec = ModelSpec("logistic", (2, 2), l2_reg=0.5)
        rng = np.random.default_rng(2)
        batch = make_batch(rng, 5, 2, 2)
        theta = rng.standard_normal(spec.num_params)
        gap = model.loss(spec, theta, batch) - model.data_loss(spec, theta, batch)
        assert gap == pytest.approx(0.25 * theta @ theta, rel=1e-12)


class TestGrad:
    def test_quadratic_closed_form(self):
        rng = np.random.default_rng(3)
        a_half = rng.standard_normal((4, 4))
        a = a_half @ a_half.T
        b = rng.standard_normal(4)
        spec = ModelSpec("quadratic", quad_a=a, quad_b=b)
        theta = rng.standard_normal(4)
        np.testing.assert_allclose(model.grad(spec, theta, None), a @ theta + b, rtol=1e-12)

    def test_logistic_zero_param_structure(self):
        spec = ModelSpec("logistic", (3, 2))
        x = np.array([0.5, -1.0, 2.0])
        batch = Batch(x[None, :], np.array([1]))
        theta = np.zeros(spec.num_params)
        got = model.data_grad(spec, theta, batch)
        # softmax is uniform at theta=0, so residual is (0.5, -0.5) across classes
        xa = np.concatenate([x, [1.0]])
        expect = np.concatenate([0.5 * xa, -0.5 * xa])
        np.testing.assert_allclose(got, expect, atol=1e-12)

    @pytest.mark.parametrize("case", range(4))
    def test_matches_finite_differences(self, case):
        spec, batch = fixtures()[case]
        rng = np.random.default_rng(200 + case)
        for _ in range(5):
            theta = rng.standard_normal(spec.num_params) * 0.5
            got = model.grad(spec, theta, batch)
            expect = fd_grad(lambda th: model.loss(spec, th, batch), theta)
            rel = np.linalg.norm(got - expect) / max(np.linalg.norm(expect), 1e-12)
            assert rel <= 1e-6, f"{spec.kind} rel={rel}"


class TestHvp:
    @pytest.mark.parametrize("case", range(4))
    def test_matches_grad_differences(self, case):
        spec, batch = fixtures()[case]
        rng = np.random.default_rng(300 + case)
        for _ in range(5):
            theta = rng.standard_normal(spec.num_params) * 0.5
            v = rng.standard_normal(spec.num_params)
            h = 1e-4 * (1 + np.linalg.norm(theta)) / (1 + np.linalg.norm(v))
            got = model.hvp(spec, theta, batch, v)
            expect = (model.grad(spec, theta + h * v, batch)
                      - model.grad(spec, theta - h * v, batch)) / (2 * h)
            rel = np.linalg.norm(got - expect) / max(np.linalg.norm(expect), 1e-10)
            assert rel <= 1e-4, f"{spec.kind} rel={rel}"

    def test_quadratic_and_zero_vector(self):
        spec, batch = fixtures()[3]
        rng = np.random.default_rng(4)
        v = rng.standard_normal(5)
        np.testing.assert_allclose(model.hvp(spec, np.zeros(5), batch, v), spec.quad_a @ v, rtol=1e-12)
        theta = rng.standard_normal(5)
        np.testing.assert_allclose(model.hvp(spec, theta, batch, np.zeros(5)), np.zeros(5), atol=0)

    @pytest.mark.parametrize("case", range(4))
    def test_symmetry_and_linearity(self, case):
        spec, batch = fixtures()[case]
        rng = np.random.default_rng(400 + case)
        theta = rng.standard_normal(spec.num_params) * 0.3
        u = rng.standard_normal(spec.num_params)
        v = rng.standard_normal(spec.num_params)
        hu = model.hvp(spec, theta, batch, u)
        hv = model.hvp(spec, theta, batch, v)
        assert u @ hv == pytest.approx(v @ hu, abs=1e-8)
        huv = model.hvp(spec, theta, batch, 2.0 * u - 3.0 * v)
        np.testing.assert_allclose(huv, 2.0 * hu - 3.0 * hv, atol=1e-10)


class TestFullHessian:
    def test_quadratic_exact(self):
        spec, batch = fixtures()[3]
        np.testing.assert_array_equal(model.full_hessian(spec, np.zeros(5), batch), spec.quad_a)

    def test_consistent_with_hvp(self):
        for spec, batch in fixtures():
            rng = np.random.default_rng(11)
            theta = rng.standard_normal(spec.num_params) * 0.4
            h = model.full_hessian(spec, theta, batch)
            for _ in range(3):
                v = rng.standard_normal(spec.num_params)
                np.testing.assert_allclose(h @ v, model.hvp(spec, theta, batch, v), atol=1e-10)

    def test_logistic_ridge_strong_convexity(self):
        lam = 0.05
        spec = ModelSpec("logistic", (3, 3), l2_reg=lam)
        rng = np.random.default_rng(12)
        batch = make_batch(rng, 20, 3, 3)
        theta = rng.standard_normal(spec.num_params)
        evals = np.linalg.eigvalsh(model.full_hessian(spec, theta, batch))
        assert evals.min() >= lam - 1e-10

    def test_mlp_matches_fd_hessian(self):
        spec = ModelSpec("mlp", (2, 3, 2), activation="tanh", l2_reg=0.01)
        rng = np.random.default_rng(13)
        batch = make_batch(rng, 6, 2, 2)
        theta = rng.standard_normal(spec.num_params) * 0.5
        n = spec.num_params
        fd = np.zeros((n, n))
        h = 1e-3
        f = lambda th: model.loss(spec, th, batch)
        for i in range(n):
            for j in range(i, n):
                ei = np.zeros(n); ei[i] = h
                ej = np.zeros(n); ej[j] = h
                val = (f(theta + ei + ej) - f(theta + ei - ej)
                       - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h * h)
                fd[i, j] = fd[j, i] = val
        got = model.full_hessian(spec, theta, batch)
        assert np.max(np.abs(got - fd)) <= 1e-4

    def test_mlp_xor_hessian_indefinite(self):
        spec = ModelSpec("mlp", (2, 8, 2), activation="tanh")
        splits = model.gen_synthetic("xor", 120, 2, 2, 0.0, seed=77)
        theta = model.init_params(spec, seed=78)
        evals = np.linalg.eigvalsh(model.full_hessian(spec, theta, splits.train))
        assert evals.min() < -1e-6

    def test_dim_guard(self):
        spec = ModelSpec("mlp", (60, 40, 10))
        assert spec.num_params > 2000
        with pytest.raises(DimTooLarge):
            model.full_hessian(spec, np.zeros(spec.num_params), Batch(np.zeros((1, 60)), np.zeros(1, dtype=int)))


class TestDescent:
    def test_loss_decreases_along_negative_gradient(self):
        for spec, batch in fixtures():
            rng = np.random.default_rng(14)
            theta = rng.standard_normal(spec.num_params) * 0.5
            g = model.grad(spec, theta, batch)
            before = model.loss(spec, theta, batch)
            after = model.loss(spec, theta - 1e-4 * g, batch)
            assert after < before


class TestSynthetic:
    def test_blobs_linearly_separable(self):
        splits = model.gen_synthetic("blobs", 200, 2, 2, 0.0, seed=5)
        spec = ModelSpec("logistic", (2, 2), l2_reg=0.0)
        res = scipy.optimize.minimize(
            lambda th: model.loss(spec, th, splits.train),
            np.zeros(spec.num_params),
            jac=lambda th: model.grad(spec, th, splits.train),
            method="L-BFGS-B",
        )
        preds = model.predict(spec, res.x, splits.train.X)
        assert np.mean(preds == splits.train.y) == 1.0

    def test_same_seed_bit_identical(self):
        a = model.gen_synthetic("moons", 100, 3, 2, 0.05, seed=6)
        b = model.gen_synthetic("moons", 100, 3, 2, 0.05, seed=6)
        assert a.train.X.tobytes() == b.train.X.tobytes()
        assert a.heldout.y.tobytes() == b.heldout.y.tobytes()

    def test_label_noise_fraction(self):
        clean = model.gen_synthetic("blobs", 1000, 2, 4, 0.0, seed=7)
        noisy = model.gen_synthetic("blobs", 1000, 2, 4, 0.1, seed=7)
        assert clean.train.X.tobytes() == noisy.train.X.tobytes()
        flipped = np.mean(np.concatenate([
            clean.train.y != noisy.train.y,
            clean.test.y != noisy.test.y,
            clean.heldout.y != noisy.heldout.y,
        ]))
        assert 0.07 <= flipped <= 0.13

    def test_split_sizes_disjoint_ranges(self):
        splits = model.gen_synthetic("xor", 100, 2, 2, 0.0, seed=8)
        assert len(splits.train) == 70
        assert len(splits.test) == 15
        assert len(splits.heldout) == 15

    def test_xor_labels_follow_parity(self):
        splits = model.gen_synthetic("xor", 50, 2, 2, 0.0, seed=9)
        x = splits.train.X
        expect = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
        np.testing.assert_array_equal(splits.train.y, expect)

    def test_bad_config(self):
        with pytest.raises(BadConfig):
            model.gen_synthetic("blobs", 2, 2, 4, 0.0, seed=0)
        with pytest.raises(BadConfig):
            model.gen_synthetic("xor", 100, 2, 3, 0.0, seed=0)
        with pytest.raises(BadConfig):
            model.gen_synthetic("spiral", 100, 2, 2, 0.0, seed=0)


class TestDatasetPlumbing:
    def test_examples_round_trip(self):
        splits = model.gen_synthetic("blobs", 40, 3, 2, 0.0, seed=10)
        ds = splits.train
        rebuilt = Dataset.from_examples(ds.examples, ds.num_classes, ds.split)
        assert rebuilt.X.tobytes() == ds.X.tobytes()
        assert rebuilt.y.tobytes() == ds.y.tobytes()

    def test_batch_indexing(self):
        splits = model.gen_synthetic("blobs", 40, 3, 2, 0.0, seed=10)
        b = splits.train.batch([3, 1, 3])
        np.testing.assert_array_equal(b.X[0], splits.train.X[3])
        np.testing.assert_array_equal(b.X[1], splits.train.X[1])
        assert len(b.y) == 3

    def test_csv_round_trip(self, tmp_path):
        splits = model.gen_synthetic("moons", 60, 4, 2, 0.1, seed=11)
        path = tmp_path / "data.csv"
        model.save_dataset_csv(splits, path)
        loaded = model.load_dataset_csv(path)
        for name in ("train", "test", "heldout"):
            a, b = splits.get(name), loaded.get(name)
            assert a.X.tobytes() == b.X.tobytes()
            assert a.y.tobytes() == b.y.tobytes()

    def test_invalid_dataset(self):
        with pytest.raises(BadConfig):
            Dataset(np.zeros((3, 2)), np.array([0, 1, 5]), num_classes=2)
        with pytest.raises(NonFiniteError):
            Dataset(np.array([[np.inf, 0.0]]), np.array([0]), num_classes=2)


class TestInitParams:
    def test_deterministic_and_kind_shapes(self):
        mlp = ModelSpec("mlp", (3, 4, 2))
        a = model.init_params(mlp, seed=1)
        b = model.init_params(mlp, seed=1)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (mlp.num_params,)
        logi = ModelSpec("logistic", (3, 2))
        assert np.all(model.init_params(logi, seed=1) == 0.0)
