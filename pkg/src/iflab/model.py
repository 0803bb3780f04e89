"""Desk-scale differentiable models and synthetic datasets.

Three model kinds share one parameter-vector interface:

* ``logistic``  — multinomial regression with bias, softmax cross-entropy.
* ``mlp``       — one hidden layer (tanh or relu), softmax cross-entropy.
* ``quadratic`` — L(theta) = 1/2 theta'A theta + b'theta, the analytic
  fixture with a constant Hessian. Its batch loss ignores the data; its
  per-example loss is the linear probe features.theta, so perturbation
  terms built from examples are exactly linear terms.

All derivatives are hand-derived and exact: gradients by backprop,
Hessian-vector products by a forward-over-reverse pass, full Hessians by
applying the HVP to identity columns. Batch losses are means over the
batch; l2 regularization 0.5*l2_reg*||theta||^2 is added once per loss
evaluation and covers every parameter.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import BadConfig, DimTooLarge, NonFiniteError

DENSE_PARAM_LIMIT = 2000


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


class Batch(NamedTuple):
    """Columnar view of a set of examples; the fast path for batched math."""

    X: np.ndarray  # (n, D)
    y: np.ndarray  # (n,) int64


@dataclass
class Dataset:
    """Fixed-size example collection with one split tag for the whole set."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise BadConfig(f"feature matrix {self.X.shape} does not match {len(self.y)} labels")
        if not np.all(np.isfinite(self.X)):
            raise NonFiniteError("dataset features contain non-finite values")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise BadConfig(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(self.X[i], int(self.y[i])) for i in range(len(self))]

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.X[idx], self.y[idx])

    @staticmethod
    def from_examples(examples: Sequence[LabeledExample], num_classes: int, split: str = "train") -> "Dataset":
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.asarray([e.label for e in examples], dtype=np.int64)
        return Dataset(X, y, num_classes, split)


@dataclass
class DataSplits:
    train: Dataset
    test: Dataset
    heldout: Dataset

    def get(self, split: str) -> Dataset:
        if split not in ("train", "test", "heldout"):
            raise BadConfig(f"unknown split {split!r}")
        return getattr(self, split)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture + loss description; immutable and hashable by content.

    layer_dims: (D, K) for logistic, (D, H, K) for mlp, ignored for
    quadratic (dimension comes from quad_b).
    """

    kind: str
    layer_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    l2_reg: float = 0.0
    quad_a: np.ndarray | None = None
    quad_b: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp", "quadratic"):
            raise BadConfig(f"unknown model kind {self.kind!r}")
        if self.l2_reg < 0:
            raise BadConfig("l2_reg must be nonnegative")
        if self.kind == "quadratic":
            a = np.asarray(self.quad_a, dtype=np.float64)
            b = np.asarray(self.quad_b, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape != (a.shape[0],):
                raise BadConfig("quadratic kind needs square quad_a and matching quad_b")
            if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12):
                raise BadConfig("quad_a must be symmetric")
            object.__setattr__(self, "quad_a", a)
            object.__setattr__(self, "quad_b", b)
        else:
            object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
            want = 2 if self.kind == "logistic" else 3
            if len(self.layer_dims) != want or any(d <= 0 for d in self.layer_dims):
                raise BadConfig(f"{self.kind} needs {want} positive layer_dims, got {self.layer_dims}")
            if self.kind == "mlp" and self.activation not in ("tanh", "relu"):
                raise BadConfig(f"unknown activation {self.activation!r}")

    @property
    def num_params(self) -> int:
        if self.kind == "quadratic":
            return len(self.quad_b)
        if self.kind == "logistic":
            d, k = self.layer_dims
            return k * (d + 1)
        d, h, k = self.layer_dims
        return h * (d + 1) + k * (h + 1)

    @property
    def num_classes(self) -> int:
        if self.kind == "quadratic":
            raise BadConfig("quadratic models have no classes")
        return self.layer_dims[-1]

    def digest(self) -> str:
        payload = {
            "kind": self.kind,
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "l2_reg": self.l2_reg,
        }
        if self.kind == "quadratic":
            payload["quad_a"] = [f"{v:.17g}" for v in self.quad_a.ravel()]
            payload["quad_b"] = [f"{v:.17g}" for v in self.quad_b.ravel()]
        raw = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Deterministic parameter init: zeros for logistic, scaled Gaussian layers for mlp."""
    rng = np.random.default_rng(seed)
    if spec.kind == "quadratic":
        return rng.standard_normal(spec.num_params)
    if spec.kind == "logistic":
        return np.zeros(spec.num_params)
    d, h, k = spec.layer_dims
    w1 = rng.standard_normal((h, d)) / np.sqrt(d)
    w2 = rng.standard_normal((k, h)) / np.sqrt(h)
    return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)])


def as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    if isinstance(batch, Dataset):
        return Batch(batch.X, batch.y)
    X = np.stack([np.asarray(e.features, dtype=np.float64) for e in batch])
    y = np.asarray([e.label for e in batch], dtype=np.int64)
    return Batch(X, y)


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} is non-finite (divergent parameters?)")
    return value


def _augment(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((len(X), 1))], axis=1)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def _split_mlp(spec: ModelSpec, theta: np.ndarray):
    d, h, k = spec.layer_dims
    o = 0
    w1 = theta[o:o + h * d].reshape(h, d); o += h * d
    b1 = theta[o:o + h]; o += h
    w2 = theta[o:o + k * h].reshape(k, h); o += k * h
    b2 = theta[o:o + k]
    return w1, b1, w2, b2


def _mlp_forward(spec: ModelSpec, theta: np.ndarray, X: np.ndarray):
    w1, b1, w2, b2 = _split_mlp(spec, theta)
    a = X @ w1.T + b1
    hid = np.tanh(a) if spec.activation == "tanh" else np.maximum(a, 0.0)
    z = hid @ w2.T + b2
    return a, hid, z, (w1, b1, w2, b2)


def logits(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    if spec.kind == "logistic":
        d, k = spec.layer_dims
        w = theta.reshape(k, d + 1)
        return _augment(X) @ w.T
    if spec.kind == "mlp":
        return _mlp_forward(spec, theta, X)[2]
    raise BadConfig("quadratic models produce no logits")


def predict(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predicted class per row; ties go to the lowest class index (argmax)."""
    return np.argmax(logits(spec, theta, X), axis=1)


def example_losses(spec: ModelSpec, theta: np.ndarray, batch) -> np.ndarray:
    """Per-example data losses (no regularization): cross-entropy, or the linear probe for quadratic."""
    b = as_batch(batch)
    if spec.kind == "quadratic":
        return _check_finite(b.X @ theta, "per-example loss")
    lp = _log_softmax(logits(spec, theta, b.X))
    return _check_finite(-lp[np.arange(len(b.y)), b.y], "per-example loss")


def data_loss(spec: ModelSpec, theta: np.ndarray, batch) -> float:
    """Mean per-example data loss over the batch, without regularization."""
    return float(example_losses(spec, theta, batch).mean())


def loss(spec: ModelSpec, theta: np.ndarray, batch) -> float:
    """Batch training loss: mean data loss plus 0.5*l2_reg*||theta||^2.

    Quadratic kind returns 1/2 theta'A theta + b'theta and ignores the batch.
    """
    if spec.kind == "quadratic":
        return float(_check_finite(0.5 * theta @ (spec.quad_a @ theta) + spec.quad_b @ theta, "loss"))
    out = data_loss(spec, theta, batch)
    if spec.l2_reg:
        out += 0.5 * spec.l2_reg * float(theta @ theta)
    return float(_check_finite(out, "loss"))


def data_grad(spec: ModelSpec, theta: np.ndarray, batch) -> np.ndarray:
    """Exact gradient of data_loss with respect to theta."""
    b = as_batch(batch)
    n = len(b.y)
    if spec.kind == "quadratic":
        return b.X.mean(axis=0)
    if spec.kind == "logistic":
        d, k = spec.layer_dims
        xa = _augment(b.X)
        p = np.exp(_log_softmax(xa @ theta.reshape(k, d + 1).T))
        g = p.copy()
        g[np.arange(n), b.y] -= 1.0
        return _check_finite((g.T @ xa / n).ravel(), "gradient")
    a, hid, z, (w1, b1, w2, b2) = _mlp_forward(spec, theta, b.X)
    p = np.exp(_log_softmax(z))
    g = p.copy()
    g[np.arange(n), b.y] -= 1.0
    dh = g @ w2
    da = dh * (1.0 - hid * hid) if spec.activation == "tanh" else dh * (a > 0)
    parts = [
        (da.T @ b.X / n).ravel(),
        da.sum(axis=0) / n,
        (g.T @ hid / n).ravel(),
        g.sum(axis=0) / n,
    ]
    return _check_finite(np.concatenate(parts), "gradient")


def grad(spec: ModelSpec, theta: np.ndarray, batch) -> np.ndarray:
    """Exact gradient of `loss`."""
    if spec.kind == "quadratic":
        return _check_finite(spec.quad_a @ theta + spec.quad_b, "gradient")
    out = data_grad(spec, theta, batch)
    if spec.l2_reg:
        out = out + spec.l2_reg * theta
    return out


def _hvp_block_data(spec: ModelSpec, theta: np.ndarray, b: Batch, V: np.ndarray) -> np.ndarray:
    """Data-term Hessian times each row of V (M x N), forward-over-reverse."""
    n = len(b.y)
    m = V.shape[0]
    if spec.kind == "quadratic":
        return np.zeros_like(V)  # per-example loss is linear in theta
    if spec.kind == "logistic":
        d, k = spec.layer_dims
        xa = _augment(b.X)
        p = np.exp(_log_softmax(xa @ theta.reshape(k, d + 1).T))
        vw = V.reshape(m, k, d + 1)
        rz = np.einsum("nd,mkd->nmk", xa, vw)
        s = np.einsum("nk,nmk->nm", p, rz)
        rg = p[:, None, :] * (rz - s[:, :, None])
        return np.einsum("nmk,nd->mkd", rg, xa).reshape(m, -1) / n

    d, h, k = spec.layer_dims
    a, hid, z, (w1, b1, w2, b2) = _mlp_forward(spec, theta, b.X)
    p = np.exp(_log_softmax(z))
    g = p.copy()
    g[np.arange(n), b.y] -= 1.0
    actp = 1.0 - hid * hid if spec.activation == "tanh" else (a > 0).astype(np.float64)
    dh = g @ w2

    o = 0
    v1 = V[:, o:o + h * d].reshape(m, h, d); o += h * d
    c1 = V[:, o:o + h]; o += h
    v2 = V[:, o:o + k * h].reshape(m, k, h); o += k * h
    c2 = V[:, o:o + k]

    ra = np.einsum("nd,mhd->nmh", b.X, v1) + c1[None, :, :]
    rh = actp[:, None, :] * ra
    rz = np.einsum("nmh,kh->nmk", rh, w2) + np.einsum("nh,mkh->nmk", hid, v2) + c2[None, :, :]
    s = np.einsum("nk,nmk->nm", p, rz)
    rg = p[:, None, :] * (rz - s[:, :, None])

    rdh = np.einsum("nk,mkh->nmh", g, v2) + np.einsum("nmk,kh->nmh", rg, w2)
    if spec.activation == "tanh":
        ractp = -2.0 * hid[:, None, :] * rh
        rda = ractp * dh[:, None, :] + actp[:, None, :] * rdh
    else:
        rda = actp[:, None, :] * rdh  # relu curvature is zero a.e.

    parts = [
        np.einsum("nmh,nd->mhd", rda, b.X).reshape(m, -1) / n,
        rda.sum(axis=0) / n,
        (np.einsum("nmk,nh->mkh", rg, hid) + np.einsum("nk,nmh->mkh", g, rh)).reshape(m, -1) / n,
        rg.sum(axis=0) / n,
    ]
    return np.concatenate(parts, axis=1)


def hvp(spec: ModelSpec, theta: np.ndarray, batch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of `loss` at theta, without materializing H."""
    v = np.asarray(v, dtype=np.float64)
    if spec.kind == "quadratic":
        return _check_finite(spec.quad_a @ v, "hvp")
    out = _hvp_block_data(spec, theta, as_batch(batch), v[None, :])[0]
    if spec.l2_reg:
        out = out + spec.l2_reg * v
    return _check_finite(out, "hvp")


def data_hvp(spec: ModelSpec, theta: np.ndarray, batch, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of data_loss (no regularization, zero for quadratic terms)."""
    v = np.asarray(v, dtype=np.float64)
    if spec.kind == "quadratic":
        return np.zeros_like(v)
    return _check_finite(_hvp_block_data(spec, theta, as_batch(batch), v[None, :])[0], "hvp")


def hessian_operator(spec: ModelSpec, theta: np.ndarray, batch):
    """Matrix-free symmetric operator for the loss Hessian over a fixed batch."""
    from .numkit import LinearOperator

    b = as_batch(batch)
    return LinearOperator(
        dim=spec.num_params,
        matvec=lambda v: hvp(spec, theta, b, v),
        symmetric=True,
    )


def full_hessian(spec: ModelSpec, theta: np.ndarray, batch, block: int = 128) -> np.ndarray:
    """Dense Hessian of `loss`, column j = hvp(e_j), symmetrized as (H + H')/2."""
    n_params = spec.num_params
    if n_params > DENSE_PARAM_LIMIT:
        raise DimTooLarge(f"full Hessian limited to {DENSE_PARAM_LIMIT} parameters, got {n_params}")
    if spec.kind == "quadratic":
        return spec.quad_a.copy()
    b = as_batch(batch)
    cols = []
    eye = np.eye(n_params)
    for start in range(0, n_params, block):
        cols.append(_hvp_block_data(spec, theta, b, eye[start:start + block]))
    h = np.concatenate(cols, axis=0).T
    if spec.l2_reg:
        h = h + spec.l2_reg * eye
    return _check_finite(0.5 * (h + h.T), "hessian")


def gen_synthetic(
    kind: str,
    n: int,
    D: int,
    K: int,
    label_noise: float,
    seed: int,
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> DataSplits:
    """Deterministic synthetic classification data, split train/test/heldout.

    Kinds: `blobs` (K Gaussian clusters on a circle), `xor` (sign-parity of
    the first two coordinates), `moons` (two interleaved arcs). label_noise
    flips each label to a uniformly random other class with that
    probability, drawn from a sub-generator so the noise-free data for the
    same seed is unchanged.
    """
    if kind not in ("blobs", "xor", "moons"):
        raise BadConfig(f"unknown synthetic kind {kind!r}")
    if n < K:
        raise BadConfig(f"need n >= K, got n={n}, K={K}")
    if not (0.0 <= label_noise < 1.0):
        raise BadConfig(f"label_noise must be in [0, 1), got {label_noise}")
    if kind in ("xor", "moons"):
        if K != 2:
            raise BadConfig(f"{kind} data is binary, got K={K}")
        if D < 2:
            raise BadConfig(f"{kind} data needs D >= 2")
    if abs(sum(split_fracs) - 1.0) > 1e-9 or any(f <= 0 for f in split_fracs):
        raise BadConfig(f"split fractions must be positive and sum to 1, got {split_fracs}")

    rng = np.random.default_rng([seed, 0])
    if kind == "blobs":
        angles = 2.0 * np.pi * np.arange(K) / K
        centers = np.zeros((K, D))
        centers[:, 0] = 3.5 * np.cos(angles)
        centers[:, min(1, D - 1)] = 3.5 * np.sin(angles)
        y = rng.integers(0, K, size=n)
        X = centers[y] + 0.6 * rng.standard_normal((n, D))
    elif kind == "xor":
        X = rng.uniform(-1.0, 1.0, size=(n, D))
        y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(np.int64)
    else:
        y = rng.integers(0, 2, size=n)
        t = rng.uniform(0.0, np.pi, size=n)
        X = np.zeros((n, D))
        X[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
        X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
        if D > 2:
            X[:, 2:] = 0.1 * rng.standard_normal((n, D - 2))
        X[:, :2] += 0.15 * rng.standard_normal((n, 2))

    if label_noise > 0.0:
        noise_rng = np.random.default_rng([seed, 1])
        flip = noise_rng.random(n) < label_noise
        offsets = noise_rng.integers(1, K, size=n)
        y = np.where(flip, (y + offsets) % K, y)

    n_train = int(np.floor(split_fracs[0] * n))
    n_test = int(np.floor(split_fracs[1] * n))
    n_held = n - n_train - n_test
    if min(n_train, n_test, n_held) < 1:
        raise BadConfig("each split must receive at least one example")
    bounds = [(0, n_train), (n_train, n_train + n_test), (n_train + n_test, n)]
    names = ["train", "test", "heldout"]
    parts = [Dataset(X[a:b], y[a:b], K, split=name) for (a, b), name in zip(bounds, names)]
    return DataSplits(*parts)


def save_dataset_csv(splits: DataSplits, path) -> None:
    """Write all splits to one CSV: feat_0..feat_{D-1},label,split (17-digit floats)."""
    d = splits.train.feature_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"feat_{i}" for i in range(d)] + ["label", "split"])
        for ds in (splits.train, splits.test, splits.heldout):
            for i in range(len(ds)):
                writer.writerow([f"{v:.17g}" for v in ds.X[i]] + [str(int(ds.y[i])), ds.split])


def load_dataset_csv(path) -> DataSplits:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 3 or header[-2:] != ["label", "split"]:
            raise BadConfig(f"unexpected dataset header in {path}")
        d = len(header) - 2
        if header[:d] != [f"feat_{i}" for i in range(d)]:
            raise BadConfig(f"unexpected dataset header in {path}")
        rows = {"train": ([], []), "test": ([], []), "heldout": ([], [])}
        for row in reader:
            feats = [float(v) for v in row[:d]]
            label = int(row[d])
            split = row[d + 1]
            if split not in rows:
                raise BadConfig(f"unknown split tag {split!r} in {path}")
            rows[split][0].append(feats)
            rows[split][1].append(label)
    labels = [lab for _, (_, ys) in rows.items() for lab in ys]
    k = max(labels) + 1 if labels else 1
    parts = {}
    for split, (xs, ys) in rows.items():
        parts[split] = Dataset(np.asarray(xs, dtype=np.float64).reshape(len(ys), d),
                               np.asarray(ys, dtype=np.int64), k, split=split)
    return DataSplits(parts["train"], parts["test"], parts["heldout"])
