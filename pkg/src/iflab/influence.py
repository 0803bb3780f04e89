"""Estimators of the derivative of trained parameters in the term weights.

All four estimators produce the same object: a Q x N Jacobian J whose row
q approximates d(theta_final)/d(eps_q) at eps = 0.

* hif    — row q solves (H + damping*I) r = -grad l_{S_q} at one
           checkpoint, matrix-free via conjugate_residual (or
           conjugate_gradient, which fails on indefinite H).
* abif   — the same inverse restricted to the span of the top-|lambda|
           eigenpairs of H; the component on the complement is exactly 0.
* tracin — -sum over checkpoints of eta(step) * grad-rows; with a single
           checkpoint the eta factor is dropped by default.
* exact  — the derivative of the discrete SGD map itself, by the forward
           recurrence J <- J - eta_t * M_t - eta_t * J H_t along the
           recorded eps=0 trajectory.

Scores are predicted d(l_z)/d(eps_q) per unit up-weight: row_q . grad l_z.
Proponents of z are the most negative scores (up-weighting them decreases
l_z), opponents the most positive.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as mops
from . import numkit
from .errors import BadConfig, BadInput, DimTooLarge, MissingArtifact, NonFiniteError
from .model import Batch, ModelSpec
from .trainer import Checkpoint, LRSchedule, Trajectory
from .variation import LossVariation, mixed_second

JACOBIAN_MAGIC = b"JACB"
JACOBIAN_VERSION = 1
SIGN_CONVENTION = "dloss-per-unit-upweight"
SCORING_BATCH_LIMIT = 4096


@dataclass
class EpsJacobian:
    """Q x N parameter derivative with its method tag and solve provenance."""

    matrix: np.ndarray
    method: str
    provenance: dict = field(default_factory=dict)
    intermediates: list | None = None  # J after each step, exact method only

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise BadInput(f"jacobian must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("jacobian has non-finite entries")


@dataclass
class InfluenceMatrix:
    """Predicted loss derivatives: scores[z][q] = d l_z / d eps_q."""

    scores: np.ndarray  # (n_test, Q)
    method: str
    sign_convention: str = SIGN_CONVENTION
    test_ids: np.ndarray | None = None
    train_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise NonFiniteError("influence scores have non-finite entries")
        n_test, q = self.scores.shape
        self.test_ids = (
            np.arange(n_test, dtype=np.int64)
            if self.test_ids is None
            else np.asarray(self.test_ids, dtype=np.int64)
        )
        self.train_ids = (
            np.arange(q, dtype=np.int64)
            if self.train_ids is None
            else np.asarray(self.train_ids, dtype=np.int64)
        )
        if len(self.test_ids) != n_test or len(self.train_ids) != q:
            raise BadInput("id vectors do not match score matrix shape")


@dataclass
class Ranking:
    """Per-test-point proponents (most supportive first) and opponents."""

    test_index: int
    proponents: np.ndarray
    opponents: np.ndarray
    k: int


def _theta_of(checkpoint) -> tuple[np.ndarray, int | None]:
    if isinstance(checkpoint, Checkpoint):
        return np.asarray(checkpoint.theta, dtype=np.float64), int(checkpoint.step)
    return np.asarray(checkpoint, dtype=np.float64), None


def _scoring_batch(var: LossVariation, scoring_batch) -> Batch:
    if scoring_batch is not None:
        return mops.as_batch(scoring_batch)
    ds = var.base_schedule.dataset
    if len(ds) > SCORING_BATCH_LIMIT:
        raise BadConfig(
            f"train set has {len(ds)} examples; pass an explicit scoring_batch above {SCORING_BATCH_LIMIT}"
        )
    return Batch(ds.X, ds.y)


def hif_param_derivative(
    spec: ModelSpec,
    checkpoint,
    var: LossVariation,
    solver: str = "cr",
    damping: float = 0.0,
    tol: float = numkit.DEFAULT_TOL,
    max_iter: int | None = None,
    scoring_batch=None,
) -> EpsJacobian:
    """Inverse-Hessian rows: solve (H + damping*I) r_q = -grad l_{S_q}.

    H is the loss Hessian at the checkpoint over a fixed scoring batch
    (default: the full train set). Rows whose solve misses the tolerance
    are kept at the best iterate and flagged in provenance; with
    solver="cg" an indefinite H raises IndefiniteDetected.
    """
    if solver not in ("cr", "cg"):
        raise BadConfig(f"unknown solver {solver!r}")
    theta, step = _theta_of(checkpoint)
    batch = _scoring_batch(var, scoring_batch)
    hop = mops.hessian_operator(spec, theta, batch)
    rows_m = mixed_second(var, spec, theta)

    rows = np.zeros_like(rows_m)
    converged, residuals, iterations = [], [], []
    for q in range(var.num_terms):
        b = -rows_m[q]
        if solver == "cr":
            rep = numkit.conjugate_residual(hop, b, tol=tol, max_iter=max_iter, damping=damping)
        else:
            rep = numkit.conjugate_gradient(hop.shifted(damping), b, tol=tol, max_iter=max_iter)
        rows[q] = rep.solution
        converged.append(bool(rep.converged))
        residuals.append(float(rep.residual_norm))
        iterations.append(int(rep.iterations))

    return EpsJacobian(
        rows,
        method="hif",
        provenance={
            "solver": solver,
            "damping": float(damping),
            "tol": float(tol),
            "checkpoint_step": step,
            "converged": converged,
            "residual_norms": residuals,
            "iterations": iterations,
        },
    )


def abif_param_derivative(
    spec: ModelSpec,
    checkpoint,
    var: LossVariation,
    k: int = 32,
    num_iters: int = 64,
    seed: int = 0,
    scoring_batch=None,
    eig_floor_rel: float = 1e-8,
) -> EpsJacobian:
    """Inverse restricted to the top-|lambda| eigenspace of H.

    Row q = -sum over retained pairs of (v_i . grad l_{S_q} / lambda_i) v_i;
    the component orthogonal to the retained span is exactly zero. Pairs
    with |lambda| <= eig_floor_rel * max|lambda| count as kernel and are
    dropped. Defaults k=32, num_iters=64.
    """
    theta, step = _theta_of(checkpoint)
    batch = _scoring_batch(var, scoring_batch)
    hop = mops.hessian_operator(spec, theta, batch)
    k_eff = min(k, hop.dim)
    iters_eff = min(max(num_iters, k_eff), hop.dim)
    pairs = numkit.topk_eigs(hop, k=k_eff, num_iters=iters_eff, seed=seed)
    if not pairs:
        raise BadInput("no eigenpairs found for ABIF")
    floor = eig_floor_rel * max(abs(p.value) for p in pairs)
    kept = [p for p in pairs if abs(p.value) > floor]

    rows_m = mixed_second(var, spec, theta)
    rows = np.zeros_like(rows_m)
    for pair in kept:
        coeff = rows_m @ pair.vector  # (Q,)
        rows -= np.outer(coeff / pair.value, pair.vector)

    return EpsJacobian(
        rows,
        method="abif",
        provenance={
            "k": int(k),
            "num_iters": int(num_iters),
            "seed": int(seed),
            "checkpoint_step": step,
            "eig_floor": float(floor),
            "eigenvalues_kept": [float(p.value) for p in kept],
            "num_found": len(pairs),
        },
    )


def tracin_param_derivative(
    spec: ModelSpec,
    checkpoints,
    var: LossVariation,
    lr: LRSchedule | None = None,
    eta_weighted: bool | None = None,
) -> EpsJacobian:
    """Checkpoint-sum estimator.

    Multi-checkpoint: J = -sum_i eta(step_i) * grad-rows(theta_i), the
    learning rate taken at each checkpoint's recorded step. With a single
    checkpoint the default drops the eta factor (pure -grad-rows);
    eta_weighted=True keeps it.
    """
    cks = list(checkpoints)
    if not cks:
        raise BadConfig("tracin needs at least one checkpoint")
    if eta_weighted is None:
        eta_weighted = len(cks) > 1
    if eta_weighted and lr is None:
        raise BadConfig("eta-weighted tracin needs the lr schedule")

    rows = np.zeros((var.num_terms, spec.num_params))
    steps = []
    for ck in cks:
        theta, step = _theta_of(ck)
        if eta_weighted:
            if step is None:
                raise BadConfig("eta-weighted tracin needs checkpoints with recorded steps")
            rows -= lr.rate(step) * mixed_second(var, spec, theta)
        else:
            rows -= mixed_second(var, spec, theta)
        steps.append(step)

    return EpsJacobian(
        rows,
        method="tracin",
        provenance={"checkpoint_steps": steps, "eta_weighted": bool(eta_weighted)},
    )


def exact_eps_jacobian(
    spec: ModelSpec,
    var: LossVariation,
    base_trajectory: Trajectory,
    lr: LRSchedule,
    keep_intermediates: bool = False,
) -> EpsJacobian:
    """Exact derivative of the discrete training map at eps=0.

    Forward recurrence over the recorded base trajectory:

        J_0 = 0;  J_{t+1} = J_t - eta_t * M_t - eta_t * J_t H_t

    with M_t the mixed second derivative and H_t the dense Hessian of the
    base batch loss at theta_{0,t}. Requires every step recorded. Divergent
    growth of J surfaces as NonFiniteError naming the step.
    """
    if np.any(base_trajectory.eps != 0.0):
        raise BadConfig("exact jacobian needs the eps=0 base trajectory")
    steps = base_trajectory.steps
    start, end = int(steps[0]), int(steps[-1])
    if not np.array_equal(steps, np.arange(start, end + 1)):
        raise BadConfig("exact jacobian needs a trajectory recorded at every step")
    if spec.num_params > mops.DENSE_PARAM_LIMIT:
        raise DimTooLarge(f"exact jacobian materializes H; N={spec.num_params} too large")

    q = var.num_terms
    jac = np.zeros((q, spec.num_params))
    intermediates = [jac.copy()] if keep_intermediates else None
    schedule = var.base_schedule
    for pos, t in enumerate(range(start, end)):
        theta_t = base_trajectory.thetas[pos]
        eta = lr.rate(t)
        m_t = mixed_second(var, spec, theta_t, t)
        h_t = mops.full_hessian(spec, theta_t, schedule.batch(t))
        jac = jac - eta * m_t - eta * (jac @ h_t)
        if not np.all(np.isfinite(jac)):
            raise NonFiniteError(f"exact jacobian diverged at step {t} (norm blow-up)")
        if keep_intermediates:
            intermediates.append(jac.copy())

    return EpsJacobian(
        jac,
        method="exact",
        provenance={"start_step": start, "end_step": end},
        intermediates=intermediates,
    )


def tracin_gap_reconstruction(
    spec: ModelSpec,
    var: LossVariation,
    base_trajectory: Trajectory,
    lr: LRSchedule,
    intermediates: list,
) -> np.ndarray:
    """-sum_t eta_t J_t H_t: the trajectory-feedback term the checkpoint sum omits.

    Uses the recorded per-step J_t from an exact run. Equals
    J_exact - J_tracin(eta-weighted over every step) up to rounding.
    """
    steps = base_trajectory.steps
    start, end = int(steps[0]), int(steps[-1])
    out = np.zeros_like(intermediates[0])
    schedule = var.base_schedule
    for pos, t in enumerate(range(start, end)):
        eta = lr.rate(t)
        h_t = mops.full_hessian(spec, base_trajectory.thetas[pos], schedule.batch(t))
        out -= eta * (intermediates[pos] @ h_t)
    return out


def influence_score(
    jac: EpsJacobian,
    spec: ModelSpec,
    checkpoint,
    test_points,
    test_ids=None,
    train_ids=None,
) -> InfluenceMatrix:
    """Predicted d(l_z)/d(eps_q): scores[z][q] = row_q(J) . grad l_z(theta).

    Test losses are pure data losses at the supplied parameters; no eps
    factor is applied (per-unit-eps convention, tagged on the result).
    """
    theta, _ = _theta_of(checkpoint)
    batch = mops.as_batch(test_points)
    grads = np.stack([
        mops.data_grad(spec, theta, Batch(batch.X[i:i + 1], batch.y[i:i + 1]))
        for i in range(len(batch.y))
    ])
    scores = grads @ jac.matrix.T
    return InfluenceMatrix(
        scores,
        method=jac.method,
        test_ids=test_ids,
        train_ids=train_ids,
    )


def rank(scores: InfluenceMatrix, z: int, k: int) -> Ranking:
    """Top-k proponents and opponents of test point z.

    One ascending sort by (score, train_id): proponents are the first k
    (most negative: up-weighting them most decreases l_z), opponents the
    last k in reverse (most positive first). Taking the two ends of a
    single order keeps the sets disjoint whenever k <= n/2, including
    under ties.
    """
    row = scores.scores[z]
    n = len(row)
    if not (1 <= k <= n):
        raise BadInput(f"need 1 <= k <= {n}, got k={k}")
    order = np.lexsort((scores.train_ids, row))
    proponents = scores.train_ids[order[:k]]
    opponents = scores.train_ids[order[n - k:]][::-1]
    return Ranking(test_index=z, proponents=proponents, opponents=opponents, k=k)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def save_jacobian(jac: EpsJacobian, path) -> None:
    """Binary layout: magic, version u32, Q u64, N u64, Q*N row-major f64, metadata JSON."""
    q, n = jac.matrix.shape
    meta = {"method": jac.method, "provenance": _jsonable(jac.provenance)}
    blob = (
        JACOBIAN_MAGIC
        + struct.pack("<I", JACOBIAN_VERSION)
        + struct.pack("<QQ", q, n)
        + np.ascontiguousarray(jac.matrix, dtype="<f8").tobytes()
        + json.dumps(meta, sort_keys=True).encode("utf-8")
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def load_jacobian(path) -> EpsJacobian:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise MissingArtifact(f"cannot read jacobian {path}: {exc}") from exc
    head = len(JACOBIAN_MAGIC) + 4 + 16
    if len(raw) < head or raw[:4] != JACOBIAN_MAGIC:
        raise BadInput(f"{path} is not a jacobian file")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != JACOBIAN_VERSION:
        raise BadInput(f"unsupported jacobian version {version}")
    q, n = struct.unpack_from("<QQ", raw, 8)
    body = head + 8 * q * n
    matrix = np.frombuffer(raw[head:body], dtype="<f8").astype(np.float64).reshape(q, n)
    meta = json.loads(raw[body:].decode("utf-8"))
    return EpsJacobian(matrix, method=meta["method"], provenance=meta.get("provenance", {}))


def save_influence_csv(scores: InfluenceMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["test_id", "train_id", "score", "method", "sign_convention"])
        for i, tid in enumerate(scores.test_ids):
            for j, xid in enumerate(scores.train_ids):
                writer.writerow([
                    int(tid), int(xid), f"{scores.scores[i, j]:.17g}",
                    scores.method, scores.sign_convention,
                ])


def load_influence_csv(path) -> InfluenceMatrix:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise MissingArtifact(f"cannot read scores {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["test_id", "train_id", "score", "method", "sign_convention"]:
            raise BadInput(f"unexpected scores header in {path}")
        cells: dict[tuple[int, int], float] = {}
        methods, signs = set(), set()
        for row in reader:
            cells[(int(row[0]), int(row[1]))] = float(row[2])
            methods.add(row[3])
            signs.add(row[4])
    if not cells:
        raise BadInput(f"no scores in {path}")
    if len(methods) != 1 or len(signs) != 1:
        raise BadInput(f"mixed method/sign tags in {path}")
    test_ids = sorted({t for t, _ in cells})
    train_ids = sorted({x for _, x in cells})
    matrix = np.full((len(test_ids), len(train_ids)), np.nan)
    for (t, x), score in cells.items():
        matrix[test_ids.index(t), train_ids.index(x)] = score
    if np.any(np.isnan(matrix)):
        raise BadInput(f"scores in {path} do not cover every (test, train) pair")
    return InfluenceMatrix(
        matrix,
        method=methods.pop(),
        sign_convention=signs.pop(),
        test_ids=np.asarray(test_ids, dtype=np.int64),
        train_ids=np.asarray(train_ids, dtype=np.int64),
    )
