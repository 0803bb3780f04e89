"""Empirical protocols built on the trainer and the estimators.

Four drivers, each with a delimited-output writer:

  * divergence_experiment: ||theta_eps - theta_0|| growth over training,
    with log-linear fits against the integrated learning rate.
  * gronwall_bound_check / gronwall_sharpness_demo: the a-priori
    divergence bound, its estimated constants, and the discrete sequence
    that attains the comparison-lemma bound exactly.
  * first_order_validity: residual of the linear-in-eps prediction from
    the exact eps-jacobian, swept over eps and training horizon.
  * fading_experiment: per-step correlation R(t) between measured
    test-loss deltas under down-sampling and each estimator's prediction.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model, numkit
from .errors import BadConfig, BadInput, DegenerateInput
from .influence import (
    abif_param_derivative,
    exact_eps_jacobian,
    hif_param_derivative,
    influence_score,
    tracin_param_derivative,
)
from .model import Batch, DataSplits, ModelSpec
from .seeds import derive_seed
from .trainer import (
    BatchSchedule,
    Checkpoint,
    LRSchedule,
    PairedRun,
    Trajectory,
    paired_divergence,
    train,
)
from .variation import LossVariation, PerturbationTerm, per_example_variation

log = logging.getLogger(__name__)

FADING_METHODS = ("hif", "abif", "tracin", "exact")


def _start_point(checkpoint) -> tuple[np.ndarray, int]:
    """(theta, step) from a Checkpoint, or (array, 0) from bare parameters."""
    if isinstance(checkpoint, Checkpoint):
        return np.asarray(checkpoint.theta, dtype=np.float64), int(checkpoint.step)
    return np.asarray(checkpoint, dtype=np.float64), 0


# ---------------------------------------------------------------------------
# divergence growth


@dataclass(frozen=True)
class LogLinFit:
    """slope/intercept/r2 of log(divergence) against integrated lr on [lo, hi)."""

    slope: float
    intercept: float
    r2: float
    lo: int
    hi: int
    n_points: int


@dataclass
class DivergenceSeries:
    """One eps value of the divergence experiment, with both window fits."""

    eps: float
    steps: np.ndarray
    int_lr: np.ndarray
    divergence: np.ndarray
    fit_tail: LogLinFit | None
    fit_head: LogLinFit | None
    pair: PairedRun | None = None


def fit_log_divergence(int_lr, divergence, lo: int, hi: int) -> LogLinFit | None:
    """Fit log(divergence) ~ slope * int_lr + intercept on index window [lo, hi).

    Non-positive divergences carry no log information and are dropped;
    fewer than three usable points (or a degenerate abscissa) yields None
    rather than a fabricated fit.
    """
    x = np.asarray(int_lr, dtype=np.float64)[lo:hi]
    d = np.asarray(divergence, dtype=np.float64)[lo:hi]
    keep = d > 0.0
    if keep.sum() < 3:
        return None
    try:
        slope, intercept, r2 = numkit.linfit(x[keep], np.log(d[keep]))
    except DegenerateInput:
        return None
    return LogLinFit(slope, intercept, r2, lo, hi, int(keep.sum()))


def _window_fits(int_lr, divergence, tail_frac: float):
    m = len(int_lr)
    split = m - int(np.ceil(tail_frac * m))
    tail = fit_log_divergence(int_lr, divergence, split, m)
    head = fit_log_divergence(int_lr, divergence, 0, split)
    return tail, head


def divergence_experiment(
    spec: ModelSpec,
    checkpoint,
    schedule: BatchSchedule,
    lr: LRSchedule,
    T: int,
    eps_grid,
    upsample_set_size: int = 16,
    seed: int = 0,
    record_every: int = 1,
    tail_frac: float = 0.6,
    var: LossVariation | None = None,
) -> list[DivergenceSeries]:
    """Paired eps-on/eps-off runs for T steps past the checkpoint, one per eps.

    The default perturbation up-weights a seeded subset of the train set
    as a single term. Each series carries log-linear fits over the tail
    window (last tail_frac of recorded points) and the complementary head
    window; the eps = 0 series has no fit (its divergence is identically
    zero, an invariant the caller can check) instead of log(0) artifacts.
    """
    theta0, start = _start_point(checkpoint)
    if var is None:
        rng = np.random.default_rng(derive_seed(seed, "divergence-probes"))
        probes = np.sort(rng.choice(len(schedule.dataset), size=upsample_set_size, replace=False))
        var = LossVariation(
            schedule,
            (PerturbationTerm(tuple(int(i) for i in probes)),),
            var_id="divergence-upsample",
        )
    if var.base_schedule is not schedule:
        raise BadConfig("variation must be built on the supplied schedule")
    out = []
    for eps in eps_grid:
        w = np.full(var.num_terms, float(eps))
        pair = paired_divergence(spec, var, w, theta0, lr, start + T, record_every, start)
        if eps == 0.0:
            tail = head = None
        else:
            tail, head = _window_fits(pair.int_lr, pair.divergence, tail_frac)
        out.append(
            DivergenceSeries(
                eps=float(eps),
                steps=pair.steps.copy(),
                int_lr=pair.int_lr.copy(),
                divergence=pair.divergence.copy(),
                fit_tail=tail,
                fit_head=head,
                pair=pair,
            )
        )
        log.info("divergence eps=%g: final %g over %d steps", eps, pair.divergence[-1], T)
    return out


def write_divergence_csv(series_list, path) -> None:
    """Schema: eps,t,int_lr,div_norm. t is the absolute optimizer step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["eps", "t", "int_lr", "div_norm"])
        for s in series_list:
            for t, c, d in zip(s.steps, s.int_lr, s.divergence):
                writer.writerow([f"{s.eps:.17g}", int(t), f"{c:.17g}", f"{d:.17g}"])


# ---------------------------------------------------------------------------
# Gronwall bound


@dataclass
class GronwallReport:
    """Per-step comparison of measured divergence against the a-priori bound."""

    eps: float
    c_est: float
    a_est: float
    steps: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    ratio: np.ndarray
    violations: int
    max_ratio: float
    rel_tol: float


def _eps_grad(var: LossVariation, spec: ModelSpec, theta: np.ndarray, t: int, w: np.ndarray) -> np.ndarray:
    """grad of the perturbation part alone: sum_q w_q grad l_{S_q}(theta) over active terms."""
    g = np.zeros(spec.num_params)
    for q in range(var.num_terms):
        if w[q] != 0.0 and var.active(q, t):
            g = g + w[q] * model.data_grad(spec, theta, var.term_batch(q))
    return g


def _perturbed_hvp(var: LossVariation, spec: ModelSpec, theta: np.ndarray, t: int, w: np.ndarray):
    """Hessian-vector closure of the per-step perturbed loss at theta."""
    sched = var.base_schedule
    t_eff = min(int(t), sched.t_max - 1)
    batch = sched.batch(t_eff)
    active = [q for q in range(var.num_terms) if w[q] != 0.0 and var.active(q, t_eff)]

    def hv(v):
        out = model.hvp(spec, theta, batch, v)
        for q in active:
            out = out + w[q] * model.data_hvp(spec, theta, var.term_batch(q), v)
        return out

    return hv


def gronwall_constants(
    spec: ModelSpec,
    var: LossVariation,
    pair: PairedRun,
    dense_dim_limit: int = 32,
    power_iters: int = 8,
) -> tuple[float, float]:
    """Estimate (C, A) over the recorded points of both trajectories.

    C: max perturbation-gradient norm per unit eps (the eps-derivative of
    the per-step loss is linear, so this is the Lipschitz constant in eps
    on the visited set). A: max spectral norm of the per-step perturbed
    Hessian; dense eig for small models, otherwise power iteration
    warm-started along the trajectory. Both are maxima over visited
    points, which is what the bound consumes.
    """
    w = pair.eps
    e_abs = float(np.max(np.abs(w)))
    n = spec.num_params
    c_best = 0.0
    a_best = 0.0
    warm = np.random.default_rng(derive_seed(0, "gronwall-power")).standard_normal(n)
    warm /= np.linalg.norm(warm)
    first = True
    for traj in (pair.base, pair.perturbed):
        for t, theta in zip(traj.steps, traj.thetas):
            if e_abs > 0.0:
                c_best = max(c_best, float(np.linalg.norm(_eps_grad(var, spec, theta, int(t), w))) / e_abs)
            hv = _perturbed_hvp(var, spec, theta, int(t), w)
            if n <= dense_dim_limit:
                cols = np.column_stack([hv(col) for col in np.eye(n)])
                a_here = float(np.abs(np.linalg.eigvalsh((cols + cols.T) / 2.0)).max())
            else:
                iters = 30 if first else power_iters
                a_here = 0.0
                for _ in range(iters):
                    hvv = hv(warm)
                    a_here = float(np.linalg.norm(hvv))
                    if a_here == 0.0:
                        break
                    warm = hvv / a_here
            a_best = max(a_best, a_here)
            first = False
    return c_best, a_best


def gronwall_bound_check(
    spec: ModelSpec,
    var: LossVariation,
    pair: PairedRun,
    c_est: float | None = None,
    a_est: float | None = None,
    rel_tol: float = 1e-9,
) -> GronwallReport:
    """Check ||theta_eps - theta_0|| <= C|eps| S_t (1 + exp(2 A S_t)) at every recorded step.

    S_t is the learning rate integrated from the pair's start (the
    divergence is zero there by construction). A step violates when the
    measured norm exceeds the bound by more than rel_tol relatively.
    """
    if c_est is None or a_est is None:
        c, a = gronwall_constants(spec, var, pair)
        c_est = c if c_est is None else c_est
        a_est = a if a_est is None else a_est
    e_abs = float(np.max(np.abs(pair.eps))) if pair.eps.size else 0.0
    s = pair.int_lr - pair.int_lr[0]
    with np.errstate(over="ignore"):
        rhs = c_est * e_abs * s * (1.0 + np.exp(2.0 * a_est * s))
    lhs = pair.divergence
    ratio = np.where(rhs > 0.0, lhs / np.where(rhs > 0.0, rhs, 1.0), np.where(lhs > 0.0, np.inf, 0.0))
    violated = lhs > rhs * (1.0 + rel_tol)
    report = GronwallReport(
        eps=e_abs,
        c_est=float(c_est),
        a_est=float(a_est),
        steps=pair.steps.copy(),
        lhs=lhs.copy(),
        rhs=rhs,
        ratio=ratio,
        violations=int(np.count_nonzero(violated)),
        max_ratio=float(ratio.max()) if ratio.size else 0.0,
        rel_tol=rel_tol,
    )
    if report.violations:
        log.warning("gronwall bound violated at %d of %d steps", report.violations, len(lhs))
    return report


def write_gronwall_csv(report: GronwallReport, path) -> None:
    """Schema: t,lhs,rhs,ratio."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "lhs", "rhs", "ratio"])
        for t, l, r, q in zip(report.steps, report.lhs, report.rhs, report.ratio):
            writer.writerow([int(t), f"{l:.17g}", f"{r:.17g}", f"{q:.17g}"])


@dataclass
class SharpnessReport:
    """Equality sequence of the discrete comparison lemma next to its bound."""

    u: np.ndarray
    bound: np.ndarray
    max_abs_gap: float
    max_rel_gap: float


def gronwall_sharpness_demo(alpha, beta, u0: float) -> SharpnessReport:
    """Build the sequence attaining u_t = alpha_t + sum_{s<t} beta_s u_s with equality.

    Returns the sequence and the closed-form bound

        alpha_T + beta_0 prod_{s=1}^{T-1}(1+beta_s) u_0
                + sum_{s=1}^{T-1} alpha_s beta_s prod_{k=s+1}^{T-1}(1+beta_k)

    evaluated at every T; the two coincide to rounding, which is the
    sharpness statement. alpha has one entry per step 0..T (alpha_0 is
    unused: u_0 is given), beta one per step 0..T-1. Negative beta breaks
    the comparison argument and is rejected.
    """
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    b = np.asarray(beta, dtype=np.float64).reshape(-1)
    if a.size < 1 or b.size != a.size - 1:
        raise BadInput(f"need len(beta) == len(alpha) - 1, got {b.size} and {a.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.isfinite(u0)):
        raise BadInput("sharpness inputs must be finite")
    if np.any(b < 0.0):
        raise BadInput("beta must be nonnegative")
    horizon = a.size - 1
    u = np.empty(horizon + 1)
    u[0] = float(u0)
    for t in range(1, horizon + 1):
        u[t] = a[t] + float(np.dot(b[:t], u[:t]))
    bound = np.empty(horizon + 1)
    bound[0] = float(u0)
    for t in range(1, horizon + 1):
        # suffix[j] = prod_{k=j}^{t-1} (1 + beta_k), suffix[t] = 1
        suffix = np.empty(t + 1)
        suffix[t] = 1.0
        for j in range(t - 1, 0, -1):
            suffix[j] = suffix[j + 1] * (1.0 + b[j])
        total = a[t] + b[0] * suffix[1] * u0
        for s in range(1, t):
            total += a[s] * b[s] * suffix[s + 1]
        bound[t] = total
    gap = float(np.max(np.abs(u - bound)))
    scale = float(np.max(np.abs(bound)))
    return SharpnessReport(
        u=u,
        bound=bound,
        max_abs_gap=gap,
        max_rel_gap=gap / scale if scale > 0.0 else gap,
    )


# ---------------------------------------------------------------------------
# first-order validity


@dataclass
class FirstOrderRow:
    """Residual of the linear prediction at one training horizon."""

    T: int
    eps: np.ndarray
    residual: np.ndarray
    const: np.ndarray          # residual / eps^2, entrywise
    slope: float | None        # log-log fit of residual against eps
    intercept: float | None
    r2: float | None
    exact_zero: bool

    @property
    def const_at_min_eps(self) -> float:
        return float(self.const[int(np.argmin(np.abs(self.eps)))])


def first_order_validity(
    spec: ModelSpec,
    checkpoint,
    var: LossVariation,
    lr: LRSchedule,
    eps_grid,
    t_grid,
    direction=None,
    zero_floor: float = 1e-12,
) -> list[FirstOrderRow]:
    """Residual ||theta_{eps u, T} - theta_{0, T} - eps (u . J_T)|| over eps and T.

    J_T is the exact eps-jacobian of the discrete training map; u is the
    direction in eps-space (default: all-ones). On curvature-free fixtures
    the map is affine in eps and the residual vanishes to rounding; such
    rows are flagged exact_zero with no log-log fit. Otherwise the fitted
    slope sits near 2 and residual/eps^2 estimates the curvature constant,
    reported per (eps, T) plus as const_at_min_eps.
    """
    theta0, start = _start_point(checkpoint)
    u = np.ones(var.num_terms) if direction is None else np.asarray(direction, dtype=np.float64)
    if u.shape != (var.num_terms,):
        raise BadConfig(f"direction has shape {u.shape}, variation has {var.num_terms} terms")
    eps_arr = np.asarray(list(eps_grid), dtype=np.float64)
    if np.any(eps_arr == 0.0):
        raise BadConfig("eps grid must exclude 0 (the residual is identically zero there)")
    rows = []
    for T in t_grid:
        T = int(T)
        base = train(spec, var, np.zeros(var.num_terms), theta0, lr, start + T, 1, start)
        jac = exact_eps_jacobian(spec, var, base, lr)
        dtheta = u @ jac.matrix
        final0 = base.final_theta
        residual = np.empty(eps_arr.size)
        for i, e in enumerate(eps_arr):
            pert = train(spec, var, e * u, theta0, lr, start + T, start + T if T else 1, start)
            residual[i] = float(np.linalg.norm(pert.final_theta - final0 - e * dtheta))
        const = residual / eps_arr**2
        if np.all(residual <= zero_floor):
            slope = intercept = r2 = None
            exact = True
        else:
            keep = residual > 0.0
            if keep.sum() >= 3:
                slope, intercept, r2 = numkit.linfit(np.log(np.abs(eps_arr[keep])), np.log(residual[keep]))
            else:
                slope = intercept = r2 = None
            exact = False
        rows.append(
            FirstOrderRow(
                T=T,
                eps=eps_arr.copy(),
                residual=residual,
                const=const,
                slope=slope,
                intercept=intercept,
                r2=r2,
                exact_zero=exact,
            )
        )
        log.info("first-order T=%d: slope=%s max residual %g", T, slope, residual.max())
    return rows


def write_first_order_csv(rows, path) -> None:
    """Schema: T,eps,residual,const."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["T", "eps", "residual", "const"])
        for row in rows:
            for e, r, c in zip(row.eps, row.residual, row.const):
                writer.writerow([row.T, f"{e:.17g}", f"{r:.17g}", f"{c:.17g}"])


# ---------------------------------------------------------------------------
# influence fading


@dataclass(frozen=True)
class FadingProtocol:
    """Probe counts and perturbation for the fading measurement."""

    n_train_probes: int = 32
    n_test_probes: int = 16
    eps: float = -0.01
    repeats: int = 9
    horizon: int = 200
    record_every: int = 1

    def __post_init__(self):
        if self.n_train_probes < 1 or self.n_test_probes < 1:
            raise BadConfig("probe counts must be positive")
        if self.repeats < 1 or self.horizon < 1:
            raise BadConfig("repeats and horizon must be positive")
        if self.eps == 0.0:
            raise BadConfig("fading needs a nonzero eps")


@dataclass
class RepeatMeasurement:
    """One repeat: probe choice, base run, and measured per-step loss deltas."""

    index: int
    train_probes: np.ndarray
    test_probes: np.ndarray
    var: LossVariation
    base: Trajectory
    steps: np.ndarray
    delta: np.ndarray  # (n_recorded, n_test_probes, n_train_probes)


@dataclass
class FadingMeasurement:
    protocol: FadingProtocol
    checkpoint_step: int
    test_dataset: model.Dataset
    repeats: list[RepeatMeasurement] = field(default_factory=list)


@dataclass
class FadingResult:
    """R(t) per repeat and aggregated; NaN marks degenerate (missing) entries."""

    method: str
    steps: np.ndarray
    per_repeat: np.ndarray  # (repeats, n_recorded)
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray


def _disjoint_blocks(n: int, count: int, repeats: int, rng) -> list[np.ndarray]:
    """Seeded probe sets, disjoint across repeats until the pool runs out."""
    if count > n:
        raise BadConfig(f"cannot draw {count} probes from a pool of {n}")
    picks = []
    perm, pos = rng.permutation(n), 0
    for _ in range(repeats):
        if pos + count > n:
            perm, pos = rng.permutation(n), 0
        picks.append(np.sort(perm[pos : pos + count]))
        pos += count
    return picks


def fading_measure(
    spec: ModelSpec,
    checkpoint,
    splits: DataSplits,
    schedule: BatchSchedule,
    lr: LRSchedule,
    protocol: FadingProtocol = FadingProtocol(),
    seed: int = 0,
) -> FadingMeasurement:
    """Measured l_z(theta_{eps e_q, t}) - l_z(theta_{0, t}) for every probe pair.

    Each repeat draws train probes from the schedule's dataset and test
    probes from the test split (seeded, disjoint across repeats while the
    pool lasts), runs the base trajectory once, then one retraining per
    train probe with eps on that probe's singleton term only.
    """
    theta0, start = _start_point(checkpoint)
    test_ds = splits.get("test")
    rng_train = np.random.default_rng(derive_seed(seed, "fading", "train-probes"))
    rng_test = np.random.default_rng(derive_seed(seed, "fading", "test-probes"))
    train_sets = _disjoint_blocks(len(schedule.dataset), protocol.n_train_probes, protocol.repeats, rng_train)
    test_sets = _disjoint_blocks(len(test_ds), protocol.n_test_probes, protocol.repeats, rng_test)
    out = FadingMeasurement(protocol=protocol, checkpoint_step=start, test_dataset=test_ds)
    for r in range(protocol.repeats):
        var = per_example_variation(schedule, train_sets[r], var_id=f"fading-repeat-{r}")
        q_count = var.num_terms
        test_batch = test_ds.batch(test_sets[r])
        base = train(
            spec, var, np.zeros(q_count), theta0, lr,
            start + protocol.horizon, protocol.record_every, start,
        )
        base_losses = np.stack([
            model.example_losses(spec, th, test_batch) for th in base.thetas
        ])
        delta = np.empty((len(base.steps), protocol.n_test_probes, q_count))
        for q in range(q_count):
            w = np.zeros(q_count)
            w[q] = protocol.eps
            pert = train(
                spec, var, w, theta0, lr,
                start + protocol.horizon, protocol.record_every, start,
            )
            pert_losses = np.stack([
                model.example_losses(spec, th, test_batch) for th in pert.thetas
            ])
            delta[:, :, q] = pert_losses - base_losses
        out.repeats.append(
            RepeatMeasurement(
                index=r,
                train_probes=train_sets[r],
                test_probes=test_sets[r],
                var=var,
                base=base,
                steps=base.steps.copy(),
                delta=delta,
            )
        )
        log.info("fading repeat %d/%d measured", r + 1, protocol.repeats)
    return out


def fading_correlate(measurement: FadingMeasurement, scores_by_repeat, method: str) -> FadingResult:
    """R(t): Pearson between measured deltas and eps * score over all probe pairs.

    scores_by_repeat[r] is the (n_test_probes, n_train_probes) per-unit-eps
    score matrix for repeat r. Steps where either side is (numerically)
    constant have no defined correlation and are recorded as NaN; the
    per-step aggregate is the mean with a 95% t-interval over the repeats
    that produced a value (CI needs at least two).
    """
    proto = measurement.protocol
    if len(scores_by_repeat) != len(measurement.repeats):
        raise BadConfig("need one score matrix per repeat")
    steps = measurement.repeats[0].steps
    n_rec = len(steps)
    per = np.full((proto.repeats, n_rec), np.nan)
    for r, rep in enumerate(measurement.repeats):
        pred = (proto.eps * np.asarray(scores_by_repeat[r], dtype=np.float64)).ravel()
        for i in range(n_rec):
            measured = rep.delta[i].ravel()
            try:
                per[r, i] = numkit.pearson(measured, pred)
            except DegenerateInput:
                pass  # delta constant (e.g. at the checkpoint itself): missing
    mean = np.full(n_rec, np.nan)
    lo = np.full(n_rec, np.nan)
    hi = np.full(n_rec, np.nan)
    for i in range(n_rec):
        vals = per[:, i]
        vals = vals[np.isfinite(vals)]
        if vals.size >= 1:
            mean[i] = float(np.mean(vals))
        if vals.size >= 2:
            _, lo[i], hi[i] = numkit.mean_ci(vals, level=0.95)
    return FadingResult(method=method, steps=steps.copy(), per_repeat=per, mean=mean, ci_lo=lo, ci_hi=hi)


def fading_experiment(
    spec: ModelSpec,
    checkpoint,
    splits: DataSplits,
    schedule: BatchSchedule,
    lr: LRSchedule,
    methods=FADING_METHODS,
    protocol: FadingProtocol = FadingProtocol(),
    seed: int = 0,
    hif_damping: float = 1e-4,
    hif_tol: float = numkit.DEFAULT_TOL,
    abif_k: int = 32,
    abif_num_iters: int = 64,
    measurement: FadingMeasurement | None = None,
) -> dict[str, FadingResult]:
    """Measure once, then correlate each estimator's static scores over time.

    Scores are computed at the checkpoint parameters; the 'exact' method
    uses the eps-jacobian at the full horizon. Unknown method tags are
    rejected up front so a typo cannot silently drop an estimator.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in FADING_METHODS]
    if unknown:
        raise BadConfig(f"unknown fading methods {unknown}; choose from {FADING_METHODS}")
    if measurement is None:
        measurement = fading_measure(spec, checkpoint, splits, schedule, lr, protocol, seed)
    theta0, _ = _start_point(checkpoint)
    results: dict[str, FadingResult] = {}
    for method in methods:
        scores = []
        for rep in measurement.repeats:
            test_batch = measurement.test_dataset.batch(rep.test_probes)
            if method == "hif":
                jac = hif_param_derivative(spec, checkpoint, rep.var, damping=hif_damping, tol=hif_tol)
            elif method == "abif":
                jac = abif_param_derivative(
                    spec, checkpoint, rep.var,
                    k=abif_k, num_iters=abif_num_iters,
                    seed=derive_seed(seed, "fading", "abif"),
                )
            elif method == "tracin":
                jac = tracin_param_derivative(spec, [checkpoint], rep.var)
            else:  # exact
                base = rep.base
                if not np.array_equal(base.steps, np.arange(base.steps[0], base.steps[-1] + 1)):
                    # recurrence needs every step; rerun the (deterministic) base densely
                    base = train(
                        spec, rep.var, np.zeros(rep.var.num_terms), theta0, lr,
                        int(base.steps[-1]), 1, int(base.steps[0]),
                    )
                jac = exact_eps_jacobian(spec, rep.var, base, lr)
            scores.append(influence_score(jac, spec, theta0, test_batch).scores)
        results[method] = fading_correlate(measurement, scores, method)
        log.info("fading method %s correlated", method)
    return results


def write_fading_csv(results: dict, path) -> None:
    """Schema: method,repeat,t,R. Degenerate (missing) entries are omitted."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "repeat", "t", "R"])
        for method in sorted(results):
            res = results[method]
            for r in range(res.per_repeat.shape[0]):
                for i, t in enumerate(res.steps):
                    val = res.per_repeat[r, i]
                    if np.isfinite(val):
                        writer.writerow([method, r, int(t), f"{val:.17g}"])


def write_fading_aggregate_csv(results: dict, path) -> None:
    """Schema: method,t,mean_R,ci_lo,ci_hi. Steps without a CI are omitted."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "t", "mean_R", "ci_lo", "ci_hi"])
        for method in sorted(results):
            res = results[method]
            for i, t in enumerate(res.steps):
                if np.isfinite(res.mean[i]) and np.isfinite(res.ci_lo[i]):
                    writer.writerow([
                        method, int(t),
                        f"{res.mean[i]:.17g}", f"{res.ci_lo[i]:.17g}", f"{res.ci_hi[i]:.17g}",
                    ])
