"""Few-step misprediction correction.

A mispredicted test point z is attacked by fine-tuning on the perturbed
loss L_{B_t} + eps * l_B where B is, per method:

  * proponents: the top-k proponents of z, relabeled to z's true label;
  * opponents: the top-k opponents of z, labels unchanged;
  * random-baseline: k seeded train points whose label equals the
    prediction, relabeled to z's true label.

Fine-tuning continues the base batch schedule from the checkpoint
position (deterministic), checks the prediction on z after every step,
and stops at the first success or at max_steps. Retention is measured
against the checkpoint's predictions on a fixed held-out probe set.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import AlreadyCorrect, BadConfig, BadInput, InsufficientPool
from .influence import InfluenceMatrix, hif_param_derivative, influence_score, rank
from .model import Batch, DataSplits, ModelSpec
from .seeds import derive_seed
from .trainer import BatchSchedule, Checkpoint
from .variation import LossVariation, PerturbationTerm, per_example_variation, perturbed_grad

log = logging.getLogger(__name__)

CORRECTION_METHODS = ("proponents", "opponents", "random-baseline")


@dataclass(frozen=True)
class CorrectionJob:
    """One misprediction to fix: the point, the labels, and the recipe."""

    test_id: int
    x: np.ndarray
    true_label: int
    predicted_label: int
    method: str
    k: int = 50
    eps: float = 0.0
    max_steps: int = 50
    lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).reshape(-1))
        if not np.all(np.isfinite(self.x)):
            raise BadInput("test point features must be finite")
        if self.method not in CORRECTION_METHODS:
            raise BadConfig(f"method must be one of {CORRECTION_METHODS}, got {self.method!r}")
        if self.predicted_label == self.true_label:
            raise BadConfig("job requires a misprediction: predicted equals true label")
        if self.k < 1 or self.max_steps < 1:
            raise BadConfig("k and max_steps must be positive")
        if not (self.eps >= 0.0 and np.isfinite(self.eps)):
            raise BadConfig("eps must be a nonnegative finite real")
        if not (self.lr >= 0.0 and np.isfinite(self.lr)):
            raise BadConfig("lr must be a nonnegative finite real")


@dataclass
class CorrectionOutcome:
    """Result of one fine-tuning attempt."""

    job: CorrectionJob
    success: bool
    steps_taken: int
    retention: float
    prediction_trace: np.ndarray  # prediction on z after 0..steps_taken steps


def eps_batch_fraction(eps: float, k: int, batch_size: int) -> float:
    """Effective fraction of the fine-tuning batch the eps-weighted term represents."""
    return (k * eps) / (batch_size + k * eps) if eps > 0.0 else 0.0


def build_correction_variation(
    job: CorrectionJob,
    scores: InfluenceMatrix | None,
    schedule: BatchSchedule,
    seed: int = 0,
) -> LossVariation:
    """Q=1 variation whose single term is the method's correction set B.

    Score-based methods read the job's row of the score matrix; the
    baseline samples k train points labeled like the prediction (seeded)
    and falls back to all available when the pool is short, raising
    InsufficientPool only when it is empty.
    """
    ds = schedule.dataset
    if job.method == "random-baseline":
        pool = np.flatnonzero(ds.y == job.predicted_label)
        if pool.size == 0:
            raise InsufficientPool(
                f"no train points labeled {job.predicted_label} for the baseline", available=pool
            )
        take = min(job.k, pool.size)
        if take < job.k:
            log.warning(
                "baseline pool has %d points labeled %d, job wants %d: using all",
                pool.size, job.predicted_label, job.k,
            )
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(pool, size=take, replace=False))
        overrides = {int(i): job.true_label for i in chosen}
    else:
        if scores is None:
            raise BadConfig(f"method {job.method} needs an influence score matrix")
        row = np.flatnonzero(scores.test_ids == job.test_id)
        if row.size != 1:
            raise BadInput(f"test id {job.test_id} not present (once) in the score matrix")
        ranking = rank(scores, int(row[0]), job.k)
        if job.method == "proponents":
            chosen = np.sort(ranking.proponents)
            overrides = {int(i): job.true_label for i in chosen}
        else:
            chosen = np.sort(ranking.opponents)
            overrides = {}
    term = PerturbationTerm(tuple(int(i) for i in chosen), overrides)
    return LossVariation(schedule, (term,), var_id=f"correction-{job.method}-{job.test_id}-n{len(chosen)}")


def run_correction(
    spec: ModelSpec,
    checkpoint: Checkpoint,
    job: CorrectionJob,
    variation: LossVariation,
    heldout_probe: Batch,
) -> CorrectionOutcome:
    """Fine-tune until z flips to its true label, up to max_steps.

    Continues the variation's batch schedule from the checkpoint step at
    constant lr; stops at the first correct prediction (retention is then
    measured at the stopping parameters) or at the cap.
    """
    schedule = variation.base_schedule
    if variation.num_terms != 1:
        raise BadConfig("correction variation must have exactly one term")
    if checkpoint.step + job.max_steps > schedule.t_max:
        raise BadConfig(
            f"schedule covers {schedule.t_max} steps, correction needs {checkpoint.step + job.max_steps}"
        )
    theta = np.array(checkpoint.theta, dtype=np.float64)
    zx = job.x[None, :]
    pred0 = int(model.predict(spec, theta, zx)[0])
    if pred0 == job.true_label:
        raise AlreadyCorrect(f"test point {job.test_id} already predicts {pred0}")
    probe_preds0 = model.predict(spec, theta, heldout_probe.X)
    w = np.array([job.eps])
    trace = [pred0]
    success = False
    steps_taken = job.max_steps
    for s in range(1, job.max_steps + 1):
        t = checkpoint.step + s - 1
        theta = theta - job.lr * perturbed_grad(variation, spec, theta, t, w)
        pred = int(model.predict(spec, theta, zx)[0])
        trace.append(pred)
        if pred == job.true_label:
            success = True
            steps_taken = s
            break
    retention = float(np.mean(model.predict(spec, theta, heldout_probe.X) == probe_preds0))
    return CorrectionOutcome(
        job=job,
        success=success,
        steps_taken=steps_taken,
        retention=retention,
        prediction_trace=np.asarray(trace, dtype=np.int64),
    )


@dataclass
class CampaignCell:
    """Aggregates for one (method, eps) grid point."""

    method: str
    eps_raw: float
    eps_frac: float
    success_rate: float
    mean_steps: float     # among successes; NaN when none
    median_steps: float
    mean_retention: float
    n_jobs: int


@dataclass
class CampaignReport:
    cells: list[CampaignCell]
    outcomes: dict  # (method, eps_raw) -> list[CorrectionOutcome]
    test_ids: np.ndarray
    retention_probes: np.ndarray
    batch_size: int
    k: int
    opponents_label_match: float | None = None
    extra: dict = field(default_factory=dict)


def _summarize(method: str, eps_raw: float, eps_frac: float, outs: list) -> CampaignCell:
    succ = np.array([o.success for o in outs], dtype=bool)
    steps = np.array([o.steps_taken for o in outs], dtype=np.float64)
    retention = np.array([o.retention for o in outs], dtype=np.float64)
    win = steps[succ]
    return CampaignCell(
        method=method,
        eps_raw=eps_raw,
        eps_frac=eps_frac,
        success_rate=float(succ.mean()) if outs else float("nan"),
        mean_steps=float(win.mean()) if win.size else float("nan"),
        median_steps=float(np.median(win)) if win.size else float("nan"),
        mean_retention=float(retention.mean()) if outs else float("nan"),
        n_jobs=len(outs),
    )


def correction_campaign(
    spec: ModelSpec,
    checkpoint: Checkpoint,
    splits: DataSplits,
    schedule: BatchSchedule,
    eps_grid,
    methods=CORRECTION_METHODS,
    seed: int = 0,
    k: int = 50,
    max_steps: int = 50,
    lr: float = 1e-3,
    n_retention_probes: int = 50,
    max_jobs: int | None = None,
    scores: InfluenceMatrix | None = None,
    hif_damping: float = 1e-4,
) -> CampaignReport:
    """Correct every misprediction at the checkpoint, per method and eps.

    The job set is all mispredicted test points (optionally a seeded
    subset of max_jobs). Scores default to the inverse-Hessian estimator
    over all train points at the checkpoint. Retention probes come from
    the heldout split, drawn once and shared by every cell. The report
    also carries the fraction of retrieved opponents whose label already
    equals the target, a diagnostic for why opponents-tuning lags.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in CORRECTION_METHODS]
    if unknown:
        raise BadConfig(f"unknown correction methods {unknown}; choose from {CORRECTION_METHODS}")
    test_ds = splits.get("test")
    heldout_ds = splits.get("heldout")
    theta = np.asarray(checkpoint.theta, dtype=np.float64)

    preds = model.predict(spec, theta, test_ds.X)
    mispredicted = np.flatnonzero(preds != test_ds.y)
    if max_jobs is not None and mispredicted.size > max_jobs:
        rng = np.random.default_rng(derive_seed(seed, "correction-jobs"))
        mispredicted = np.sort(rng.choice(mispredicted, size=max_jobs, replace=False))
    log.info("correction campaign: %d mispredictions, %d methods, %d eps values",
             mispredicted.size, len(methods), len(list(eps_grid)))

    probe_rng = np.random.default_rng(derive_seed(seed, "retention-probes"))
    n_probe = min(n_retention_probes, len(heldout_ds))
    retention_probes = np.sort(probe_rng.choice(len(heldout_ds), size=n_probe, replace=False))
    heldout_probe = heldout_ds.batch(retention_probes)

    if mispredicted.size == 0:
        return CampaignReport(
            cells=[], outcomes={}, test_ids=mispredicted,
            retention_probes=retention_probes, batch_size=schedule.batch_size, k=k,
        )

    need_scores = any(m != "random-baseline" for m in methods)
    if need_scores and scores is None and mispredicted.size:
        var_all = per_example_variation(schedule, range(len(schedule.dataset)), var_id="correction-scores")
        jac = hif_param_derivative(spec, checkpoint, var_all, damping=hif_damping)
        scores = influence_score(
            jac, spec, checkpoint, test_ds.batch(mispredicted), test_ids=mispredicted,
        )

    outcomes: dict = {}
    cells: list[CampaignCell] = []
    opp_matches: list[float] = []
    eps_grid = [float(e) for e in eps_grid]
    for method in methods:
        for eps in eps_grid:
            outs = []
            for tid in mispredicted:
                job = CorrectionJob(
                    test_id=int(tid),
                    x=test_ds.X[tid],
                    true_label=int(test_ds.y[tid]),
                    predicted_label=int(preds[tid]),
                    method=method,
                    k=k,
                    eps=eps,
                    max_steps=max_steps,
                    lr=lr,
                )
                var = build_correction_variation(
                    job, scores, schedule, seed=derive_seed(seed, "baseline-pool", int(tid)),
                )
                if method == "opponents" and eps == eps_grid[0]:
                    labels = schedule.dataset.y[list(var.terms[0].indices)]
                    opp_matches.append(float(np.mean(labels == job.true_label)))
                outs.append(run_correction(spec, checkpoint, job, var, heldout_probe))
            outcomes[(method, eps)] = outs
            cells.append(_summarize(method, eps, eps_batch_fraction(eps, k, schedule.batch_size), outs))
    return CampaignReport(
        cells=cells,
        outcomes=outcomes,
        test_ids=mispredicted,
        retention_probes=retention_probes,
        batch_size=schedule.batch_size,
        k=k,
        opponents_label_match=float(np.mean(opp_matches)) if opp_matches else None,
    )


def write_correction_outcomes_csv(report: CampaignReport, path) -> None:
    """Schema: method,eps,test_id,success,steps,retention. eps is the batch fraction."""
    frac = {(c.method, c.eps_raw): c.eps_frac for c in report.cells}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "eps", "test_id", "success", "steps", "retention"])
        for (method, eps_raw), outs in report.outcomes.items():
            for o in outs:
                writer.writerow([
                    method, f"{frac[(method, eps_raw)]:.17g}", o.job.test_id,
                    int(o.success), o.steps_taken, f"{o.retention:.17g}",
                ])


def write_correction_summary_csv(report: CampaignReport, path) -> None:
    """Schema: method,eps,success_rate,mean_steps,median_steps,mean_retention."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "eps", "success_rate", "mean_steps", "median_steps", "mean_retention"])
        for c in report.cells:
            writer.writerow([
                c.method, f"{c.eps_frac:.17g}", f"{c.success_rate:.17g}",
                f"{c.mean_steps:.17g}", f"{c.median_steps:.17g}", f"{c.mean_retention:.17g}",
            ])
