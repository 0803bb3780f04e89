"""Deterministic SGD over fixed batch schedules.

The batch order is a pure function of (seed, dataset size, batch_size):
epoch e is the permutation drawn from a generator seeded with [seed, e],
chopped into consecutive batches. The order for steps < T is therefore
independent of T, which is what makes checkpoint resume bit-identical to
an uninterrupted run.

Training is plain SGD on a loss variation:

    theta_{t+1} = theta_t - eta_t * grad_theta L_t(theta_t, eps)

with no momentum or optimizer state, so paired runs (same schedule,
different eps) differ only through the eps terms.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as mops
from .errors import BadConfig, BadInput, MissingArtifact, NonFiniteError
from .model import Batch, Dataset, ModelSpec
from .variation import LossVariation, as_eps, perturbed_grad, plain_variation

CHECKPOINT_MAGIC = b"IFLB"
CHECKPOINT_VERSION = 1


@dataclass
class BatchSchedule:
    """Precomputed index batches B_t for t in [0, t_max)."""

    dataset: Dataset
    batch_size: int
    t_max: int
    seed: int
    _epoch_perms: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.t_max < 0:
            raise BadConfig("t_max must be >= 0")
        if len(self.dataset) == 0:
            raise BadConfig("cannot schedule over an empty dataset")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.dataset) / self.batch_size))

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._epoch_perms:
            rng = np.random.default_rng([self.seed, epoch])
            self._epoch_perms[epoch] = rng.permutation(len(self.dataset))
        return self._epoch_perms[epoch]

    def indices_at(self, t: int) -> np.ndarray:
        if not (0 <= t < self.t_max):
            raise BadInput(f"step {t} outside schedule of length {self.t_max}")
        epoch, slot = divmod(t, self.steps_per_epoch)
        perm = self._perm(epoch)
        return perm[slot * self.batch_size:(slot + 1) * self.batch_size]

    def batch(self, t: int) -> Batch:
        return self.dataset.batch(self.indices_at(t))


def make_batch_schedule(dataset: Dataset, batch_size: int, t_max: int, seed: int) -> BatchSchedule:
    return BatchSchedule(dataset, batch_size, t_max, seed)


@dataclass(frozen=True)
class LRSchedule:
    """eta_t for t < total_steps; constant, or cosine decay toward 0."""

    kind: str
    base_rate: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise BadConfig(f"unknown lr schedule kind {self.kind!r}")
        if self.base_rate <= 0:
            raise BadConfig("base_rate must be positive")
        if self.total_steps < 1:
            raise BadConfig("total_steps must be >= 1")

    def rate(self, t: int) -> float:
        if not (0 <= t < self.total_steps):
            raise BadInput(f"step {t} outside lr schedule of length {self.total_steps}")
        if self.kind == "constant":
            return self.base_rate
        return self.base_rate * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))

    def integrated(self, upto: int) -> np.ndarray:
        """Array c with c[t] = sum_{s<t} eta_s for t in [0, upto]."""
        etas = np.array([self.rate(t) for t in range(upto)])
        return np.concatenate([[0.0], np.cumsum(etas)])


@dataclass
class Trajectory:
    """Recorded SGD path: theta at selected steps plus the lr bookkeeping."""

    steps: np.ndarray            # recorded step indices, ascending
    thetas: list                 # parameter vectors aligned with steps
    etas: np.ndarray             # eta_t for every executed step
    int_lr: np.ndarray           # sum_{s<t} eta_s at each recorded step
    eps: np.ndarray
    var_id: str = ""

    def theta_at(self, t: int) -> np.ndarray:
        pos = np.searchsorted(self.steps, t)
        if pos >= len(self.steps) or self.steps[pos] != t:
            raise BadInput(f"step {t} was not recorded")
        return self.thetas[pos]

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def final_step(self) -> int:
        return int(self.steps[-1])


def train(
    spec: ModelSpec,
    var: LossVariation,
    eps,
    theta_init: np.ndarray,
    lr: LRSchedule,
    T: int,
    record_every: int = 1,
    start_step: int = 0,
) -> Trajectory:
    """Run SGD from start_step to T on the variation at the given eps.

    Records theta at start_step, every record_every-th step (by absolute
    step count), and at T. Raises NonFiniteError naming the failing step
    if an update leaves the finite range.
    """
    if not (0 <= start_step <= T <= var.base_schedule.t_max):
        raise BadConfig(f"need 0 <= start {start_step} <= T {T} <= schedule {var.base_schedule.t_max}")
    if T > lr.total_steps:
        raise BadConfig(f"T={T} exceeds lr schedule length {lr.total_steps}")
    if record_every < 1:
        raise BadConfig("record_every must be >= 1")
    w = as_eps(eps, var.num_terms)
    theta = np.array(theta_init, dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise BadConfig(f"theta_init has shape {theta.shape}, model needs ({spec.num_params},)")

    steps = [start_step]
    thetas = [theta.copy()]
    etas = []
    for t in range(start_step, T):
        eta = lr.rate(t)
        try:
            g = perturbed_grad(var, spec, theta, t, w)
        except NonFiniteError as exc:
            raise NonFiniteError(
                f"gradient non-finite at step {t}; last finite parameters at step {t}"
            ) from exc
        theta = theta - eta * g
        etas.append(eta)
        if not np.all(np.isfinite(theta)):
            raise NonFiniteError(
                f"parameters non-finite after step {t}; last finite parameters at step {t}"
            )
        if (t + 1) % record_every == 0 or (t + 1) == T:
            steps.append(t + 1)
            thetas.append(theta.copy())

    full = lr.integrated(T)
    step_arr = np.asarray(steps, dtype=np.int64)
    return Trajectory(
        steps=step_arr,
        thetas=thetas,
        etas=np.asarray(etas),
        int_lr=full[step_arr],
        eps=w.copy(),
        var_id=var.var_id,
    )


@dataclass
class Checkpoint:
    """Snapshot sufficient to continue training bit-identically."""

    theta: np.ndarray
    step: int
    spec_digest: str
    schedule_seed: int
    batch_size: int
    extra: dict = field(default_factory=dict)


def checkpoint_from(traj: Trajectory, spec: ModelSpec, schedule: BatchSchedule, step: int | None = None) -> Checkpoint:
    t = traj.final_step if step is None else step
    return Checkpoint(
        theta=traj.theta_at(t).copy(),
        step=t,
        spec_digest=spec.digest(),
        schedule_seed=schedule.seed,
        batch_size=schedule.batch_size,
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Binary layout: magic, version u32, N u64, N little-endian f64, metadata JSON."""
    meta = {
        "step": int(ck.step),
        "spec_digest": ck.spec_digest,
        "schedule_seed": int(ck.schedule_seed),
        "batch_size": int(ck.batch_size),
        "extra": ck.extra,
    }
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(ck.theta))
        + np.ascontiguousarray(ck.theta, dtype="<f8").tobytes()
        + json.dumps(meta, sort_keys=True).encode("utf-8")
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise MissingArtifact(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < head or raw[:4] != CHECKPOINT_MAGIC:
        raise BadInput(f"{path} is not a checkpoint file")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise BadInput(f"unsupported checkpoint version {version}")
    n = struct.unpack_from("<Q", raw, 8)[0]
    body = head + 8 * n
    theta = np.frombuffer(raw[head:body], dtype="<f8").astype(np.float64)
    if len(theta) != n:
        raise BadInput(f"checkpoint {path} truncated")
    meta = json.loads(raw[body:].decode("utf-8"))
    return Checkpoint(
        theta=theta,
        step=meta["step"],
        spec_digest=meta["spec_digest"],
        schedule_seed=meta["schedule_seed"],
        batch_size=meta["batch_size"],
        extra=meta.get("extra", {}),
    )


@dataclass
class PairedRun:
    """Aligned eps-on / eps-off trajectories plus their divergence series."""

    steps: np.ndarray
    int_lr: np.ndarray
    divergence: np.ndarray
    base: Trajectory
    perturbed: Trajectory
    eps: np.ndarray


def paired_divergence(
    spec: ModelSpec,
    var: LossVariation,
    eps,
    theta_init: np.ndarray,
    lr: LRSchedule,
    T: int,
    record_every: int = 1,
    start_step: int = 0,
) -> PairedRun:
    """Train with eps=0 and with eps on the identical schedule; measure ||theta_eps - theta_0||."""
    w = as_eps(eps, var.num_terms)
    base = train(spec, var, np.zeros_like(w), theta_init, lr, T, record_every, start_step)
    pert = train(spec, var, w, theta_init, lr, T, record_every, start_step)
    div = np.array([
        np.linalg.norm(a - b) for a, b in zip(pert.thetas, base.thetas)
    ])
    return PairedRun(
        steps=base.steps.copy(),
        int_lr=base.int_lr.copy(),
        divergence=div,
        base=base,
        perturbed=pert,
        eps=w.copy(),
    )
