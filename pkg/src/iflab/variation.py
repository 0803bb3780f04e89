"""Loss variations: base batch loss plus eps-weighted perturbation terms.

A variation evaluates, at training step t,

    L_t(theta, eps) = loss(B_t, theta) + sum_q eps_q * data_loss(S_q, theta)

where each S_q is a fixed set of train indices whose labels may be
overridden (relabeled proponents). The perturbation terms are means of
pure data losses: regularization lives in the base loss only, so the
mixed second derivative in (eps, theta) is independent of l2_reg. The
variation is exactly linear in eps, and at eps=0 the perturbation sum is
skipped entirely so the base loss is reproduced bit for bit.

An optional per-step mask restricts a term to chosen steps, modeling a
variation that differs from the base loss only at specific times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import model as mops
from .errors import BadConfig, BadInput
from .model import Batch, ModelSpec

if TYPE_CHECKING:
    from .trainer import BatchSchedule


@dataclass(frozen=True)
class PerturbationTerm:
    """Index set S_q with optional index->label overrides."""

    indices: tuple[int, ...]
    label_overrides: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise BadConfig("perturbation term needs at least one index")
        if len(set(idx)) != len(idx):
            raise BadConfig("perturbation term indices must be unique")
        object.__setattr__(self, "indices", idx)
        over = {int(k): int(v) for k, v in dict(self.label_overrides).items()}
        if not set(over) <= set(idx):
            raise BadConfig("label overrides must refer to the term's own indices")
        object.__setattr__(self, "label_overrides", over)


@dataclass(frozen=True)
class Epsilon:
    """Perturbation weights, one per term; negative values down-sample."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise BadInput("epsilon weights must be finite")
        object.__setattr__(self, "weights", w)

    @staticmethod
    def zeros(q: int) -> "Epsilon":
        return Epsilon(np.zeros(q))


def as_eps(eps, q: int) -> np.ndarray:
    w = eps.weights if isinstance(eps, Epsilon) else np.asarray(eps, dtype=np.float64).reshape(-1)
    if w.shape != (q,):
        raise BadInput(f"epsilon has dim {w.shape[0] if w.ndim else 1}, variation has {q} terms")
    if not np.all(np.isfinite(w)):
        raise BadInput("epsilon weights must be finite")
    return w


class LossVariation:
    """Base schedule plus Q perturbation terms (with optional step mask)."""

    def __init__(
        self,
        base_schedule: "BatchSchedule",
        terms: Sequence[PerturbationTerm] = (),
        per_step_mask: Sequence[Sequence[int] | None] | None = None,
        var_id: str = "",
    ):
        self.base_schedule = base_schedule
        self.terms = tuple(terms)
        self.var_id = var_id
        ds = base_schedule.dataset
        for term in self.terms:
            if max(term.indices) >= len(ds) or min(term.indices) < 0:
                raise BadConfig(f"term indices out of range for dataset of size {len(ds)}")
            for lab in term.label_overrides.values():
                if not (0 <= lab < ds.num_classes):
                    raise BadConfig(f"override label {lab} outside [0, {ds.num_classes})")
        if per_step_mask is None:
            self.per_step_mask = None
        else:
            if len(per_step_mask) != len(self.terms):
                raise BadConfig("per_step_mask must have one entry per term")
            self.per_step_mask = tuple(
                None if m is None else frozenset(int(s) for s in m) for m in per_step_mask
            )
        self._term_batches = [self._build_term_batch(t) for t in self.terms]

    def _build_term_batch(self, term: PerturbationTerm) -> Batch:
        ds = self.base_schedule.dataset
        idx = np.asarray(term.indices, dtype=np.int64)
        y = ds.y[idx].copy()
        for pos, i in enumerate(term.indices):
            if i in term.label_overrides:
                y[pos] = term.label_overrides[i]
        return Batch(ds.X[idx], y)

    @property
    def num_terms(self) -> int:
        return len(self.terms)

    def term_batch(self, q: int) -> Batch:
        return self._term_batches[q]

    def active(self, q: int, t: int | None) -> bool:
        if t is None or self.per_step_mask is None or self.per_step_mask[q] is None:
            return True
        return t in self.per_step_mask[q]


def plain_variation(base_schedule: "BatchSchedule", var_id: str = "base") -> LossVariation:
    return LossVariation(base_schedule, (), var_id=var_id)


def per_example_variation(base_schedule: "BatchSchedule", indices, var_id: str = "per-example") -> LossVariation:
    """One singleton term per train index: the Q = n_probes scoring layout."""
    return LossVariation(
        base_schedule,
        [PerturbationTerm((int(i),)) for i in indices],
        var_id=var_id,
    )


def perturbed_loss(var: LossVariation, spec: ModelSpec, theta: np.ndarray, t: int, eps) -> float:
    """L_t(theta, eps); bitwise equal to the base batch loss at eps=0."""
    w = as_eps(eps, var.num_terms)
    out = mops.loss(spec, theta, var.base_schedule.batch(t))
    for q in range(var.num_terms):
        if w[q] != 0.0 and var.active(q, t):
            out += w[q] * mops.data_loss(spec, theta, var.term_batch(q))
    return out


def perturbed_grad(var: LossVariation, spec: ModelSpec, theta: np.ndarray, t: int, eps) -> np.ndarray:
    """Gradient in theta of perturbed_loss; linear in eps."""
    w = as_eps(eps, var.num_terms)
    out = mops.grad(spec, theta, var.base_schedule.batch(t))
    for q in range(var.num_terms):
        if w[q] != 0.0 and var.active(q, t):
            out = out + w[q] * mops.data_grad(spec, theta, var.term_batch(q))
    return out


def mixed_second(var: LossVariation, spec: ModelSpec, theta: np.ndarray, t: int | None = None) -> np.ndarray:
    """Q x N mixed second derivative in (eps, theta): row q = grad of term q.

    Exact because the variation is linear in eps. Rows of terms inactive
    at step t are zero; t=None treats every term as active.
    """
    rows = np.zeros((var.num_terms, spec.num_params))
    for q in range(var.num_terms):
        if var.active(q, t):
            rows[q] = mops.data_grad(spec, theta, var.term_batch(q))
    return rows


def variation_to_json(var: LossVariation) -> str:
    payload = {
        "terms": [
            {
                "indices": list(term.indices),
                "overrides": {str(k): v for k, v in sorted(term.label_overrides.items())},
            }
            for term in var.terms
        ],
        "per_step_mask": None
        if var.per_step_mask is None
        else [sorted(m) if m is not None else None for m in var.per_step_mask],
        "var_id": var.var_id,
    }
    return json.dumps(payload, sort_keys=True)


def variation_from_json(text: str, base_schedule: "BatchSchedule") -> LossVariation:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BadInput(f"malformed variation descriptor: {exc}") from exc
    terms = [
        PerturbationTerm(
            tuple(entry["indices"]),
            {int(k): int(v) for k, v in entry.get("overrides", {}).items()},
        )
        for entry in payload.get("terms", [])
    ]
    return LossVariation(
        base_schedule,
        terms,
        per_step_mask=payload.get("per_step_mask"),
        var_id=payload.get("var_id", ""),
    )
