"""Command-line front end: one run directory per campaign.

    iflab <command> --out RUNDIR [--config FILE.yaml] [--seed N] [--jobs N]

Commands: gen-data, train, influence, divergence, gronwall, first-order,
fading, correct, report. Each stage reads its inputs from the run
directory, writes its artifacts there, and updates manifest.json with
the effective config, a sha256 of every input it consumed, the list of
files it emitted, and a small numeric summary. File writes go through a
temp file plus atomic rename, so an interrupted run never leaves a
half-written artifact under a final name.

The report command is a pure consumer of the delimited outputs: it
recomputes aggregates from the CSVs alone and renders quick-look figures
next to them.

Exit codes: 0 success; 2 configuration problem (bad YAML, unknown or
invalid key -- the offending key is named in the message); 3 missing or
unreadable input artifact; 1 numeric failure (e.g. non-finite update,
with the failing step in the message).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__, model
from .config import RunConfig, config_to_dict, load_config
from .correction import (
    correction_campaign,
    write_correction_outcomes_csv,
    write_correction_summary_csv,
)
from .errors import BadConfig, BadInput, IflabError, MissingArtifact, NonFiniteError
from .experiments import (
    FadingProtocol,
    divergence_experiment,
    fading_experiment,
    first_order_validity,
    gronwall_bound_check,
    gronwall_sharpness_demo,
    write_divergence_csv,
    write_fading_aggregate_csv,
    write_fading_csv,
    write_first_order_csv,
    write_gronwall_csv,
)
from .influence import (
    abif_param_derivative,
    exact_eps_jacobian,
    hif_param_derivative,
    influence_score,
    save_influence_csv,
    save_jacobian,
    tracin_param_derivative,
)
from .model import ModelSpec
from .seeds import derive_seed
from .trainer import (
    LRSchedule,
    checkpoint_from,
    load_checkpoint,
    make_batch_schedule,
    paired_divergence,
    save_checkpoint,
    train,
)
from .variation import LossVariation, PerturbationTerm, per_example_variation, plain_variation

log = logging.getLogger(__name__)

COMMANDS = (
    "gen-data", "train", "influence", "divergence", "gronwall",
    "first-order", "fading", "correct", "report",
)

DATASET_FILE = "dataset.csv"
CHECKPOINT_FILE = "checkpoint.bin"
JACOBIAN_FILE = "jacobian.bin"
SCORES_FILE = "scores.csv"
DIVERGENCE_FILE = "divergence.csv"
FIRST_ORDER_FILE = "first_order.csv"
FADING_FILE = "fading.csv"
FADING_AGG_FILE = "fading_aggregate.csv"
CORRECTION_OUTCOMES_FILE = "correction_outcomes.csv"
CORRECTION_SUMMARY_FILE = "correction_summary.csv"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"


# ---------------------------------------------------------------------------
# run-directory plumbing


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, write_fn) -> None:
    """write_fn(tmp_path) then rename; readers never see a partial file."""
    tmp = f"{path}.tmp"
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _update_manifest(out_dir, command, cfg, inputs, outputs, summary) -> None:
    """Record what a command read, wrote, and concluded.

    inputs: run-dir-relative names of consumed artifacts (hashed here);
    outputs: names of files the command just wrote. The top-level outputs
    list is the union over all commands, so the manifest always declares
    every file the run directory contains.
    """
    path = os.path.join(out_dir, MANIFEST_FILE)
    manifest = {"tool_version": __version__, "commands": {}, "outputs": []}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
        manifest["tool_version"] = __version__
    manifest["commands"][command] = {
        "config": config_to_dict(cfg) if cfg is not None else None,
        "inputs": {name: _sha256_file(os.path.join(out_dir, name)) for name in sorted(inputs)},
        "outputs": sorted(outputs),
        "summary": _jsonable(summary),
    }
    manifest["outputs"] = sorted(set(manifest.get("outputs", [])) | set(outputs))

    def dump(tmp):
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    _atomic_write(path, dump)


def _require(out_dir, name, hint) -> str:
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise MissingArtifact(f"no {name} in {out_dir}; run `iflab {hint}` first")
    return path


# ---------------------------------------------------------------------------
# shared reconstruction of the run's objects from config + artifacts


def _model_spec(cfg: RunConfig, dim: int) -> ModelSpec:
    m = cfg.model
    if m.kind == "logistic":
        dims = (dim, cfg.data.k)
    elif m.kind == "mlp":
        dims = (dim, m.hidden, cfg.data.k)
    else:
        raise BadConfig(f"model.kind must be logistic or mlp for runs, got {m.kind!r}")
    return ModelSpec(kind=m.kind, layer_dims=dims, activation=m.activation, l2_reg=m.l2_reg)


def _load_run(cfg: RunConfig, out_dir, need_checkpoint=True):
    """(splits, spec, schedule, lr[, checkpoint]) as configured for this run dir."""
    data_path = _require(out_dir, DATASET_FILE, "gen-data")
    splits = model.load_dataset_csv(data_path)
    spec = _model_spec(cfg, splits.train.X.shape[1])
    schedule = make_batch_schedule(
        splits.train, cfg.schedule.batch_size, cfg.schedule.t_max,
        derive_seed(cfg.run_seed, "schedule"),
    )
    lr = LRSchedule(cfg.schedule.lr_kind, cfg.schedule.lr, cfg.schedule.t_max)
    if not need_checkpoint:
        return splits, spec, schedule, lr
    ck = load_checkpoint(_require(out_dir, CHECKPOINT_FILE, "train"))
    if ck.spec_digest != spec.digest():
        raise BadConfig("checkpoint was trained under a different model/data config")
    if ck.schedule_seed != schedule.seed or ck.batch_size != schedule.batch_size:
        raise BadConfig("checkpoint was trained under a different batch schedule")
    return splits, spec, schedule, lr, ck


def _seeded_subset(n: int, count: int, seed: int) -> np.ndarray:
    if count <= 0 or count >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def _upsample_variation(schedule, size: int, seed: int, var_id: str) -> LossVariation:
    probes = _seeded_subset(len(schedule.dataset), size, seed)
    term = PerturbationTerm(tuple(int(i) for i in probes))
    return LossVariation(schedule, (term,), var_id=var_id)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out_dir) -> dict:
    d = cfg.data
    splits = model.gen_synthetic(
        d.kind, d.n, d.d, d.k, d.label_noise,
        seed=derive_seed(cfg.run_seed, "data"), split_fracs=d.split_fracs,
    )
    _atomic_write(
        os.path.join(out_dir, DATASET_FILE),
        lambda tmp: model.save_dataset_csv(splits, tmp),
    )
    summary = {
        "kind": d.kind,
        "n_train": len(splits.train),
        "n_test": len(splits.test),
        "n_heldout": len(splits.heldout),
    }
    _update_manifest(out_dir, "gen-data", cfg, [], [DATASET_FILE], summary)
    return summary


def cmd_train(cfg: RunConfig, out_dir) -> dict:
    splits, spec, schedule, lr = _load_run(cfg, out_dir, need_checkpoint=False)
    theta0 = model.init_params(spec, derive_seed(cfg.run_seed, "init"))
    traj = train(
        spec, plain_variation(schedule), [], theta0, lr,
        cfg.train.steps, record_every=cfg.train.record_every,
    )
    outputs = [CHECKPOINT_FILE]
    ck = checkpoint_from(traj, spec, schedule)
    _atomic_write(os.path.join(out_dir, CHECKPOINT_FILE), lambda tmp: save_checkpoint(ck, tmp))
    for t in cfg.train.checkpoint_at:
        extra = checkpoint_from(traj, spec, schedule, step=int(t))
        name = f"checkpoint_step{int(t)}.bin"
        _atomic_write(os.path.join(out_dir, name), lambda tmp, e=extra: save_checkpoint(e, tmp))
        outputs.append(name)

    theta = traj.final_theta
    train_batch = model.Batch(splits.train.X, splits.train.y)
    test_acc = float(np.mean(model.predict(spec, theta, splits.test.X) == splits.test.y))
    summary = {
        "steps": traj.final_step,
        "train_loss": model.loss(spec, theta, train_batch),
        "train_data_loss": model.data_loss(spec, theta, train_batch),
        "test_accuracy": test_acc,
    }
    _update_manifest(out_dir, "train", cfg, [DATASET_FILE], outputs, summary)
    return summary


def cmd_influence(cfg: RunConfig, out_dir) -> dict:
    splits, spec, schedule, lr, ck = _load_run(cfg, out_dir)
    icfg = cfg.influence
    train_ids = _seeded_subset(
        len(splits.train), icfg.probes, derive_seed(cfg.run_seed, "influence-probes"))
    test_ids = _seeded_subset(
        len(splits.test), icfg.test_points, derive_seed(cfg.run_seed, "influence-tests"))
    var = per_example_variation(schedule, train_ids)

    if icfg.method == "hif":
        jac = hif_param_derivative(spec, ck, var, damping=icfg.damping, tol=icfg.tol)
    elif icfg.method == "abif":
        jac = abif_param_derivative(
            spec, ck, var, k=icfg.abif_k, num_iters=icfg.abif_num_iters,
            seed=derive_seed(cfg.run_seed, "influence-abif"),
        )
    elif icfg.method == "tracin":
        jac = tracin_param_derivative(spec, [ck], var)
    elif icfg.method == "exact":
        theta0 = model.init_params(spec, derive_seed(cfg.run_seed, "init"))
        base = train(spec, var, np.zeros(var.num_terms), theta0, lr, ck.step, 1)
        jac = exact_eps_jacobian(spec, var, base, lr)
    else:
        raise BadConfig(f"unknown influence.method {icfg.method!r}")

    scores = influence_score(
        jac, spec, ck, splits.test.batch(test_ids), test_ids=test_ids, train_ids=train_ids,
    )
    _atomic_write(os.path.join(out_dir, JACOBIAN_FILE), lambda tmp: save_jacobian(jac, tmp))
    _atomic_write(os.path.join(out_dir, SCORES_FILE), lambda tmp: save_influence_csv(scores, tmp))
    summary = {
        "method": icfg.method,
        "num_train_probes": int(train_ids.size),
        "num_test_points": int(test_ids.size),
        "score_abs_max": float(np.max(np.abs(scores.scores))),
    }
    if icfg.method == "hif":
        summary["solves_converged"] = bool(all(jac.provenance["converged"]))
    _update_manifest(
        out_dir, "influence", cfg, [DATASET_FILE, CHECKPOINT_FILE],
        [JACOBIAN_FILE, SCORES_FILE], summary,
    )
    return summary


def cmd_divergence(cfg: RunConfig, out_dir) -> dict:
    _, spec, schedule, lr, ck = _load_run(cfg, out_dir)
    d = cfg.divergence
    series = divergence_experiment(
        spec, ck, schedule, lr, d.T, d.eps_grid,
        upsample_set_size=d.upsample_set_size, seed=cfg.run_seed,
        record_every=d.record_every, tail_frac=d.tail_frac,
    )
    _atomic_write(
        os.path.join(out_dir, DIVERGENCE_FILE), lambda tmp: write_divergence_csv(series, tmp))
    summary = {
        "series": [
            {
                "eps": s.eps,
                "final_divergence": float(s.divergence[-1]),
                "tail_slope": None if s.fit_tail is None else s.fit_tail.slope,
                "tail_r2": None if s.fit_tail is None else s.fit_tail.r2,
            }
            for s in series
        ]
    }
    _update_manifest(
        out_dir, "divergence", cfg, [DATASET_FILE, CHECKPOINT_FILE], [DIVERGENCE_FILE], summary)
    return summary


def cmd_gronwall(cfg: RunConfig, out_dir) -> dict:
    _, spec, schedule, lr, ck = _load_run(cfg, out_dir)
    g = cfg.gronwall
    var = _upsample_variation(
        schedule, g.upsample_set_size,
        derive_seed(cfg.run_seed, "gronwall-probes"), "gronwall-upsample",
    )
    outputs, rows = [], []
    for i, eps in enumerate(g.eps_grid):
        pair = paired_divergence(
            spec, var, [float(eps)], ck.theta, lr, ck.step + g.T, g.record_every, ck.step)
        report = gronwall_bound_check(spec, var, pair, rel_tol=g.rel_tol)
        name = f"gronwall_{i}.csv"
        _atomic_write(os.path.join(out_dir, name), lambda tmp, r=report: write_gronwall_csv(r, tmp))
        outputs.append(name)
        rows.append({
            "eps": float(eps),
            "c_est": report.c_est,
            "a_est": report.a_est,
            "violations": report.violations,
            "max_ratio": report.max_ratio,
        })

    # equality-sequence sanity check on a seeded synthetic instance
    rng = np.random.default_rng(derive_seed(cfg.run_seed, "gronwall-sharpness"))
    sharp = gronwall_sharpness_demo(rng.uniform(0.1, 1.0, 33), rng.uniform(0.0, 0.2, 32), 0.5)
    summary = {"bounds": rows, "sharpness_max_rel_gap": sharp.max_rel_gap}
    _update_manifest(
        out_dir, "gronwall", cfg, [DATASET_FILE, CHECKPOINT_FILE], outputs, summary)
    return summary


def cmd_first_order(cfg: RunConfig, out_dir) -> dict:
    _, spec, schedule, lr, ck = _load_run(cfg, out_dir)
    f = cfg.first_order
    var = _upsample_variation(
        schedule, f.upsample_set_size,
        derive_seed(cfg.run_seed, "first-order-probes"), "first-order-upsample",
    )
    rows = first_order_validity(spec, ck, var, lr, f.eps_grid, f.t_grid)
    _atomic_write(
        os.path.join(out_dir, FIRST_ORDER_FILE), lambda tmp: write_first_order_csv(rows, tmp))
    summary = {
        "rows": [
            {"T": r.T, "slope": r.slope, "r2": r.r2,
             "const_at_min_eps": r.const_at_min_eps, "exact_zero": r.exact_zero}
            for r in rows
        ]
    }
    _update_manifest(
        out_dir, "first-order", cfg, [DATASET_FILE, CHECKPOINT_FILE], [FIRST_ORDER_FILE], summary)
    return summary


def cmd_fading(cfg: RunConfig, out_dir) -> dict:
    splits, spec, schedule, lr, ck = _load_run(cfg, out_dir)
    f = cfg.fading
    protocol = FadingProtocol(
        n_train_probes=f.n_train_probes, n_test_probes=f.n_test_probes,
        eps=f.eps, repeats=f.repeats, horizon=f.horizon, record_every=f.record_every,
    )
    results = fading_experiment(
        spec, ck, splits, schedule, lr,
        methods=f.methods, protocol=protocol, seed=cfg.run_seed,
        hif_damping=f.hif_damping, abif_k=f.abif_k, abif_num_iters=f.abif_num_iters,
    )
    _atomic_write(os.path.join(out_dir, FADING_FILE), lambda tmp: write_fading_csv(results, tmp))
    _atomic_write(
        os.path.join(out_dir, FADING_AGG_FILE),
        lambda tmp: write_fading_aggregate_csv(results, tmp),
    )
    summary = {}
    for method, res in results.items():
        finite = np.flatnonzero(np.isfinite(res.mean))
        summary[method] = {
            "first_mean_R": float(res.mean[finite[0]]) if finite.size else None,
            "last_mean_R": float(res.mean[finite[-1]]) if finite.size else None,
        }
    _update_manifest(
        out_dir, "fading", cfg, [DATASET_FILE, CHECKPOINT_FILE],
        [FADING_FILE, FADING_AGG_FILE], summary,
    )
    return summary


def cmd_correct(cfg: RunConfig, out_dir) -> dict:
    splits, spec, schedule, _, ck = _load_run(cfg, out_dir)
    c = cfg.correction
    report = correction_campaign(
        spec, ck, splits, schedule, c.eps_grid,
        methods=c.methods, seed=cfg.run_seed, k=c.k, max_steps=c.max_steps, lr=c.lr,
        n_retention_probes=c.n_retention_probes, max_jobs=c.max_jobs,
        hif_damping=c.damping,
    )
    _atomic_write(
        os.path.join(out_dir, CORRECTION_OUTCOMES_FILE),
        lambda tmp: write_correction_outcomes_csv(report, tmp),
    )
    _atomic_write(
        os.path.join(out_dir, CORRECTION_SUMMARY_FILE),
        lambda tmp: write_correction_summary_csv(report, tmp),
    )
    summary = {
        "n_jobs": int(report.test_ids.size),
        "opponents_label_match": report.opponents_label_match,
        "cells": [
            {"method": cell.method, "eps": cell.eps_raw, "eps_frac": cell.eps_frac,
             "success_rate": cell.success_rate, "mean_retention": cell.mean_retention}
            for cell in report.cells
        ],
    }
    _update_manifest(
        out_dir, "correct", cfg, [DATASET_FILE, CHECKPOINT_FILE],
        [CORRECTION_OUTCOMES_FILE, CORRECTION_SUMMARY_FILE], summary,
    )
    return summary


# ---------------------------------------------------------------------------
# report: aggregate the CSVs and render quick-look figures


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise BadInput(f"{path} is empty")
        return header, [row for row in reader]


def _plot_divergence(ax, header, rows):
    idx = {name: i for i, name in enumerate(header)}
    by_eps: dict[float, list[tuple[float, float]]] = {}
    for row in rows:
        by_eps.setdefault(float(row[idx["eps"]]), []).append(
            (float(row[idx["int_lr"]]), float(row[idx["div_norm"]])))
    for eps in sorted(by_eps):
        pts = np.array(by_eps[eps])
        keep = pts[:, 1] > 0
        if keep.any():
            ax.semilogy(pts[keep, 0], pts[keep, 1], label=f"eps={eps:g}")
    ax.set_xlabel("integrated learning rate")
    ax.set_ylabel("parameter divergence")
    ax.legend(fontsize="small")


def _plot_fading(ax, header, rows):
    idx = {name: i for i, name in enumerate(header)}
    by_method: dict[str, list[tuple[int, float, float, float]]] = {}
    for row in rows:
        by_method.setdefault(row[idx["method"]], []).append((
            int(row[idx["t"]]), float(row[idx["mean_R"]]),
            float(row[idx["ci_lo"]]), float(row[idx["ci_hi"]])))
    for method in sorted(by_method):
        pts = np.array(sorted(by_method[method]))
        ax.plot(pts[:, 0], pts[:, 1], label=method)
        ax.fill_between(pts[:, 0], pts[:, 2], pts[:, 3], alpha=0.2)
    ax.axhline(0.0, color="gray", lw=0.5)
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("correlation with measured effect")
    ax.legend(fontsize="small")


def _plot_correction(axes, header, rows):
    idx = {name: i for i, name in enumerate(header)}
    by_method: dict[str, list[tuple[float, float, float]]] = {}
    for row in rows:
        by_method.setdefault(row[idx["method"]], []).append((
            float(row[idx["eps"]]), float(row[idx["success_rate"]]),
            float(row[idx["mean_retention"]])))
    for method in sorted(by_method):
        pts = np.array(sorted(by_method[method]))
        axes[0].plot(pts[:, 0], pts[:, 1], marker="o", label=method)
        axes[1].plot(pts[:, 0], pts[:, 2], marker="o", label=method)
    axes[0].set_xlabel("eps (batch fraction)")
    axes[0].set_ylabel("success rate")
    axes[1].set_xlabel("eps (batch fraction)")
    axes[1].set_ylabel("mean retention")
    axes[0].legend(fontsize="small")


def _plot_first_order(ax, header, rows):
    idx = {name: i for i, name in enumerate(header)}
    by_t: dict[int, list[tuple[float, float]]] = {}
    for row in rows:
        by_t.setdefault(int(row[idx["T"]]), []).append(
            (float(row[idx["eps"]]), float(row[idx["residual"]])))
    for T in sorted(by_t):
        pts = np.array(sorted(by_t[T]))
        keep = pts[:, 1] > 0
        if keep.any():
            ax.loglog(pts[keep, 0], pts[keep, 1], marker="o", label=f"T={T}")
    ax.set_xlabel("eps")
    ax.set_ylabel("first-order residual")
    ax.legend(fontsize="small")


def _plot_gronwall(ax, curves):
    for name, (ts, ratios) in sorted(curves.items()):
        keep = np.isfinite(ratios)
        ax.plot(ts[keep], ratios[keep], label=name)
    ax.axhline(1.0, color="red", lw=0.8, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("divergence / bound")
    ax.legend(fontsize="small")


def cmd_report(cfg: RunConfig | None, out_dir) -> dict:
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise MissingArtifact(f"no {MANIFEST_FILE} in {out_dir}; nothing to report on")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    declared = [
        name for name in manifest.get("outputs", [])
        if name.endswith(".csv") and os.path.exists(os.path.join(out_dir, name))
    ]
    if not declared:
        raise MissingArtifact(f"{out_dir} declares no delimited outputs to report on")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report: dict = {"sources": declared, "sections": {}}
    outputs = [REPORT_FILE]
    inputs = list(declared)

    def render(name, draw):
        fig = draw()
        png = name + ".png"
        _atomic_write(
            os.path.join(out_dir, png),
            lambda tmp: fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight"),
        )
        plt.close(fig)
        outputs.append(png)

    if DIVERGENCE_FILE in declared:
        header, rows = _read_csv(os.path.join(out_dir, DIVERGENCE_FILE))
        finals: dict[float, float] = {}
        for row in rows:
            finals[float(row[0])] = float(row[3])
        report["sections"]["divergence"] = {
            "final_divergence_by_eps": {f"{e:g}": v for e, v in sorted(finals.items())},
        }

        def draw():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            _plot_divergence(ax, header, rows)
            return fig

        render("divergence", draw)

    if FADING_AGG_FILE in declared:
        header, rows = _read_csv(os.path.join(out_dir, FADING_AGG_FILE))
        sect: dict = {}
        for row in rows:
            m = sect.setdefault(row[0], {"first": None, "last": None})
            val = {"t": int(row[1]), "mean_R": float(row[2])}
            if m["first"] is None:
                m["first"] = val
            m["last"] = val
        report["sections"]["fading"] = sect

        def draw():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            _plot_fading(ax, header, rows)
            return fig

        render("fading", draw)

    if CORRECTION_SUMMARY_FILE in declared:
        header, rows = _read_csv(os.path.join(out_dir, CORRECTION_SUMMARY_FILE))
        report["sections"]["correction"] = [dict(zip(header, row)) for row in rows]

        def draw():
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
            _plot_correction(axes, header, rows)
            return fig

        render("correction", draw)

    if FIRST_ORDER_FILE in declared:
        header, rows = _read_csv(os.path.join(out_dir, FIRST_ORDER_FILE))
        consts: dict[int, float] = {}
        for row in rows:
            consts[int(row[0])] = float(row[3])
        report["sections"]["first_order"] = {
            "curvature_const_by_T": {str(t): v for t, v in sorted(consts.items())},
        }

        def draw():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            _plot_first_order(ax, header, rows)
            return fig

        render("first_order", draw)

    gronwall_files = sorted(n for n in declared if n.startswith("gronwall_"))
    if gronwall_files:
        curves, max_ratio = {}, 0.0
        for name in gronwall_files:
            _, rows = _read_csv(os.path.join(out_dir, name))
            ts = np.array([float(r[0]) for r in rows])
            ratios = np.array([float(r[3]) for r in rows])
            curves[name[:-4]] = (ts, ratios)
            finite = ratios[np.isfinite(ratios)]
            if finite.size:
                max_ratio = max(max_ratio, float(finite.max()))
        report["sections"]["gronwall"] = {"max_ratio": max_ratio}

        def draw():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            _plot_gronwall(ax, curves)
            return fig

        render("gronwall", draw)

    def dump(tmp):
        with open(tmp, "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
            fh.write("\n")

    _atomic_write(os.path.join(out_dir, REPORT_FILE), dump)
    _update_manifest(
        out_dir, "report", cfg, inputs, outputs,
        {"sections": sorted(report["sections"])},
    )
    return report


# ---------------------------------------------------------------------------
# entry point


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "influence": cmd_influence,
    "divergence": cmd_divergence,
    "gronwall": cmd_gronwall,
    "first-order": cmd_first_order,
    "fading": cmd_fading,
    "correct": cmd_correct,
    "report": cmd_report,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iflab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config; defaults apply if omitted")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="override run_seed from the config")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker budget; execution is deterministic regardless")
    return parser


def _run(args) -> int:
    if args.jobs < 1:
        raise BadConfig(f"--jobs must be >= 1, got {args.jobs}")
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, run_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    summary = _DISPATCH[args.command](cfg, args.out)
    log.info("%s finished: %s", args.command, json.dumps(_jsonable(summary))[:200])
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except (BadConfig, BadInput) as exc:
        print(f"iflab: config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"iflab: missing artifact: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"iflab: numeric failure: {exc}", file=sys.stderr)
        return 1
    except IflabError as exc:
        print(f"iflab: failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
