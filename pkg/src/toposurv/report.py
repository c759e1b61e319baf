"""Delimited outputs and the matplotlib figures rendered alongside them."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .recon_metrics import ReconReport, bootstrap_ci
from .survival import KMCurve
from .volume import REGION_NAMES


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_risk_csv(path, rows, num_bins: int):
    """rows: (patient_id, split, time, event, risk, predicted_bin, probs)."""
    header = ["patient_id", "split", "time_days", "event", "risk", "predicted_bin"]
    header += [f"p{k}" for k in range(num_bins)]
    flat = [(pid, split, time, event, risk, yhat, *probs)
            for pid, split, time, event, risk, yhat, probs in rows]
    _write_rows(path, header, flat)


def write_metrics_json(path, metrics: dict):
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_km_csv(path, strata: dict[str, KMCurve]):
    rows = []
    for name in sorted(strata):
        curve = strata[name]
        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            rows.append((name, float(t), float(s), int(n), int(d)))
    _write_rows(path, ["stratum", "time", "survival", "at_risk", "events"], rows)


def write_recon_csv(path, reports: list[ReconReport]):
    rows = [(r.patient_id, r.split, r.mae, r.mse, r.psnr, r.ssim,
             r.mae_tumor, r.mae_nontumor) for r in reports]
    _write_rows(path, ["patient_id", "split", "mae", "mse", "psnr", "ssim",
                       "mae_tumor", "mae_nontumor"], rows)


def write_recon_summary(path, reports: list[ReconReport], seed: int = 0):
    """Per-split mean with seeded bootstrap 95% CI for each metric."""
    rows = []
    splits = sorted({r.split for r in reports})
    for split in splits:
        subset = [r for r in reports if r.split == split]
        for metric in ("mae", "mse", "psnr", "ssim"):
            values = [getattr(r, metric) for r in subset]
            mean, lo, hi = bootstrap_ci(values, seed=seed)
            rows.append((split, metric, len(values), mean, lo, hi))
    _write_rows(path, ["split", "metric", "n", "mean", "ci_lo", "ci_hi"], rows)


def write_attribution_csv(path, rows):
    """rows: (patient_id, RegionalAttribution)."""
    flat = []
    for pid, attribution in rows:
        for i, region in enumerate(attribution.region_names):
            flat.append((pid, region,
                         float(attribution.hazard_fraction[i]),
                         float(attribution.embedding_fraction[i]),
                         int(attribution.hazard_degenerate),
                         int(attribution.embedding_degenerate)))
    _write_rows(path, ["patient_id", "region", "hazard_fraction",
                       "embedding_fraction", "hazard_degenerate",
                       "embedding_degenerate"], flat)


def write_attribution_summary(path, rows):
    hazard = np.mean([a.hazard_fraction for _, a in rows], axis=0)
    embed = np.mean([a.embedding_fraction for _, a in rows], axis=0)
    out = [(region, float(hazard[i]), float(embed[i]))
           for i, region in enumerate(REGION_NAMES)]
    _write_rows(path, ["region", "hazard_fraction_mean", "embedding_fraction_mean"], out)
    return hazard, embed


def write_stage1_log(path, logs):
    _write_rows(path, ["epoch", "recon", "topo", "cox", "total", "val_total", "is_best"],
                [(l.epoch, l.recon, l.topo, l.cox, l.total, l.val_total, int(l.is_best))
                 for l in logs])


def write_stage2_log(path, logs):
    _write_rows(path, ["epoch", "ce", "c_val", "is_best"],
                [(l.epoch, l.ce, l.c_val, int(l.is_best)) for l in logs])


def write_diagram_csv(path_or_handle, diagram):
    rows = [(p.dim, p.birth, p.death) for p in diagram.points]
    if hasattr(path_or_handle, "write"):
        writer = csv.writer(path_or_handle, lineterminator="\n")
        writer.writerow(["q", "birth", "death"])
        for row in rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
    else:
        _write_rows(path_or_handle, ["q", "birth", "death"], rows)


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _step_curve(curve: KMCurve):
    # left-continuous steps starting at S(0) = 1
    times = np.concatenate([[0.0], curve.times])
    survival = np.concatenate([[1.0], curve.survival])
    return times, survival


def fig_km(path, strata: dict[str, KMCurve]):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in sorted(strata):
        t, s = _step_curve(strata[name])
        ax.step(t, s, where="post", label=name)
    ax.set_xlabel("time (days)")
    ax.set_ylabel("survival probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.set_title("Kaplan-Meier by median risk stratum")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_recon_box(path, reports: list[ReconReport]):
    splits = sorted({r.split for r in reports})
    metrics = ("mae", "mse", "psnr", "ssim")
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, metric in zip(axes.ravel(), metrics):
        data = [[getattr(r, metric) for r in reports if r.split == s] for s in splits]
        ax.boxplot(data, tick_labels=[f"{s}\n(N={len(d)})" for s, d in zip(splits, data)])
        ax.set_title(metric.upper())
    fig.suptitle("Reconstruction quality by split")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_attribution(path, hazard_means, embed_means):
    x = np.arange(len(REGION_NAMES))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - width / 2, hazard_means, width, label="hazard fraction")
    ax.bar(x + width / 2, embed_means, width, label="embedding fraction",
           hatch="//", alpha=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(REGION_NAMES, rotation=20)
    ax.set_ylabel("fraction of sensitivity")
    ax.legend()
    ax.set_title("Occlusion sensitivity by region")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_stage1_loss(path, logs):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [l.epoch for l in logs]
    ax.plot(epochs, [l.recon for l in logs], label="recon")
    if any(l.topo for l in logs):
        ax.plot(epochs, [l.topo for l in logs], label="topo")
    if any(l.cox for l in logs):
        ax.plot(epochs, [l.cox for l in logs], label="cox")
    ax.plot(epochs, [l.val_total for l in logs], label="val total", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
