"""Rendered views of training, verification, and evaluation outputs.

Every function writes one PNG next to the delimited file it mirrors and
returns the path. Uses the non-interactive backend so it works headless.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, out_path) -> str:
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def loss_curves(metrics_csv, out_path) -> str:
    """Loss terms and learning rate over training steps."""
    steps, l_ar, l_nar, l_uni, lrs = [], [], [], [], []
    with open(metrics_csv) as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            l_ar.append(float(row["l_ar"]))
            l_nar.append(float(row["l_nar"]))
            l_uni.append(float(row["l_unified"]))
            lrs.append(float(row["lr"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, l_uni, label="unified", lw=1.2)
    ax.plot(steps, l_ar, label="next-token", lw=0.8, alpha=0.8)
    ax.plot(steps, l_nar, label="denoising", lw=0.8, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (per item)")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="gray", lw=0.6, ls="--")
    ax2.set_ylabel("learning rate", color="gray")
    ax.set_title("training losses")
    return _save(fig, out_path)


def slack_hist(slacks, out_path) -> str:
    """Distribution of bound slack across verification cases."""
    slacks = np.asarray(slacks, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(slacks, bins=40, color="#4878a8")
    ax.axvline(0.0, color="red", lw=1.0)
    ax.set_xlabel("slack = order-averaged NLL − order-marginal NLL")
    ax.set_ylabel("cases")
    ax.set_title(f"bound slack over {len(slacks)} cases (min {slacks.min():.3g})")
    return _save(fig, out_path)


def equivalence_plot(cases, out_path) -> str:
    """Per-model estimator means with 3-SE whiskers."""
    idx = np.arange(len(cases))
    a = np.array([c.mean_order for c in cases])
    ea = np.array([c.se_order for c in cases])
    b = np.array([c.mean_dce for c in cases])
    eb = np.array([c.se_dce for c in cases])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.errorbar(idx - 0.1, a, yerr=3 * ea, fmt="o", ms=3, label="order sampling", capsize=2)
    ax.errorbar(idx + 0.1, b, yerr=3 * eb, fmt="s", ms=3, label="weighted denoising", capsize=2)
    ax.set_xlabel("model")
    ax.set_ylabel("estimated span loss")
    ax.legend()
    ax.set_title("estimator agreement (3-SE whiskers)")
    return _save(fig, out_path)


def eoa_error_hist(errors, out_path) -> str:
    """Histogram of final-span length error (generated minus expected)."""
    errors = np.asarray(errors, dtype=int)
    lo, hi = int(errors.min()), int(errors.max())
    bins = np.arange(lo - 0.5, hi + 1.5)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(errors, bins=bins, color="#a85448")
    ax.set_xlabel("final span length error (tokens)")
    ax.set_ylabel("records")
    exact = float(np.mean(errors == 0))
    ax.set_title(f"end-marker placement ({exact:.1%} exact)")
    return _save(fig, out_path)


def span_length_hist(lengths, expected, out_path) -> str:
    """Generated final-span content lengths against the expected set."""
    fig, ax = plt.subplots(figsize=(6, 4))
    lengths = np.asarray(lengths, dtype=int)
    expected = np.asarray(expected, dtype=int)
    hi = int(max(lengths.max(initial=1), expected.max(initial=1)))
    bins = np.arange(-0.5, hi + 1.5)
    ax.hist(lengths, bins=bins, alpha=0.6, label="generated")
    ax.hist(expected, bins=bins, alpha=0.6, label="expected")
    ax.set_xlabel("final span content length")
    ax.set_ylabel("records")
    ax.legend()
    ax.set_title("final span lengths")
    return _save(fig, out_path)


def mask_heatmap(mask, out_path, labels: str | None = None) -> str:
    """Attention allow-matrix as an image (dark = allowed)."""
    mask = np.asarray(mask)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(~mask, cmap="gray", interpolation="nearest")
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    title = "attention allow-matrix"
    if labels:
        title += f" ({labels})"
    ax.set_title(title)
    return _save(fig, out_path)


def masked_fraction_plot(lams, fracs, out_path) -> str:
    """Empirical masked fraction against the forced masking level."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(lams, fracs, "o", ms=4, label="empirical")
    grid = np.linspace(0, 1, 101)
    ax.plot(grid, grid, "--", lw=1, color="gray", label="level")
    ax.set_xlabel("masking level")
    ax.set_ylabel("masked fraction")
    ax.legend()
    ax.set_title("corruption calibration")
    return _save(fig, out_path)
