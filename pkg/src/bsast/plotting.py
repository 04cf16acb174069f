"""Figure output for spectrograms, training curves and evaluation reports.

Figures are drawn on Agg canvases directly, without pyplot's global state,
so they can be rendered from worker threads and in headless runs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .dsp import StftConfig, stft

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
}
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def new_figure(width=6.0, height=None, nrows=1, ncols=1, **kw):
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height or width * GOLDEN))
        FigureCanvasAgg(fig)
        axes = fig.subplots(nrows, ncols, squeeze=False, **kw)
    return fig, axes


def save(fig, path, dpi=120):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    return path


def log_magnitude(samples, cfg: StftConfig, floor_db=-80.0):
    """Frames x bins log-magnitude (dB) of a mono signal, floored relative to its peak."""
    mag = np.abs(stft(np.asarray(samples, dtype=np.float64).reshape(1, -1), cfg).bins[0])
    db = 20 * np.log10(mag + 1e-12)
    return np.maximum(db, db.max() + floor_db)


def spectrogram_png(path, panels, sample_rate: int, cfg: StftConfig, title=None):
    """Stacked log-magnitude images; ``panels`` is a sequence of (name, mono samples)."""
    panels = list(panels)
    fig, axes = new_figure(6.0, 2.2 * len(panels), nrows=len(panels), sharex=True)
    for ax, (name, samples) in zip(axes[:, 0], panels):
        db = log_magnitude(samples, cfg)
        extent = (0, len(samples) / sample_rate, 0, sample_rate / 2 / 1000)
        im = ax.imshow(db.T, origin="lower", aspect="auto", extent=extent, cmap="magma")
        ax.set_ylabel("kHz")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, label="dB")
    axes[-1, 0].set_xlabel("time (s)")
    if title:
        fig.suptitle(title)
    return save(fig, path)


def loss_curve_png(path, history, window=100):
    """Total loss per optimizer step with a trailing moving average."""
    steps = np.array([row[0] for row in history])
    total = np.array([row[4] for row in history])
    fig, axes = new_figure(5.0)
    ax = axes[0, 0]
    ax.plot(steps, total, lw=0.6, alpha=0.5, label="total")
    if len(total) >= 2:
        w = min(window, len(total))
        ma = np.convolve(total, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1:], ma, lw=1.4, label=f"{w}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return save(fig, path)


SUMMARY_FIELDS = ("condition", "channels", "items", "median_si_sdr", "median_sdr_plain")
ROW_FIELDS = ("model", "id", "label", "condition", "channels", "si_sdr", "sdr_plain")


def write_rows(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})


def write_report(report, path):
    """Summary CSV at ``path``, per-item CSV and a figure alongside it.

    SDR here is the plain scale-sensitive ratio, not BSS-Eval SDR.
    Returns the paths written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items_path = path.with_name(path.stem + "_items.csv")
    figure_path = path.with_suffix(".png")
    write_rows(path, report.summary, SUMMARY_FIELDS)
    write_rows(items_path, report.rows, ROW_FIELDS)
    report_figure(figure_path, report)
    return path, items_path, figure_path


def report_figure(path, report):
    groups = [(s["condition"], s["channels"]) for s in report.summary]
    fig, axes = new_figure(6.0, 3.0, ncols=2)
    for ax, metric, title in ((axes[0, 0], "si_sdr", "SI-SDR"), (axes[0, 1], "sdr_plain", "SDR (plain)")):
        for x, (cond, ch) in enumerate(groups):
            vals = [r[metric] for r in report.rows if r["condition"] == cond and r["channels"] == ch]
            jitter = np.linspace(-0.15, 0.15, len(vals)) if len(vals) > 1 else [0.0]
            ax.scatter(x + np.asarray(jitter), vals, s=8, alpha=0.6)
            ax.hlines(np.median(vals), x - 0.3, x + 0.3, colors="k", lw=1.5)
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels([f"{c}\n{ch}" for c, ch in groups])
        ax.set_title(f"{title} (median bar)")
        ax.set_ylabel("dB")
    return save(fig, path)
