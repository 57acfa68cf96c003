"""CSV tables and matplotlib figures for reconstruction runs and sweeps."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

log = logging.getLogger(__name__)

OVERHEAD_HEADER = ("iteration", "shape", "a", "M", "overhead_pct")
POSES_HEADER = ("patch_id", "iteration", "rx", "ry", "rz", "tx", "ty", "tz", "cc")
EM_HEADER = ("iteration", "sigma", "c", "n_excluded")
METRICS_HEADER = ("slice_id", "region", "cc", "psnr", "ssim", "mean_dssim")
SWEEP_HEADER = ("theta", "method", "baseline_psnr", "psnr", "cc", "ssim", "dssim", "improvement_pct", "seconds")


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def overhead_rows(logs) -> List[tuple]:
    return [(l.iteration, l.shape, l.a, l.n_patches, l.overhead_pct) for l in logs]


def em_rows(logs) -> List[tuple]:
    return [(l.iteration, l.sigma, l.c, l.n_excluded) for l in logs]


def metric_rows(report) -> List[tuple]:
    return [(r.slice_id, r.region, r.cc, r.psnr, r.ssim, r.dssim) for r in report.rows]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def dssim_png(heat: np.ndarray, path, title: str = "DSSIM") -> Path:
    """Mid-slice of a DSSIM heat map volume."""
    plt = _pyplot()
    k = heat.shape[2] // 2
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(heat[:, :, k].T, origin="lower", cmap="magma", vmin=0.0, vmax=max(float(heat.max()), 1e-6))
    ax.set_title(f"{title} (slice {k})")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def history_png(logs, baseline_psnr: float, path) -> Path:
    """PSNR after every outer iteration, starting from the initial average."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(len(logs) + 1), [baseline_psnr] + [l.psnr for l in logs], marker="o")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("mean slice PSNR (dB)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def sweep_png(rows: Sequence[Dict], path) -> Path:
    """PSNR against skew angle, one line per method, baselines dashed."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = sorted({r["method"] for r in rows}, key=lambda m: [r["method"] for r in rows].index(m))
    for m in methods:
        sel = sorted((r for r in rows if r["method"] == m), key=lambda r: float(r["theta"]))
        th = [float(r["theta"]) for r in sel]
        line, = ax.plot(th, [float(r["psnr"]) for r in sel], marker="o", label=m)
        ax.plot(th, [float(r["baseline_psnr"]) for r in sel], ls="--", color=line.get_color(), alpha=0.5)
    ax.set_xlabel("skew angle (deg)")
    ax.set_ylabel("mean slice PSNR (dB)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def overhead_png(rows: Sequence[Dict], path) -> Path:
    """Overhead percentage per outer iteration, one bar group per configuration."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = list(dict.fromkeys(r["label"] for r in rows))
    width = 0.8 / max(len(labels), 1)
    for j, lab in enumerate(labels):
        sel = [r for r in rows if r["label"] == lab]
        x = np.array([int(r["iteration"]) for r in sel]) + j * width
        ax.bar(x, [float(r["overhead_pct"]) for r in sel], width, label=lab)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("overhead (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
