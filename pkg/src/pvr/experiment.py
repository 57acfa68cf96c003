"""Skew sweep on the phantom and patch overhead comparison."""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import report as rep
from .patches import overhead_report, plan_iteration
from .phantom import corrupted_stacks, make_phantom
from .pipeline import PipelineConfig, effective_plan, prepare, reconstruct, robust_range

log = logging.getLogger(__name__)

THETAS = (1.0, 2.0, 4.0, 6.0, 8.0)
METHODS = ("svr", "pvr-square", "pvr-superpixel")


def method_config(method: str, **overrides) -> PipelineConfig:
    """Pipeline settings of the compared methods."""
    if method == "svr":
        cfg = PipelineConfig(mode="svr")
    elif method == "pvr-square":
        cfg = PipelineConfig(mode="pvr", patch_shape="square", patch_size=32, stride=16)
    elif method == "pvr-superpixel":
        cfg = PipelineConfig(mode="pvr", patch_shape="superpixel", patch_size=16, dilation=60.0)
    else:
        raise ValueError(f"unknown method {method!r}")
    return dataclasses.replace(cfg, **overrides)


def improvement(baseline: float, final: float) -> float:
    """Relative PSNR gain over the baseline, in percent."""
    return 100.0 * (final - baseline) / baseline


def skew_sweep(thetas: Sequence[float] = THETAS, methods: Sequence[str] = METHODS, size: int = 96,
               spacing: float = 1.0, seed: int = 0, out_dir: Optional[str] = None, **overrides) -> List[Dict]:
    """Reconstruct the phantom corrupted at every skew angle with every method.

    Returns one row per (theta, method) with baseline and final metrics. Global
    stack alignment is off unless overridden: the phantom stacks are already in
    scanner coordinates and a sheared template would only drag the others.
    """
    overrides.setdefault("register_stacks", False)
    gt = make_phantom(size=size, spacing=spacing)
    rows = []
    for theta in thetas:
        stacks = corrupted_stacks(gt, theta, seed=seed)
        for m in methods:
            cfg = method_config(m, seed=seed, **overrides)
            t0 = time.perf_counter()
            res = reconstruct(stacks, cfg)
            s = res.report.summary
            b = res.baseline.mean("psnr")
            row = {"theta": theta, "method": m, "baseline_psnr": b, "psnr": s["psnr"], "cc": s["cc"],
                   "ssim": s["ssim"], "dssim": s["dssim"], "improvement_pct": improvement(b, s["psnr"]),
                   "seconds": time.perf_counter() - t0}
            log.info("theta %g %s: baseline %.3f -> %.3f dB (%.0fs)", theta, m, b, s["psnr"], row["seconds"])
            rows.append(row)
    if out_dir:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: Sequence[Dict], out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = rep.write_csv(out / "sweep.csv", rep.SWEEP_HEADER, [[r[k] for k in rep.SWEEP_HEADER] for r in rows])
    png = rep.sweep_png(rows, out / "sweep.png")
    return {"csv": csv_path, "png": png}


def overhead_comparison(stacks, configs: Dict[str, PipelineConfig]) -> List[Dict]:
    """Patch count and overhead per outer iteration for each labelled configuration.

    Only the decomposition runs; stacks are taken at their current poses.
    """
    rows = []
    for label, cfg in configs.items():
        st, t, _, _ = prepare(stacks, dataclasses.replace(cfg, register_stacks=False))
        lo, hi = robust_range(st[t].data)
        plan = effective_plan(cfg, hi - lo)
        for it in range(cfg.iterations):
            M, pct = overhead_report(plan_iteration(plan, it, st))
            a = plan.size_at(it) if plan.shape != "slice" else 0
            rows.append({"label": label, "iteration": it, "shape": plan.shape, "a": a, "M": M, "overhead_pct": pct})
    return rows


def default_overhead_configs() -> Dict[str, PipelineConfig]:
    return {
        "square a=32": method_config("pvr-square"),
        "superpixel a=16": method_config("pvr-superpixel"),
        "superpixel multiscale a=32": method_config("pvr-superpixel", patch_size=32, schedule="multiscale",
                                                    scales=(1.0, 0.75, 0.5)),
    }


def write_overhead(rows: Sequence[Dict], out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ("label",) + rep.OVERHEAD_HEADER
    csv_path = rep.write_csv(out / "overhead_comparison.csv", header, [[r[k] for k in header] for r in rows])
    png = rep.overhead_png(rows, out / "overhead_comparison.png")
    return {"csv": csv_path, "png": png}
