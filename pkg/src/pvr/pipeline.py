"""End-to-end reconstruction: template selection, intensity matching, global alignment,
then the outer register -> EM -> super-resolution loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import report as rep
from .metrics import MetricReport, evaluate_reconstruction
from .niftiio import load_stack, load_volume, save_volume
from .patches import Patch, PatchPlan, overhead_report, plan_iteration
from .register import MIN_OVERLAP, RegistrationConfig, RegistrationError, UndefinedSimilarity, cc_similarity, \
    register_batch, register_stack_to_volume, stack_overlap
from .robust import EMState, em_update, pixel_posterior, rigidity_map
from .superres import DETERMINISTIC_CHUNKS, PatchBatch, ReconState, forward, initialize_recon, \
    recon_geometry, sr_iteration
from .volgrid import RigidTransform, Stack, Volume, resample

log = logging.getLogger(__name__)

BACKGROUND_FRACTION = 0.05


def _parse_scales(text) -> Tuple[float, ...]:
    if isinstance(text, str):
        return tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    return tuple(float(v) for v in text)


@dataclass
class PipelineConfig:
    """Every knob of a reconstruction run; serialisable as a key=value manifest."""

    stacks: List[str] = field(default_factory=list)
    mode: str = "pvr"
    patch_shape: str = "square"
    patch_size: int = 32
    stride: int = 16
    compactness: float = 0.1
    dilation: float = 60.0
    dilation_percent: bool = True
    schedule: str = "fixed"
    scales: Tuple[float, ...] = (1.0, 0.75, 0.5625)
    iterations: int = 3
    sr_steps: int = 7
    alpha: float = 0.9
    lam: float = 0.01
    psf_support: float = 2.0
    epsilon_taylor: float = 1e-6
    reg_levels: Tuple[float, ...] = (2.0, 1.0, 0.0)
    reg_iters: int = 20
    rot_step: float = 4.0
    trans_step: float = 2.0
    em_rounds: int = 20
    pbar_threshold: float = 0.5
    template: str = "auto"
    register_stacks: bool = True
    mask: Optional[str] = None
    spacing: Optional[float] = None
    thickness: Optional[float] = None
    region: str = "whole"
    seed: int = 0
    workers: Optional[int] = None
    deterministic: bool = False
    out: str = "recon.nii.gz"
    confidence_out: Optional[str] = None
    rigidity_out: Optional[str] = None
    metrics_csv: Optional[str] = None
    dssim_out: Optional[str] = None
    figures: bool = False

    def __post_init__(self):
        if self.mode not in ("pvr", "svr"):
            raise ValueError("mode must be 'pvr' or 'svr'")
        self.scales = _parse_scales(self.scales)
        self.reg_levels = _parse_scales(self.reg_levels)
        if self.iterations < 0 or self.sr_steps < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.schedule == "multiscale" and len(self.scales) < self.iterations:
            raise ValueError("multiscale schedule needs one scale per iteration")

    def plan(self) -> PatchPlan:
        if self.mode == "svr":
            return PatchPlan(shape="slice")
        return PatchPlan(self.patch_shape, self.patch_size, self.stride, self.dilation, self.dilation_percent,
                         self.compactness, self.schedule, self.scales)

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(levels=self.reg_levels, max_iter=self.reg_iters, rot_step=self.rot_step,
                                  trans_step=self.trans_step)

    def stack_registration(self) -> RegistrationConfig:
        """Local refinement only: stacks arrive in scanner coordinates, and wide searches
        lock onto the near-symmetries of head-like anatomy."""
        return RegistrationConfig(levels=(1.0, 0.0), max_iter=self.reg_iters, rot_step=1.0, trans_step=1.0)

    @property
    def n_chunks(self) -> int:
        if self.deterministic:
            return DETERMINISTIC_CHUNKS
        return max(1, self.workers or 1)

    # -- output locations ---------------------------------------------------
    def _stem(self) -> Path:
        p = Path(self.out)
        name = p.name
        for ext in (".nii.gz", ".nii"):
            if name.endswith(ext):
                name = name[: -len(ext)]
                break
        return p.with_name(name)

    def path(self, kind: str) -> Path:
        """Output path for ``kind`` (confidence, rigidity, metrics, overhead, poses, em, manifest, ...)."""
        explicit = {"confidence": self.confidence_out, "rigidity": self.rigidity_out, "metrics": self.metrics_csv,
                    "dssim": self.dssim_out}
        if explicit.get(kind):
            return Path(explicit[kind])
        stem = self._stem()
        if kind in ("confidence", "rigidity", "dssim"):
            return stem.with_name(f"{stem.name}_{kind}.nii.gz")
        if kind == "manifest":
            return stem.with_name(f"{stem.name}_manifest.txt")
        csv_dir = Path(self.metrics_csv).parent if self.metrics_csv else stem.parent
        return csv_dir / f"{stem.name}_{kind}.csv"

    # -- manifest -------------------------------------------------------------
    def to_manifest(self) -> Dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            out[f.name] = "" if v is None else str(v)
        return out

    @classmethod
    def from_manifest(cls, items: Dict[str, str]) -> "PipelineConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            default = f.default if f.default is not dataclasses.MISSING else None
            if f.name == "stacks":
                kw[f.name] = [s for s in raw.split(",") if s]
            elif f.name in ("scales", "reg_levels"):
                kw[f.name] = _parse_scales(raw)
            elif raw == "":
                kw[f.name] = None
            elif isinstance(default, bool):
                kw[f.name] = raw == "True"
            elif isinstance(default, int) or f.name in ("workers",):
                kw[f.name] = int(raw)
            elif isinstance(default, float) or f.name in ("spacing", "thickness"):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def read_manifest(path) -> Dict[str, str]:
    items = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
    return items


def write_manifest(path, items: Dict[str, str]) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


# --- initialisation ------------------------------------------------------------

def adjacent_slice_cc(stack: Stack) -> float:
    """Mean correlation between neighbouring slices; undefined pairs are skipped."""
    vals = []
    for k in range(stack.n_slices - 1):
        try:
            vals.append(cc_similarity(stack.data[:, :, k], stack.data[:, :, k + 1]))
        except UndefinedSimilarity:
            continue
    return float(np.mean(vals)) if vals else -math.inf


def select_template(stacks: Sequence[Stack], policy="auto") -> int:
    """Index of the stack with the most coherent neighbouring slices, or the given index."""
    if not stacks:
        raise ValueError("no stacks")
    if policy != "auto":
        idx = int(policy)
        if not 0 <= idx < len(stacks):
            raise IndexError(f"template index {idx} out of range for {len(stacks)} stacks")
        return idx
    scores = [adjacent_slice_cc(s) for s in stacks]
    return int(np.argmax(scores))


def robust_range(data, lo: float = 1.0, hi: float = 99.0) -> Tuple[float, float]:
    return tuple(float(v) for v in np.percentile(np.asarray(data, float).ravel(), [lo, hi]))


def intensity_match(stacks: Sequence[Stack], template: int):
    """Rescale every stack linearly so its 1st-99th percentile range matches the template's.

    Returns ``(stacks, [(scale, offset), ...])``.
    """
    t_lo, t_hi = robust_range(stacks[template].data)
    out, params = [], []
    for i, st in enumerate(stacks):
        lo, hi = robust_range(st.data)
        if hi <= lo:
            raise ValueError(f"stack {i} has constant intensity over its robust range")
        if i == template:
            out.append(st)
            params.append((1.0, 0.0))
            continue
        scale = (t_hi - t_lo) / (hi - lo)
        offset = t_lo - scale * lo
        out.append(st.with_data(st.data * scale + offset))
        params.append((scale, offset))
    return out, params


def stack_masks(stacks: Sequence[Stack], mask: Volume) -> List[np.ndarray]:
    """Binary mask sampled on every stack's voxel grid."""
    out = []
    for st in stacks:
        vol, _ = resample(mask, st.geometry)
        out.append(vol.data > 0.5)
    return out


def inherit_poses(new: Sequence[Patch], old: Sequence[Patch]) -> None:
    """Start each new patch from the pose of the previous patch of its slice whose core
    centroid is nearest (exact carry-over when the decomposition is unchanged)."""
    by_slice: Dict[Tuple[int, int], List[Tuple[np.ndarray, RigidTransform]]] = {}
    for p in old:
        c = p.pixels[p.core].mean(axis=0)
        by_slice.setdefault((p.stack_id, p.slice_index), []).append((c, p.pose))
    for p in new:
        cands = by_slice.get((p.stack_id, p.slice_index))
        if not cands:
            continue
        c = p.pixels[p.core].mean(axis=0)
        d = [float(np.sum((c - q) ** 2)) for q, _ in cands]
        p.pose = cands[int(np.argmin(d))][1]


# --- results ----------------------------------------------------------------------

@dataclass
class IterationLog:
    iteration: int
    shape: str
    a: int
    n_patches: int
    overhead_pct: float
    sigma: float
    c: float
    n_excluded: int
    n_unregistrable: int
    loglik: List[float]
    psnr: float
    seconds: float


@dataclass
class Results:
    recon: Volume
    confidence: Volume
    rigidity: Volume
    report: MetricReport
    baseline: MetricReport
    patches: List[Patch]
    stacks: List[Stack]
    template: int
    iterations: List[IterationLog] = field(default_factory=list)
    pose_rows: List[tuple] = field(default_factory=list)
    em: Optional[EMState] = None
    stack_transforms: List[RigidTransform] = field(default_factory=list)
    intensity: List[Tuple[float, float]] = field(default_factory=list)
    seconds: float = 0.0


def _set_workers(n: Optional[int]) -> None:
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def alignment_target(stacks: Sequence[Stack], template: int, pad: float = 0.25) -> Volume:
    """Template stack resampled onto an isotropic grid covering every stack, zero padded.

    Zeros outside the template field of view keep the correlation from
    rewarding poses that slide a stack out of the overlap.
    """
    st = stacks[template]
    g = recon_geometry(stacks, float(min(st.in_plane_spacing)), st.geometry.axes)
    margin = [int(math.ceil(pad * d)) for d in g.dims]
    dims = tuple(d + 2 * m for d, m in zip(g.dims, margin))
    origin = np.asarray(g.origin) - g.axes @ (np.asarray(margin) * np.asarray(g.spacing))
    big = dataclasses.replace(g, dims=dims, origin=tuple(origin))
    vol, _ = resample(st.as_volume(), big)
    return vol


def prepare(stacks: Sequence[Stack], cfg: PipelineConfig):
    """Template choice, intensity matching and stack-to-template alignment."""
    stacks = list(stacks)
    t = select_template(stacks, cfg.template)
    stacks, scales = intensity_match(stacks, t)
    transforms = [RigidTransform() for _ in stacks]
    if cfg.register_stacks and len(stacks) > 1:
        target = alignment_target(stacks, t)
        reg = cfg.stack_registration()
        for i, st in enumerate(stacks):
            if i == t:
                continue
            if stack_overlap(st, stacks[t].as_volume()) < MIN_OVERLAP:
                raise RegistrationError(f"stack {i} ({st.name}) overlaps the template by less than "
                                        f"{MIN_OVERLAP:.0%}")
            T = register_stack_to_volume(st, target, reg)
            transforms[i] = T
            stacks[i] = st.with_poses([T.compose(p) for p in st.poses])
            log.info("stack %d aligned to template %d: rot %s trans %s", i, t,
                     np.round(T.rotation, 2), np.round(T.translation, 2))
    return stacks, t, scales, transforms


def _live_em(batch: PatchBatch, residual: np.ndarray, cfg: PipelineConfig, prev: Optional[EMState],
             intensity_range: float, background: float):
    """EM over the finite residuals of every patch, scattered back to full-size arrays.

    Unregistrable patches take part at their unchanged pose: a flat patch
    still pins the intensities it covers. The mixture is fitted on foreground
    pixels (acquired intensity above ``background``) so the near-zero
    residuals of empty space cannot shrink the inlier Gaussian; posteriors are
    then evaluated for every live pixel. Patch scores use the foreground
    pixels, or all live pixels of a patch without any.
    """
    pidx = batch.patch_index()
    M = batch.n_patches
    live = np.isfinite(residual)
    if live.sum() == 0:
        return None, np.zeros(len(residual)), np.zeros(M), np.zeros(M, dtype=bool)
    fit = live & (batch.vals > background)
    if not fit.any():
        fit = live
    counts = np.bincount(pidx[fit], minlength=M)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    em = em_update(residual[fit], ptr, prev, cfg.pbar_threshold, cfg.em_rounds, intensity_range=intensity_range)
    p = np.zeros(len(residual))
    if em.zero_spread:
        p[live] = 1.0
    else:
        p[live] = pixel_posterior(residual[live], em.sigma, em.c, em.m)
    use = np.where(counts[pidx] > 0, fit, live)
    n = np.bincount(pidx[use], minlength=M)
    sq = np.bincount(pidx[use], weights=p[use] ** 2, minlength=M)
    scores = np.sqrt(sq / np.maximum(n, 1))
    inlier = (scores >= cfg.pbar_threshold) & (n > 0)
    return em, p, scores, inlier


def effective_plan(cfg: PipelineConfig, intensity_range: float) -> PatchPlan:
    """Patch plan with SLIC compactness expressed relative to the template's robust range."""
    plan = cfg.plan()
    if plan.shape == "superpixel":
        plan = dataclasses.replace(plan, compactness=cfg.compactness * max(intensity_range, 1e-12))
    return plan


def reconstruct(stacks: Sequence[Stack], cfg: PipelineConfig, mask: Optional[Volume] = None,
                track_quality: bool = True) -> Results:
    """Run the whole reconstruction on in-memory stacks."""
    t0 = time.perf_counter()
    _set_workers(cfg.workers)
    stacks, t, scales, transforms = prepare(stacks, cfg)
    masks = stack_masks(stacks, mask) if mask is not None else None
    spacing = cfg.spacing or float(min(stacks[t].in_plane_spacing))
    geometry = recon_geometry(stacks, spacing, stacks[t].geometry.axes, mask)
    lo, hi = robust_range(stacks[t].data)
    irange = max(hi - lo, 1e-12)
    n_chunks = cfg.n_chunks
    plan = effective_plan(cfg, irange)

    patches = plan_iteration(plan, 0, stacks, masks)
    if not patches:
        raise ValueError("nothing to reconstruct: no patches")
    batch = PatchBatch.build(patches, stacks, cfg.psf_support, cfg.epsilon_taylor)
    state = initialize_recon(geometry, batch, None, cfg.alpha, cfg.lam, n_chunks)
    baseline = evaluate_reconstruction(stacks, state.recon, patches, masks, cfg.region, cfg.psf_support,
                                       cfg.epsilon_taylor, batch=batch)
    log.info("baseline PSNR %.3f dB over %d slices", baseline.mean("psnr"), len(baseline.rows))

    reg_cfg = cfg.registration()
    logs: List[IterationLog] = []
    pose_rows = []
    em: Optional[EMState] = None
    registrable = np.ones(len(patches), dtype=bool)
    p_full = np.ones(batch.n_pixels)
    scores = np.ones(len(patches))
    prev = patches
    for it in range(cfg.iterations):
        ti = time.perf_counter()
        if it > 0:
            patches = plan_iteration(plan, it, stacks, masks)
            inherit_poses(patches, prev)
            batch = PatchBatch.build(patches, stacks, cfg.psf_support, cfg.epsilon_taylor)
        reg = register_batch(batch, state.recon, reg_cfg)
        registrable = reg.registrable
        for m, p in enumerate(patches):
            if registrable[m]:
                p.pose = reg.poses[m]
            p.registrable = bool(registrable[m])
            pose_rows.append((m, it) + tuple(float(v) for v in p.pose.params) + (float(reg.cc[m]),))
        batch = batch.with_poses([p.pose for p in patches])
        sim, _ = forward(state.recon, batch)
        residual = batch.vals - sim
        em, p_full, scores, inlier = _live_em(batch, residual, cfg, em, irange, lo + BACKGROUND_FRACTION * irange)
        for m, p in enumerate(patches):
            p.weights = p_full[batch.span(m)]
            p.score = float(scores[m])
            p.inlier = bool(inlier[m])
        pidx = batch.patch_index()
        scale = p_full * scores[pidx] * batch.core * inlier[pidx]
        for _ in range(cfg.sr_steps):
            state = sr_iteration(state, batch, scale, cfg.alpha, cfg.lam, n_chunks)
        M, pct = overhead_report(patches)
        q = math.nan
        if track_quality:
            q = evaluate_reconstruction(stacks, state.recon, patches, masks, cfg.region, cfg.psf_support,
                                        cfg.epsilon_taylor, batch=batch).mean("psnr")
        logs.append(IterationLog(it, plan.shape, plan.size_at(it) if plan.shape != "slice" else 0, M, pct,
                                 em.sigma if em else math.nan, em.c if em else math.nan,
                                 int((~inlier).sum()), int((~registrable).sum()),
                                 list(em.loglik) if em else [], q, time.perf_counter() - ti))
        log.info("iteration %d: %d patches, %d unregistrable, %d excluded, PSNR %.3f (%.1fs)", it, M,
                 logs[-1].n_unregistrable, logs[-1].n_excluded, q, logs[-1].seconds)
        prev = patches

    rig = rigidity_map(geometry, batch, p_full, scores, None, n_chunks)
    report = evaluate_reconstruction(stacks, state.recon, patches, masks, cfg.region, cfg.psf_support,
                                     cfg.epsilon_taylor, batch=batch)
    conf = Volume(np.maximum(state.confidence, 0.0), geometry)
    return Results(state.recon, conf, rig, report, baseline, list(patches), stacks, t, logs, pose_rows, em,
                   transforms, scales, time.perf_counter() - t0)


def evaluate_existing(stacks: Sequence[Stack], recon: Volume, cfg: PipelineConfig,
                      poses: Optional[Dict[int, RigidTransform]] = None, mask: Optional[Volume] = None):
    """Metrics of an existing reconstruction without running the loop.

    ``poses`` maps patch ids of the final iteration to their poses; missing ids
    keep the aligned slice pose.
    """
    cfg = dataclasses.replace(cfg, register_stacks=cfg.register_stacks and not poses)
    stacks, t, _, _ = prepare(stacks, cfg)
    lo, hi = robust_range(stacks[t].data)
    plan = effective_plan(cfg, hi - lo)
    masks = stack_masks(stacks, mask) if mask is not None else None
    it = max(cfg.iterations - 1, 0)
    patches = plan_iteration(plan, it, stacks, masks)
    for m, p in enumerate(patches):
        if poses and m in poses:
            p.pose = poses[m]
    report = evaluate_reconstruction(stacks, recon, patches, masks, cfg.region, cfg.psf_support,
                                     cfg.epsilon_taylor)
    return report, stacks, patches


# --- I/O ----------------------------------------------------------------------------

def load_inputs(cfg: PipelineConfig):
    if not cfg.stacks:
        raise ValueError("no input stacks given")
    stacks = [load_stack(p, cfg.thickness) for p in cfg.stacks]
    mask = load_volume(cfg.mask) if cfg.mask else None
    return stacks, mask


def _heat_volume(report: MetricReport) -> Optional[Volume]:
    """Heat maps of every stack side by side along the slice axis when the in-plane sizes agree."""
    maps = [report.heatmaps[k] for k in sorted(report.heatmaps)]
    if not maps:
        return None
    if all(m.data.shape[:2] == maps[0].data.shape[:2] for m in maps):
        data = np.concatenate([m.data for m in maps], axis=2)
        return Volume(data, dataclasses.replace(maps[0].geometry, dims=data.shape))
    return maps[0]


def versions() -> Dict[str, str]:
    """Versions of the interpreter and the numerical stack, for the manifest."""
    import platform

    import nibabel
    import numba
    import scipy

    from . import __version__

    return {"version_pvr": __version__, "version_python": platform.python_version(),
            "version_numpy": np.__version__, "version_scipy": scipy.__version__,
            "version_numba": numba.__version__, "version_nibabel": nibabel.__version__}


def emit_outputs(res: Results, cfg: PipelineConfig) -> Dict[str, Path]:
    """Write volumes, CSV tables, the manifest and (optionally) figures."""
    out: Dict[str, Path] = {}
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    save_volume(res.recon, cfg.out, "pvr reconstruction")
    out["recon"] = Path(cfg.out)
    for kind, vol in (("confidence", res.confidence), ("rigidity", res.rigidity)):
        p = cfg.path(kind)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_volume(vol, p, kind)
        out[kind] = p
    out["overhead"] = rep.write_csv(cfg.path("overhead"), rep.OVERHEAD_HEADER, rep.overhead_rows(res.iterations))
    out["poses"] = rep.write_csv(cfg.path("poses"), rep.POSES_HEADER, res.pose_rows)
    out["em"] = rep.write_csv(cfg.path("em"), rep.EM_HEADER, rep.em_rows(res.iterations))
    out["metrics"] = rep.write_csv(cfg.path("metrics"), rep.METRICS_HEADER, rep.metric_rows(res.report))
    items = cfg.to_manifest()
    items.update({
        "template_index": str(res.template),
        "intensity_params": ";".join(f"{a!r}:{b!r}" for a, b in res.intensity),
        "stack_transforms": ";".join(",".join(repr(v) for v in T.params) for T in res.stack_transforms),
        "baseline_psnr": repr(res.baseline.mean("psnr")),
        "final_psnr": repr(res.report.mean("psnr")),
        "final_ssim": repr(res.report.mean("ssim")),
        "final_cc": repr(res.report.mean("cc")),
        "final_dssim": repr(res.report.mean("dssim")),
        "seconds": f"{res.seconds:.3f}",
    })
    items.update(versions())
    write_manifest(cfg.path("manifest"), items)
    out["manifest"] = cfg.path("manifest")
    heat = _heat_volume(res.report) if cfg.dssim_out or cfg.figures else None
    if cfg.dssim_out or cfg.figures:
        if heat is not None:
            save_volume(heat, cfg.path("dssim"), "dssim heat map")
            out["dssim"] = cfg.path("dssim")
    if cfg.figures:
        stem = cfg._stem()
        if heat is not None:
            out["dssim_png"] = rep.dssim_png(heat.data, stem.with_name(stem.name + "_dssim.png"))
        out["history_png"] = rep.history_png(res.iterations, res.baseline.mean("psnr"),
                                             stem.with_name(stem.name + "_psnr.png"))
    return out


def run(cfg: PipelineConfig, metrics_only: bool = False):
    """CLI entry: load inputs, reconstruct (or only evaluate ``cfg.out``) and write outputs."""
    stacks, mask = load_inputs(cfg)
    if metrics_only:
        _set_workers(cfg.workers)
        recon = load_volume(cfg.out)
        report, _, _ = evaluate_existing(stacks, recon, cfg, mask=mask)
        path = rep.write_csv(cfg.path("metrics"), rep.METRICS_HEADER, rep.metric_rows(report))
        if cfg.dssim_out or cfg.figures:
            heat = _heat_volume(report)
            if heat is not None:
                save_volume(heat, cfg.path("dssim"), "dssim heat map")
                if cfg.figures:
                    stem = cfg._stem()
                    rep.dssim_png(heat.data, stem.with_name(stem.name + "_dssim.png"))
        return report, {"metrics": path}
    res = reconstruct(stacks, cfg, mask)
    return res, emit_outputs(res, cfg)
