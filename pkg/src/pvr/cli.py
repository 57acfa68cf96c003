"""Command line interface: ``pvr reconstruct | phantom | evaluate | sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .niftiio import NiftiError, save_stack, save_volume
from .register import RegistrationConfig, RegistrationError

log = logging.getLogger("pvr")

EXIT_OK, EXIT_USAGE, EXIT_REGISTRATION, EXIT_IO = 0, 1, 2, 3


def _dilation(text: str):
    """``60%`` (percent of the patch size) or ``5`` (pixels)."""
    text = text.strip()
    if text.endswith("%"):
        return float(text[:-1]), True
    return float(text), False


def _floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _add_recon_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stacks", nargs="+", required=True, help="input stacks (NIfTI)")
    p.add_argument("--mode", choices=("pvr", "svr"), default="pvr")
    p.add_argument("--patch-shape", choices=("square", "superpixel"), default="square")
    p.add_argument("--patch-size", type=int, default=32, help="patch size a (pixels)")
    p.add_argument("--stride", type=int, default=16, help="square patch stride omega (pixels)")
    p.add_argument("--compactness", type=float, default=0.1,
                   help="SLIC compactness as a fraction of the template's robust intensity range")
    p.add_argument("--dilation", default="60%", help="patch dilation: N pixels or P%% of the patch size")
    p.add_argument("--schedule", choices=("fixed", "multiscale"), default="fixed")
    p.add_argument("--scales", type=_floats, default=(1.0, 0.75, 0.5625),
                   help="comma separated size factors per iteration (multiscale)")
    p.add_argument("--iterations", type=int, default=3, help="outer iterations")
    p.add_argument("--sr-steps", type=int, default=7, help="super-resolution steps per outer iteration")
    p.add_argument("--alpha", type=float, default=0.9, help="SR step size")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01, help="Laplacian smoothing weight")
    p.add_argument("--psf-support", type=float, default=2.0, help="in-plane PSF support in pixel units")
    p.add_argument("--epsilon-taylor", type=float, default=1e-6, help="Taylor sinc truncation tolerance")
    p.add_argument("--reg-levels", type=int, default=3, help="registration pyramid levels")
    p.add_argument("--reg-iters", type=int, default=20, help="accepted moves per registration level")
    p.add_argument("--rot-step", type=float, default=4.0, help="initial rotation step (degrees)")
    p.add_argument("--trans-step", type=float, default=2.0, help="initial translation step (mm)")
    p.add_argument("--em-rounds", type=int, default=20)
    p.add_argument("--pbar-threshold", type=float, default=0.5, help="patch score below which a patch is excluded")
    p.add_argument("--template", default="auto", help="'auto' or a stack index")
    p.add_argument("--no-stack-registration", action="store_true", help="skip global stack-to-template alignment")
    p.add_argument("--thickness", type=float, help="slice thickness (mm); default from the header")
    p.add_argument("--spacing", type=float, help="reconstruction voxel size (mm)")
    p.add_argument("--mask", help="binary mask volume (NIfTI)")
    p.add_argument("--region", default="whole", help="region label written to the metrics table")
    p.add_argument("--out", default="recon.nii.gz", help="reconstruction path")
    p.add_argument("--confidence-out")
    p.add_argument("--rigidity-out")
    p.add_argument("--metrics-csv")
    p.add_argument("--dssim-out", help="DSSIM heat map volume")
    p.add_argument("--figures", action="store_true", help="render PNG figures next to the outputs")
    p.add_argument("--seed", type=int, default=0, help="recorded in the manifest; the reconstruction is deterministic")
    p.add_argument("--workers", type=int, help="worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction chunks: bit-identical output for any worker count")


def config_from_args(args):
    from .pipeline import PipelineConfig

    dil, pct = _dilation(args.dilation)
    levels = RegistrationConfig.with_levels(args.reg_levels).levels
    return PipelineConfig(
        stacks=list(args.stacks), mode=args.mode, patch_shape=args.patch_shape, patch_size=args.patch_size,
        stride=args.stride, compactness=args.compactness, dilation=dil, dilation_percent=pct,
        schedule=args.schedule, scales=args.scales, iterations=args.iterations, sr_steps=args.sr_steps,
        alpha=args.alpha, lam=args.lam, psf_support=args.psf_support, epsilon_taylor=args.epsilon_taylor,
        reg_levels=levels, reg_iters=args.reg_iters, rot_step=args.rot_step, trans_step=args.trans_step,
        em_rounds=args.em_rounds, pbar_threshold=args.pbar_threshold, template=args.template,
        register_stacks=not args.no_stack_registration, mask=args.mask, spacing=args.spacing,
        thickness=args.thickness, region=args.region, seed=args.seed, workers=args.workers,
        deterministic=args.deterministic, out=args.out, confidence_out=args.confidence_out,
        rigidity_out=args.rigidity_out, metrics_csv=args.metrics_csv, dssim_out=args.dssim_out,
        figures=args.figures)


def cmd_reconstruct(args) -> int:
    from .pipeline import run

    cfg = config_from_args(args)
    if args.metrics_only:
        report, paths = run(cfg, metrics_only=True)
        log.info("metrics: PSNR %.3f dB over %d slices -> %s", report.mean("psnr"), len(report.rows),
                 paths["metrics"])
        return EXIT_OK
    res, paths = run(cfg)
    log.info("baseline PSNR %.3f dB, final %.3f dB (%.1fs)", res.baseline.mean("psnr"), res.report.mean("psnr"),
             res.seconds)
    for k, p in paths.items():
        log.info("wrote %s: %s", k, p)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    args.metrics_only = True
    if args.recon:
        args.out = args.recon
    return cmd_reconstruct(args)


def cmd_phantom(args) -> int:
    from .phantom import ORIENTATIONS, corrupted_stacks, make_phantom

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    orients = [o.strip() for o in args.orientations.split(",") if o.strip()]
    bad = [o for o in orients if o not in ORIENTATIONS]
    if bad:
        raise ValueError(f"unknown orientation(s) {bad}; choose from {ORIENTATIONS}")
    gt = make_phantom(args.kind, size=args.size, spacing=args.spacing, path=args.path)
    stacks = corrupted_stacks(gt, args.theta, orients, args.interleave, tuple(args.stack_spacing),
                              noise_sigma=args.noise, seed=args.seed)
    save_volume(gt, out / "ground_truth.nii.gz", "ground truth")
    paths = []
    for st in stacks:
        p = out / f"stack_{st.name}.nii.gz"
        save_stack(st, p)
        paths.append(p.name)
    with open(out / "manifest.txt", "w") as fh:
        for k, v in (("kind", args.kind), ("size", args.size), ("spacing", args.spacing), ("theta", args.theta),
                     ("interleave", args.interleave), ("orientations", ",".join(orients)),
                     ("stack_spacing", ",".join(str(v) for v in args.stack_spacing)), ("noise", args.noise),
                     ("seed", args.seed), ("ground_truth", "ground_truth.nii.gz"), ("stacks", ",".join(paths))):
            fh.write(f"{k}={v}\n")
    log.info("wrote %d stacks to %s", len(stacks), out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import default_overhead_configs, overhead_comparison, skew_sweep, write_overhead
    from .phantom import corrupted_stacks, make_phantom

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = skew_sweep(args.thetas, methods, size=args.size, seed=args.seed, out_dir=args.out_dir,
                      workers=args.workers, deterministic=args.deterministic)
    stacks = corrupted_stacks(make_phantom(size=args.size), max(args.thetas), seed=args.seed)
    write_overhead(overhead_comparison(stacks, default_overhead_configs()), args.out_dir)
    for r in rows:
        print(f"theta={r['theta']:g} {r['method']}: {r['baseline_psnr']:.3f} -> {r['psnr']:.3f} dB "
              f"(+{r['improvement_pct']:.2f}%)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvr", description="Patch-to-volume reconstruction of motion-corrupted stacks.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="reconstruct a volume from slice stacks")
    _add_recon_args(p)
    p.add_argument("--metrics-only", action="store_true", help="evaluate the existing --out volume only")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="slice metrics of an existing reconstruction")
    _add_recon_args(p)
    p.add_argument("--recon", help="reconstruction to evaluate (defaults to --out)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="write a phantom and skew-corrupted stacks")
    p.add_argument("--kind", choices=("geometric", "loaded"), default="geometric")
    p.add_argument("--path", help="volume to load for --kind loaded")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.0, help="skew angle (degrees)")
    p.add_argument("--interleave", type=int, default=1)
    p.add_argument("--orientations", default="axial,coronal,sagittal")
    p.add_argument("--stack-spacing", type=_floats, default=(1.25, 1.25, 2.5))
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sweep", help="skew sweep and overhead comparison on the phantom")
    p.add_argument("--thetas", type=_floats, default=(1.0, 2.0, 4.0, 6.0, 8.0))
    p.add_argument("--methods", default="svr,pvr-square,pvr-superpixel")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegistrationError as exc:
        log.error("registration failed: %s", exc)
        return EXIT_REGISTRATION
    except (NiftiError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ValueError, IndexError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
