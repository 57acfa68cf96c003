"""NIfTI-1 reading and writing for volumes and slice stacks."""

from __future__ import annotations

import os
import re

import nibabel as nib
import numpy as np

from .volgrid import Geometry, Stack, Volume


class NiftiError(IOError):
    pass


def geometry_from_affine(affine: np.ndarray, dims) -> Geometry:
    affine = np.asarray(affine, dtype=float)
    M = affine[:3, :3]
    spacing = np.linalg.norm(M, axis=0)
    if np.any(spacing <= 0):
        raise NiftiError("degenerate affine (zero voxel size)")
    axes = M / spacing[None, :]
    if not np.allclose(axes.T @ axes, np.eye(3), atol=1e-4):
        raise NiftiError("sheared affines are not supported")
    # re-orthonormalise to kill header rounding
    u, _, vt = np.linalg.svd(axes)
    return Geometry(tuple(dims), tuple(spacing), tuple(affine[:3, 3]), u @ vt)


def _load(path):
    if not os.path.exists(path):
        raise NiftiError(f"no such file: {path}")
    try:
        img = nib.load(path)
        data = np.asarray(img.dataobj, dtype=np.float64)
    except Exception as exc:  # nibabel raises a zoo of types
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise NiftiError(f"{path}: expected a 3D image, got shape {data.shape}")
    return img, data


def load_volume(path) -> Volume:
    img, data = _load(path)
    return Volume(data, geometry_from_affine(img.affine, data.shape))


def save_volume(vol: Volume, path, description: str = "") -> None:
    img = nib.Nifti1Image(vol.data.astype(np.float32), vol.affine)
    img.header.set_xyzt_units("mm")
    if description:
        img.header["descrip"] = description[:79].encode()
    img.set_qform(vol.affine, code=1)
    img.set_sform(vol.affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc


def _descrip(img) -> str:
    raw = img.header.get("descrip")
    if raw is None:
        return ""
    return bytes(np.asarray(raw).tobytes()).split(b"\x00")[0].decode("ascii", "ignore")


def load_stack(path, thickness: float | None = None) -> Stack:
    """Read a stack; slice thickness comes from the header note, else the slice spacing."""
    img, data = _load(path)
    geom = geometry_from_affine(img.affine, data.shape)
    desc = _descrip(img)
    interleave = 1
    if thickness is None:
        m = re.search(r"thickness=([0-9.eE+-]+)", desc)
        thickness = float(m.group(1)) if m else geom.spacing[2]
    m = re.search(r"interleave=(\d+)", desc)
    if m:
        interleave = int(m.group(1))
    return Stack(data, geom, float(thickness), interleave=interleave, name=os.path.basename(str(path)))


def save_stack(stack: Stack, path) -> None:
    """Slices go along the third axis; thickness and interleave tag ride in ``descrip``."""
    save_volume(Volume(stack.data, stack.geometry), path,
                description=f"thickness={stack.thickness:g} interleave={stack.interleave}")
