"""Regular-grid 3D volumes with world/voxel transforms and trilinear interpolation.

Conventions
-----------
* Data values live at voxel centers. Continuous voxel coordinate
  ``(0, 0, 0)`` is the center of the first voxel; ``(nx-1, ny-1, nz-1)``
  is the center of the last one.
* The affine maps homogeneous voxel indices to world millimeters:
  ``world = affine[:3, :3] @ (i, j, k) + affine[:3, 3]``.
* Out-of-range queries clamp to the nearest edge value (no mirroring).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Tissue classes used throughout the pipeline.
LABEL_BACKGROUND = 0
LABEL_CSF = 1
LABEL_CORTICAL_GM = 2
LABEL_SUBCORTICAL_GM = 3
LABEL_WM = 4
ALL_LABELS = (LABEL_BACKGROUND, LABEL_CSF, LABEL_CORTICAL_GM, LABEL_SUBCORTICAL_GM, LABEL_WM)
GM_LABELS = (LABEL_CORTICAL_GM, LABEL_SUBCORTICAL_GM)


def default_affine(spacing) -> np.ndarray:
    """Diagonal voxel->world affine with zero offset."""
    a = np.eye(4)
    a[0, 0], a[1, 1], a[2, 2] = spacing
    return a


@dataclass
class Volume:
    """A multi-channel scalar field on a regular 3D grid.

    ``data`` has shape ``(nx, ny, nz, channels)`` and is frozen after
    construction, so volumes can be shared freely across workers.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    _inv_affine: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("volume dimensions must be positive")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("spacing must be 3 positive reals")
        if self.affine is None:
            self.affine = default_affine(self.spacing)
        self.affine = np.asarray(self.affine, dtype=float)
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        det = np.linalg.det(self.affine[:3, :3])
        if abs(det) < 1e-300:
            raise ValueError("affine upper-left 3x3 block is singular")
        self._inv_affine = np.linalg.inv(self.affine)
        data.flags.writeable = False
        self.data = data

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def scalar(self) -> np.ndarray:
        """The single channel of a 1-channel volume, shape (nx, ny, nz)."""
        if self.channels != 1:
            raise ValueError("scalar view requires a 1-channel volume")
        return self.data[..., 0]

    # -- coordinate transforms -------------------------------------------

    def voxel_to_world(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return q @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self._inv_affine[:3, :3].T + self._inv_affine[:3, 3]

    def world_dir_to_voxel(self, d) -> np.ndarray:
        """Map world-space direction vectors into voxel space (no offset)."""
        d = np.asarray(d, dtype=float)
        return d @ self._inv_affine[:3, :3].T

    # -- sampling ---------------------------------------------------------

    def interp(self, q, with_flag: bool = False):
        """Trilinear interpolation at continuous voxel coordinates ``q``.

        ``q`` may be one point ``(3,)`` or a batch ``(n, 3)``. Out-of-range
        coordinates clamp to the grid edge; ``with_flag=True`` also returns
        a boolean marking such extrapolated queries.
        """
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        pts = np.atleast_2d(q)
        vals, clamped = _trilinear(self.data, pts)
        if single:
            vals, clamped = vals[0], bool(clamped[0])
        return (vals, clamped) if with_flag else vals

    def neighborhood(self, q) -> np.ndarray:
        """Channel values at the 27 voxel centers nearest to ``q``.

        Raster order is z-major: the z offset varies slowest, x fastest
        (offset index = (dz+1)*9 + (dy+1)*3 + (dx+1)). Border queries clamp
        indices to the grid, producing duplicated entries.
        """
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        pts = np.atleast_2d(q)
        out = _neighborhood27(self.data, pts)
        return out[0] if single else out

    def nearest_index(self, q) -> np.ndarray:
        """Integer index of the voxel whose center is nearest to ``q`` (clamped)."""
        q = np.asarray(q, dtype=float)
        idx = np.floor(np.atleast_2d(q) + 0.5).astype(np.int64)
        np.clip(idx, 0, np.asarray(self.dims) - 1, out=idx)
        return idx[0] if q.ndim == 1 else idx


def _trilinear(data: np.ndarray, pts: np.ndarray):
    dims = np.asarray(data.shape[:3])
    qc = np.clip(pts, 0.0, dims - 1.0)
    clamped = np.any(qc != pts, axis=1)
    lo = np.minimum(np.floor(qc).astype(np.int64), np.maximum(dims - 2, 0))
    lo = np.maximum(lo, 0)
    hi = np.minimum(lo + 1, dims - 1)
    t = np.clip(qc - lo, 0.0, 1.0)

    ix0, iy0, iz0 = lo[:, 0], lo[:, 1], lo[:, 2]
    ix1, iy1, iz1 = hi[:, 0], hi[:, 1], hi[:, 2]
    tx, ty, tz = (t[:, k][:, None] for k in range(3))

    c000 = data[ix0, iy0, iz0]
    c100 = data[ix1, iy0, iz0]
    c010 = data[ix0, iy1, iz0]
    c110 = data[ix1, iy1, iz0]
    c001 = data[ix0, iy0, iz1]
    c101 = data[ix1, iy0, iz1]
    c011 = data[ix0, iy1, iz1]
    c111 = data[ix1, iy1, iz1]

    c00 = c000 + (c100 - c000) * tx
    c10 = c010 + (c110 - c010) * tx
    c01 = c001 + (c101 - c001) * tx
    c11 = c011 + (c111 - c011) * tx
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    return c0 + (c1 - c0) * tz, clamped


_OFFSETS27 = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
    dtype=np.int64,
)


def _neighborhood27(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    dims = np.asarray(data.shape[:3])
    center = np.floor(pts + 0.5).astype(np.int64)
    np.clip(center, 0, dims - 1, out=center)
    idx = center[:, None, :] + _OFFSETS27[None, :, :]
    np.clip(idx, 0, dims - 1, out=idx)
    return data[idx[..., 0], idx[..., 1], idx[..., 2]]


@dataclass
class LabelVolume:
    """Integer tissue labels on a regular grid (one label per voxel)."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    _geom: Volume = field(init=False, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError("labels must be a 3D integer array")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        bad = np.setdiff1d(np.unique(labels), np.asarray(ALL_LABELS))
        if bad.size:
            raise ValueError(f"unknown labels present: {bad.tolist()}")
        # geometry helper; shares the validated affine logic with Volume
        self._geom = Volume(np.zeros(labels.shape[:3] + (1,), dtype=np.uint8),
                            spacing=self.spacing, affine=self.affine)
        self.spacing = self._geom.spacing
        self.affine = self._geom.affine
        labels.flags.writeable = False
        self.labels = labels

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    def voxel_to_world(self, q):
        return self._geom.voxel_to_world(q)

    def world_to_voxel(self, p):
        return self._geom.world_to_voxel(p)

    def label_at_voxel(self, q) -> np.ndarray:
        """Nearest-voxel label lookup; coordinates outside the grid map to background."""
        q = np.asarray(q, dtype=float)
        single = q.ndim == 1
        pts = np.atleast_2d(q)
        idx = np.floor(pts + 0.5).astype(np.int64)
        dims = np.asarray(self.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        idx_c = np.clip(idx, 0, dims - 1)
        out = np.where(inside, self.labels[idx_c[:, 0], idx_c[:, 1], idx_c[:, 2]],
                       LABEL_BACKGROUND)
        return out[0] if single else out

    def label_at_world(self, p) -> np.ndarray:
        return self.label_at_voxel(self.world_to_voxel(p))


# Spec-facing functional aliases.

def world_to_voxel(v, p):
    return v.world_to_voxel(p)


def voxel_to_world(v, q):
    return v.voxel_to_world(q)


def interp_trilinear(v: Volume, q, with_flag: bool = False):
    return v.interp(q, with_flag=with_flag)


def neighborhood_values(v: Volume, q):
    return v.neighborhood(q)


def check_same_grid(a, b, what: str = "volumes") -> None:
    """Raise if two volumes do not share dims, spacing and affine."""
    if a.dims != b.dims or not np.allclose(a.affine, b.affine, atol=1e-9):
        raise ValueError(f"{what} are not on the same grid")


def warn_once(message: str) -> None:
    warnings.warn(message, stacklevel=3)
