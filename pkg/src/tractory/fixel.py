"""Per-voxel major fiber directions (fixels) built from tractograms.

Each voxel stores up to two antipodally-canonicalized unit directions with
support counts, ordered by support. Directions are undirected lines, so all
clustering happens on the absolute dot product; queries can sign-align the
returned directions to a caller-supplied heading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dwimath import canonicalize_sign
from .volume import Volume


@dataclass
class FixelMap:
    """directions: (nx, ny, nz, 2, 3) float32, zero rows where absent;
    support: (nx, ny, nz, 2) int32 with support[..., 0] >= support[..., 1]."""

    directions: np.ndarray
    support: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    _geom: Volume = field(init=False, repr=False)

    def __post_init__(self):
        directions = np.asarray(self.directions, dtype=np.float32)
        support = np.asarray(self.support, dtype=np.int32)
        if directions.ndim != 5 or directions.shape[3:] != (2, 3):
            raise ValueError("directions must be (nx, ny, nz, 2, 3)")
        if support.shape != directions.shape[:4]:
            raise ValueError("support must be (nx, ny, nz, 2)")
        if np.any(support[..., 0] < support[..., 1]):
            raise ValueError("fixel 1 support must be >= fixel 2 support")
        self._geom = Volume(np.zeros(directions.shape[:3] + (1,), dtype=np.uint8),
                            spacing=self.spacing, affine=self.affine)
        self.spacing = self._geom.spacing
        self.affine = self._geom.affine
        self.directions = directions
        self.support = support

    @property
    def dims(self):
        return self.directions.shape[:3]

    def world_to_voxel(self, p):
        return self._geom.world_to_voxel(p)

    def count_map(self) -> np.ndarray:
        return (self.support > 0).sum(axis=-1)


def fixels_at(fm: FixelMap, q, u_prev=None) -> np.ndarray:
    """Two direction slots at the voxel nearest to ``q`` (voxel coords).

    Missing fixels are zero vectors. With ``u_prev`` given, each returned
    direction is flipped if needed so its dot product with the previous
    step is nonnegative (antipodal canonicalization to the heading).

    ``q`` may be (3,) or (n, 3); ``u_prev`` matches. Output (..., 2, 3).
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    pts = np.atleast_2d(q)
    dims = np.asarray(fm.dims)
    idx = np.floor(pts + 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    out = fm.directions[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float).copy()
    out[~inside] = 0.0
    if u_prev is not None:
        u = np.atleast_2d(np.asarray(u_prev, dtype=float))
        dots = np.einsum("nkj,nj->nk", out, u)
        out[dots < 0] *= -1.0
    return out[0] if single else out


def segment_directions(streamlines, grid) -> tuple:
    """(voxel flat index, unit direction) for every streamline segment.

    Each segment is attributed to the voxel containing its midpoint;
    segments outside the grid are dropped.
    """
    dims = np.asarray(grid.dims[:3])
    all_idx, all_dir = [], []
    for s in streamlines:
        pts = np.asarray(s.points if hasattr(s, "points") else s, dtype=float)
        if len(pts) < 2:
            continue
        mid = grid.world_to_voxel((pts[:-1] + pts[1:]) / 2.0)
        seg = np.diff(pts, axis=0)
        norms = np.linalg.norm(seg, axis=1)
        keep = norms > 1e-12
        idx = np.floor(mid + 0.5).astype(np.int64)
        keep &= np.all((idx >= 0) & (idx < dims), axis=1)
        if not np.any(keep):
            continue
        idx = idx[keep]
        all_idx.append(np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]),
                                            tuple(dims)))
        all_dir.append(seg[keep] / norms[keep, None])
    if not all_idx:
        return np.empty(0, dtype=np.int64), np.empty((0, 3))
    return np.concatenate(all_idx), np.concatenate(all_dir)


def build_fixels(streamlines, grid, angle_thresh_deg: float = 30.0,
                 min_support: int = 5) -> FixelMap:
    """Cluster per-voxel segment directions into at most two fixels.

    Greedy angular clustering on antipodally folded directions: the seed is
    the direction with the highest local density (most neighbors within the
    angle threshold; ties broken lexicographically by presorting), members
    within the threshold are averaged (folded onto the seed hemisphere) and
    removed, and the loop repeats. Clusters below ``min_support`` are
    dropped; the two largest survive.
    """
    if hasattr(streamlines, "accepted"):
        streamlines = [s.points for s in streamlines.accepted]
    flat_idx, dirs = segment_directions(streamlines, grid)
    if flat_idx.size == 0:
        raise ValueError("cannot build fixels from an empty tractogram")
    dims = tuple(np.asarray(grid.dims[:3]))
    cos_thresh = np.cos(np.radians(angle_thresh_deg))

    out_dirs = np.zeros(dims + (2, 3), dtype=np.float32)
    out_supp = np.zeros(dims + (2,), dtype=np.int32)

    order = np.argsort(flat_idx, kind="stable")
    flat_idx, dirs = flat_idx[order], dirs[order]
    boundaries = np.flatnonzero(np.diff(flat_idx)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(flat_idx)]])
    for vstart, vend in zip(starts, ends):
        voxel_dirs = canonicalize_sign(dirs[vstart:vend])
        clusters = _greedy_line_clusters(voxel_dirs, cos_thresh)
        clusters = [c for c in clusters if c[1] >= min_support][:2]
        if not clusters:
            continue
        i, j, k = np.unravel_index(flat_idx[vstart], dims)
        for slot, (mean_dir, size) in enumerate(clusters):
            out_dirs[i, j, k, slot] = canonicalize_sign(mean_dir)
            out_supp[i, j, k, slot] = size
    return FixelMap(directions=out_dirs, support=out_supp,
                    spacing=grid.spacing, affine=grid.affine)


def _greedy_line_clusters(dirs: np.ndarray, cos_thresh: float):
    """Clusters of undirected directions, largest support first."""
    # lexicographic presort makes density ties deterministic
    order = np.lexsort((dirs[:, 2], dirs[:, 1], dirs[:, 0]))
    remaining = dirs[order]
    clusters = []
    while len(remaining):
        gram = np.abs(remaining @ remaining.T)
        density = (gram >= cos_thresh).sum(axis=1)
        seed = int(np.argmax(density))
        member = gram[seed] >= cos_thresh
        folded = remaining[member].copy()
        flip = folded @ remaining[seed] < 0
        folded[flip] *= -1.0
        mean = folded.sum(axis=0)
        mean /= max(np.linalg.norm(mean), 1e-300)
        clusters.append((mean, int(member.sum())))
        remaining = remaining[~member]
    clusters.sort(key=lambda c: -c[1])
    return clusters


def save_fixels(fm: FixelMap, stem) -> None:
    """6-channel NIfTI (two direction triplets) plus a JSON support sidecar."""
    from .nifti import write_nifti

    stem = Path(stem)
    field6 = fm.directions.reshape(fm.dims + (6,)).astype(np.float32)
    write_nifti(Volume(field6, spacing=fm.spacing, affine=fm.affine),
                stem.with_suffix(".nii.gz"))
    nz = np.argwhere(fm.support[..., 0] > 0)
    doc = {
        "format": "tractory-fixels-v1",
        "voxels": [[int(i), int(j), int(k),
                    int(fm.support[i, j, k, 0]), int(fm.support[i, j, k, 1])]
                   for i, j, k in nz],
    }
    stem.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True))


def load_fixels(stem) -> FixelMap:
    from .nifti import read_nifti

    stem = Path(stem)
    vol = read_nifti(stem.with_suffix(".nii.gz"))
    doc = json.loads(stem.with_suffix(".json").read_text())
    dims = vol.dims
    support = np.zeros(dims + (2,), dtype=np.int32)
    for i, j, k, s1, s2 in doc["voxels"]:
        support[i, j, k] = (s1, s2)
    return FixelMap(directions=np.asarray(vol.data).reshape(dims + (2, 3)),
                    support=support, spacing=vol.spacing, affine=vol.affine)
