"""Synthetic desk-scale fiber phantoms.

Each phantom is a set of tubular bundles on a 64^3 grid (1.2 mm spacing by
default, so the 0.6 mm tracking step is half a voxel). Bundle interiors are
white matter with prolate tensors aligned to the centerline tangent; 2-voxel
gray-matter caps close both ends; the rest of the brain mask is CSF. Where
bundles overlap, each voxel carries the dominant bundle's principal axis
with FA pulled toward isotropy by the secondary bundle's presence — the
single-tensor ambiguity a learned tracker has to overcome.

Signals can be simulated at b=500 with Rician noise and refit, so the ODF,
FA and tensor volumes the tracker sees are realistically noisy while the
reference streamlines, labels and fixel ground truth stay clean.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tck
from .dwimath import GradientScheme, fa as fa_of, fit_tensor_volume, tensor_volume_to_odf_sh
from .evalmod import density_map
from .fixel import FixelMap
from .rng import stream
from .volume import (
    LABEL_CORTICAL_GM,
    LABEL_CSF,
    LABEL_WM,
    LabelVolume,
    Volume,
    default_affine,
)

CAP_VOXELS = 2            # gray-matter cap thickness at each bundle end
MD_WM = 1.0e-3            # mm^2/s
MD_GM = 1.0e-3
MD_CSF = 3.0e-3

# fixed fractional grid positions of the five cortex keypoints (non-coplanar)
KEYPOINT_FRACTIONS = np.array([
    (0.10, 0.50, 0.42),
    (0.90, 0.22, 0.38),
    (0.50, 0.90, 0.30),
    (0.34, 0.10, 0.55),
    (0.55, 0.62, 0.92),
])


@dataclass
class BundleDef:
    """Serializable description of one bundle's centerline and tissue target."""

    name: str
    kind: str                 # 'line' | 'arc' | 'elbow'
    params: dict
    radius_mm: float = 4.2
    fa_target: float = 0.30


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.2, 1.2, 1.2)
    bundles: list = field(default_factory=list)
    noise_sigma: float = 0.05
    n_gradient_dirs: int = 30
    bval: float = 500.0
    s0: float = 1.0
    seed: int = 0
    gt_step_mm: float = 0.6
    gt_offset_spacing_mm: float = 0.55

    def validate(self) -> None:
        if min(self.dims) < 8 or min(self.spacing) <= 0:
            raise ValueError("phantom grid must be at least 8^3 with positive spacing")
        if not self.bundles:
            raise ValueError("phantom needs at least one bundle")
        for b in self.bundles:
            if b.radius_mm < min(self.spacing):
                raise ValueError(f"bundle {b.name}: radius below one voxel")
            if not 0.0 < b.fa_target <= 0.95:
                raise ValueError(f"bundle {b.name}: fa_target out of range")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims), "spacing": list(self.spacing),
            "bundles": [{"name": b.name, "kind": b.kind, "params": b.params,
                         "radius_mm": b.radius_mm, "fa_target": b.fa_target}
                        for b in self.bundles],
            "noise_sigma": self.noise_sigma, "n_gradient_dirs": self.n_gradient_dirs,
            "bval": self.bval, "s0": self.s0, "seed": self.seed,
            "gt_step_mm": self.gt_step_mm,
            "gt_offset_spacing_mm": self.gt_offset_spacing_mm,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        bundles = [BundleDef(**b) for b in doc.pop("bundles")]
        doc["dims"] = tuple(doc.get("dims", (64, 64, 64)))
        doc["spacing"] = tuple(doc.get("spacing", (1.2, 1.2, 1.2)))
        return cls(bundles=bundles, **doc)


class BundleGeometry:
    """Densely sampled centerline with arclength, tangents and a transported
    normal frame; answers nearest-point queries for field construction."""

    def __init__(self, bdef: BundleDef, cap_mm: float, ds: float = 0.12):
        self.bdef = bdef
        self.cap_mm = cap_mm
        core = _centerline_points(bdef, ds)
        # straight extensions beyond both ends carry the GM caps
        ext = cap_mm + 1.0
        t0 = _unit(core[1] - core[0])
        t1 = _unit(core[-1] - core[-2])
        n0 = max(2, int(round(ext / ds)))
        pre = core[0] - t0 * ds * np.arange(n0, 0, -1)[:, None]
        post = core[-1] + t1 * ds * np.arange(1, n0 + 1)[:, None]
        pts = np.vstack([pre, core, post])

        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.points = pts
        self.wm_lo = self.s[n0]
        self.wm_hi = self.s[n0 + len(core) - 1]
        self.tangents = _polyline_tangents(pts)
        self.n1, self.n2 = _transported_frame(self.tangents)
        self._tree = cKDTree(pts)

    @property
    def radius(self) -> float:
        return self.bdef.radius_mm

    def query(self, points):
        """(distance to centerline, arclength s, tangent) at world points."""
        dist, idx = self._tree.query(np.atleast_2d(points))
        return dist, self.s[idx], self.tangents[idx]

    def core_weight(self, dist, s, margin: float = 0.0):
        """Membership weight in [0, 1]: 1 on the axis, 0 at the tube edge."""
        inside = (dist <= self.radius + margin) & (s >= self.wm_lo) & (s <= self.wm_hi)
        w = np.where(inside, np.maximum(1e-3, 1.0 - dist / self.radius), 0.0)
        return w

    def in_cap(self, dist, s, margin: float = 0.0):
        radial = dist <= self.radius + margin
        cap_a = radial & (s < self.wm_lo) & (s >= self.wm_lo - self.cap_mm)
        cap_b = radial & (s > self.wm_hi) & (s <= self.wm_hi + self.cap_mm)
        return cap_a, cap_b

    def reference_streamlines(self, step_mm: float, offset_spacing: float,
                              voxel_diag: float):
        """The ground-truth curve family, resampled at ``step_mm`` arclength.

        Offsets form a hex grid across the tube cross-section, stopping a
        voxel half-diagonal short of the wall so every sample's containing
        voxel center is still inside the labelled tube. Curves span from
        mid-cap to mid-cap so both endpoints land in GM.
        """
        out = []
        lo = np.searchsorted(self.s, self.wm_lo - 0.5 * self.cap_mm)
        hi = np.searchsorted(self.s, self.wm_hi + 0.5 * self.cap_mm)
        base = self.points[lo:hi]
        n1, n2 = self.n1[lo:hi], self.n2[lo:hi]
        max_offset = self.radius - 0.5 * voxel_diag - 0.1
        if max_offset <= 0:
            raise ValueError(
                f"bundle {self.bdef.name!r} too thin for reference coverage")
        for a, b in _hex_grid(max_offset, offset_spacing):
            curve = base + a * n1 + b * n2
            out.append(_resample_polyline(curve, step_mm))
        return out


def _unit(v):
    return v / np.linalg.norm(v)


def _centerline_points(bdef: BundleDef, ds: float) -> np.ndarray:
    p = bdef.params
    if bdef.kind == "line":
        p0, p1 = np.asarray(p["p0"], float), np.asarray(p["p1"], float)
        n = max(2, int(round(np.linalg.norm(p1 - p0) / ds)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        return p0 + t * (p1 - p0)
    if bdef.kind == "arc":
        center = np.asarray(p["center"], float)
        e1 = _unit(np.asarray(p["e1"], float))
        e2 = np.asarray(p["e2"], float)
        e2 = _unit(e2 - (e2 @ e1) * e1)
        r = float(p["radius_mm"])
        a0, a1 = np.radians(p["angle_deg0"]), np.radians(p["angle_deg1"])
        n = max(2, int(round(abs(a1 - a0) * r / ds)) + 1)
        ang = np.linspace(a0, a1, n)[:, None]
        return center + r * (np.cos(ang) * e1 + np.sin(ang) * e2)
    if bdef.kind == "elbow":
        return _elbow_points(np.asarray(p["p0"], float), np.asarray(p["corner"], float),
                             np.asarray(p["p1"], float), float(p["fillet_mm"]), ds)
    raise ValueError(f"unknown bundle kind {bdef.kind!r}")


def _elbow_points(p0, corner, p1, fillet, ds):
    """Line -> circular fillet -> line, C1-continuous."""
    d1 = _unit(corner - p0)
    d2 = _unit(p1 - corner)
    cos_turn = np.clip(d1 @ d2, -1.0, 1.0)
    turn = np.arccos(cos_turn)
    if turn < 1e-6:
        return _centerline_points(
            BundleDef("", "line", {"p0": p0.tolist(), "p1": p1.tolist()}), ds)
    setback = fillet * np.tan(turn / 2.0)
    a = corner - d1 * setback      # fillet start
    b = corner + d2 * setback      # fillet end
    axis = _unit(np.cross(d1, d2))
    center = a + fillet * _unit(np.cross(axis, d1))
    parts = []
    n = max(2, int(round(np.linalg.norm(a - p0) / ds)) + 1)
    parts.append(p0 + np.linspace(0, 1, n)[:, None] * (a - p0))
    n = max(2, int(round(fillet * turn / ds)) + 1)
    va = a - center
    for ang in np.linspace(0.0, turn, n)[1:]:
        rot = _rotation_about(axis, ang)
        parts.append((center + rot @ va)[None, :])
    n = max(2, int(round(np.linalg.norm(p1 - b) / ds)) + 1)
    parts.append(b + np.linspace(0, 1, n)[1:, None] * (p1 - b))
    return np.vstack(parts)


def _rotation_about(axis, angle):
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def _polyline_tangents(pts: np.ndarray) -> np.ndarray:
    t = np.empty_like(pts)
    t[1:-1] = pts[2:] - pts[:-2]
    t[0] = pts[1] - pts[0]
    t[-1] = pts[-1] - pts[-2]
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _transported_frame(tangents: np.ndarray):
    """Rotation-minimizing normal frame along the curve (projection transport)."""
    n = np.empty_like(tangents)
    t0 = tangents[0]
    seed = np.zeros(3)
    seed[np.argmin(np.abs(t0))] = 1.0
    n[0] = _unit(np.cross(t0, seed))
    for i in range(1, len(tangents)):
        v = n[i - 1] - (n[i - 1] @ tangents[i]) * tangents[i]
        n[i] = _unit(v)
    n2 = np.cross(tangents, n)
    return n, n2


def _hex_grid(max_radius: float, spacing: float):
    """Offset pairs (a, b) on a hex lattice within the given radius."""
    out = [(0.0, 0.0)]
    if max_radius <= 0:
        return out
    ny = int(np.ceil(max_radius / (spacing * np.sqrt(3) / 2))) + 1
    nx = int(np.ceil(max_radius / spacing)) + 1
    for j in range(-ny, ny + 1):
        for i in range(-nx, nx + 1):
            a = (i + 0.5 * (j % 2)) * spacing
            b = j * spacing * np.sqrt(3) / 2
            if 0 < np.hypot(a, b) <= max_radius:
                out.append((a, b))
    return out


def _resample_polyline(pts: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(0.0, s[-1] + 1e-9, step)
    return np.column_stack([np.interp(targets, s, pts[:, k]) for k in range(3)])


def prolate_tensor(tangent: np.ndarray, fa_target: float, mean_diff: float) -> np.ndarray:
    """6-vector prolate tensor with the given FA, MD and principal axis.

    Eigenvalues m(1+2d), m(1-d), m(1-d) with d = FA / sqrt(3 - 2 FA^2).
    """
    t = np.atleast_2d(tangent)
    fa_arr = np.broadcast_to(np.asarray(fa_target, dtype=float), (t.shape[0],))
    out = _prolate_batch(t, fa_arr, mean_diff)
    return out[0] if np.asarray(tangent).ndim == 1 else out


@dataclass
class BundleTruth:
    name: str
    streamlines: list
    mask: np.ndarray          # bool (nx, ny, nz): footprint of the reference tracks
    cap_a: np.ndarray         # bool: endpoint regions used for assignment
    cap_b: np.ndarray


@dataclass
class PhantomDataset:
    spec: PhantomSpec
    odf: Volume
    fa: Volume
    tensors: Volume
    labels: LabelVolume
    keypoints: np.ndarray
    fixels_true: FixelMap
    bundles: list
    _geometries: list = field(default_factory=list, repr=False)

    @property
    def truth_masks(self) -> dict:
        return {b.name: b.mask for b in self.bundles}

    @property
    def caps(self) -> dict:
        return {b.name: (b.cap_a, b.cap_b) for b in self.bundles}

    @property
    def reference_streamlines(self) -> list:
        out = []
        for b in self.bundles:
            out.extend(b.streamlines)
        return out

    def tangent_at(self, points):
        """Dominant-bundle tangent at world points (oracle for tests).

        Returns (directions, valid); invalid rows (outside every bundle)
        are zero. Only available on generated (not loaded) datasets.
        """
        if not self._geometries:
            raise ValueError("tangent oracle unavailable on a loaded dataset")
        points = np.atleast_2d(points)
        best_w = np.zeros(len(points))
        out = np.zeros((len(points), 3))
        for geom in self._geometries:
            dist, s, tan = geom.query(points)
            w = geom.core_weight(dist, s, margin=geom.radius * 0.1)
            take = w > best_w
            out[take] = tan[take]
            best_w = np.maximum(best_w, w)
        return out, best_w > 0

    def save(self, outdir) -> None:
        from .fixel import save_fixels
        from .nifti import write_nifti

        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_nifti(Volume(self.odf.data.astype(np.float32), spacing=self.odf.spacing,
                           affine=self.odf.affine), outdir / "odf.nii.gz")
        write_nifti(Volume(self.fa.data.astype(np.float32), spacing=self.fa.spacing,
                           affine=self.fa.affine), outdir / "fa.nii.gz")
        write_nifti(Volume(self.tensors.data.astype(np.float32),
                           spacing=self.tensors.spacing, affine=self.tensors.affine),
                    outdir / "tensors.nii.gz")
        write_nifti(self.labels, outdir / "labels.nii.gz")
        save_fixels(self.fixels_true, outdir / "fixels_true")
        bundles_doc = []
        for b in self.bundles:
            tck.write_tck(outdir / f"tracks_{b.name}.tck", b.streamlines,
                          metadata={"bundle": b.name})
            masks = np.zeros(self.labels.dims, dtype=np.uint8)
            masks[b.mask] = 1
            caps = np.zeros(self.labels.dims, dtype=np.uint8)
            caps[b.cap_a] = 1
            caps[b.cap_b] = 2
            write_nifti(Volume(masks, spacing=self.labels.spacing,
                               affine=self.labels.affine), outdir / f"mask_{b.name}.nii.gz")
            write_nifti(Volume(caps, spacing=self.labels.spacing,
                               affine=self.labels.affine), outdir / f"caps_{b.name}.nii.gz")
            bundles_doc.append(b.name)
        manifest = {
            "format": "tractory-phantom-v1",
            "spec": self.spec.to_dict(),
            "keypoints": self.keypoints.tolist(),
            "bundles": bundles_doc,
            "files": {
                "odf": "odf.nii.gz", "fa": "fa.nii.gz", "tensors": "tensors.nii.gz",
                "labels": "labels.nii.gz", "fixels": "fixels_true",
            },
        }
        (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                         sort_keys=True))

    @classmethod
    def load(cls, datadir) -> "PhantomDataset":
        from .fixel import load_fixels
        from .nifti import read_nifti

        datadir = Path(datadir)
        manifest = json.loads((datadir / "manifest.json").read_text())
        spec = PhantomSpec.from_dict(manifest["spec"])
        files = manifest["files"]
        labels = read_nifti(datadir / files["labels"], as_labels=True)
        bundles = []
        for name in manifest["bundles"]:
            tracks, _ = tck.read_tck(datadir / f"tracks_{name}.tck")
            mask = read_nifti(datadir / f"mask_{name}.nii.gz").scalar > 0
            capvol = read_nifti(datadir / f"caps_{name}.nii.gz").scalar
            bundles.append(BundleTruth(name=name, streamlines=tracks, mask=mask,
                                       cap_a=capvol == 1, cap_b=capvol == 2))
        return cls(
            spec=spec,
            odf=read_nifti(datadir / files["odf"]),
            fa=read_nifti(datadir / files["fa"]),
            tensors=read_nifti(datadir / files["tensors"]),
            labels=labels,
            keypoints=np.asarray(manifest["keypoints"], dtype=float),
            fixels_true=load_fixels(datadir / files["fixels"]),
            bundles=bundles,
        )


def simulate_signals(tensors: np.ndarray, scheme: GradientScheme, sigma: float,
                     rng: np.random.Generator, s0: float = 1.0) -> np.ndarray:
    """dMRI signals S = S0 exp(-b g^T D g) with Rician noise of scale sigma.

    ``tensors`` is (..., 6); output (..., n_dirs). sigma=0 is exact.
    """
    tensors = np.asarray(tensors, dtype=float)
    g = scheme.directions
    quad = (tensors[..., None, 0] * g[:, 0] ** 2
            + 2 * tensors[..., None, 1] * g[:, 0] * g[:, 1]
            + 2 * tensors[..., None, 2] * g[:, 0] * g[:, 2]
            + tensors[..., None, 3] * g[:, 1] ** 2
            + 2 * tensors[..., None, 4] * g[:, 1] * g[:, 2]
            + tensors[..., None, 5] * g[:, 2] ** 2)
    signal = s0 * np.exp(-scheme.bvals * quad)
    if sigma > 0:
        n1 = rng.normal(scale=sigma, size=signal.shape)
        n2 = rng.normal(scale=sigma, size=signal.shape)
        signal = np.sqrt((signal + n1) ** 2 + n2 ** 2)
    return signal


def keypoints_for_grid(dims, affine) -> np.ndarray:
    """The five fixed cortex keypoints in world mm for a given grid."""
    vox = KEYPOINT_FRACTIONS * (np.asarray(dims, dtype=float) - 1.0)
    return vox @ affine[:3, :3].T + affine[:3, 3]


def generate(spec: PhantomSpec) -> PhantomDataset:
    """Build the full dataset for a phantom specification."""
    spec.validate()
    dims = tuple(spec.dims)
    affine = default_affine(spec.spacing)
    cap_mm = CAP_VOXELS * float(np.mean(spec.spacing))
    voxel_diag = float(np.linalg.norm(spec.spacing))

    geoms = [BundleGeometry(b, cap_mm) for b in spec.bundles]

    extent_mm = (np.asarray(dims) - 1.0) * np.asarray(spec.spacing)
    for geom in geoms:
        clearance = geom.radius + 0.5 * voxel_diag
        if (np.any(geom.points < clearance - 1e-9)
                or np.any(geom.points > extent_mm - clearance + 1e-9)):
            raise ValueError(f"bundle {geom.bdef.name!r} does not fit inside the grid")

    ijk = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"),
                   axis=-1).reshape(-1, 3).astype(float)
    centers = ijk @ affine[:3, :3].T + affine[:3, 3]
    n_vox = len(centers)

    # brain mask: ellipsoid inscribed in the grid
    extent = (np.asarray(dims) - 1.0) * np.asarray(spec.spacing)
    mid = extent / 2.0
    semi = 0.47 * extent
    inside_mask = (((centers - mid) / semi) ** 2).sum(axis=1) <= 1.0

    weights = np.zeros((len(geoms), n_vox))
    tangents = np.zeros((len(geoms), n_vox, 3))
    caps_a = np.zeros((len(geoms), n_vox), dtype=bool)
    caps_b = np.zeros((len(geoms), n_vox), dtype=bool)
    for gi, geom in enumerate(geoms):
        dist, s, tan = geom.query(centers)
        weights[gi] = geom.core_weight(dist, s)
        tangents[gi] = tan
        caps_a[gi], caps_b[gi] = geom.in_cap(dist, s)

    wm = weights.max(axis=0) > 0
    gm = (caps_a.any(axis=0) | caps_b.any(axis=0)) & ~wm
    if np.any((caps_a.any(axis=0) | caps_b.any(axis=0)) & wm):
        warnings.warn("GM cap voxels overlapped WM; resolved by WM > GM > CSF priority")
    labels_flat = np.full(n_vox, 0, dtype=np.int16)
    labels_flat[inside_mask] = LABEL_CSF
    labels_flat[gm] = LABEL_CORTICAL_GM
    labels_flat[wm] = LABEL_WM
    labels = LabelVolume(labels_flat.reshape(dims), spacing=spec.spacing, affine=affine)

    # tensors: dominant bundle's axis; FA shrunk by the secondary's presence
    dominant = np.argmax(weights, axis=0)
    w_sorted = np.sort(weights, axis=0)
    w_dom = weights[dominant, np.arange(n_vox)]
    w_sec = w_sorted[-2] if len(geoms) > 1 else np.zeros(n_vox)
    fa_targets = np.array([b.fa_target for b in spec.bundles])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(w_dom > 0, np.minimum(1.0, w_sec / np.maximum(w_dom, 1e-9)), 0.0)
    fa_eff = fa_targets[dominant] * (1.0 - 0.5 * ratio)

    tensors_flat = np.empty((n_vox, 6))
    iso = np.full(n_vox, MD_CSF)
    iso[labels_flat == LABEL_CORTICAL_GM] = MD_GM
    tensors_flat[:] = np.outer(iso, [1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    if np.any(wm):
        tan_dom = tangents[dominant[wm], np.flatnonzero(wm)]
        tensors_flat[wm] = _prolate_batch(tan_dom, fa_eff[wm], MD_WM)

    # optional acquisition simulation: noisy signals refit to tensors
    if spec.noise_sigma > 0:
        scheme = GradientScheme.uniform(spec.n_gradient_dirs, spec.bval)
        rng = stream(spec.seed, 101)
        signals = simulate_signals(tensors_flat, scheme, spec.noise_sigma, rng,
                                   s0=spec.s0)
        observed = fit_tensor_volume(signals, spec.s0, scheme)
    else:
        observed = tensors_flat

    fa_map = fa_of(observed).astype(np.float32).reshape(dims)
    odf_sh = tensor_volume_to_odf_sh(observed).astype(np.float32)
    odf = Volume(odf_sh.reshape(dims + (45,)), spacing=spec.spacing, affine=affine)
    fa_vol = Volume(fa_map[..., None], spacing=spec.spacing, affine=affine)
    tensor_vol = Volume(observed.astype(np.float32).reshape(dims + (6,)),
                        spacing=spec.spacing, affine=affine)

    fixels_true = _fixel_ground_truth(dims, spec.spacing, affine, weights, tangents)

    grid = fa_vol  # geometry carrier for voxelization
    bundles = []
    for gi, geom in enumerate(geoms):
        tracks = geom.reference_streamlines(spec.gt_step_mm,
                                            spec.gt_offset_spacing_mm, voxel_diag)
        dens = density_map(tracks, grid)
        mask = dens.scalar > 0
        bundles.append(BundleTruth(
            name=spec.bundles[gi].name, streamlines=tracks, mask=mask,
            cap_a=caps_a[gi].reshape(dims) & (labels.labels == LABEL_CORTICAL_GM),
            cap_b=caps_b[gi].reshape(dims) & (labels.labels == LABEL_CORTICAL_GM),
        ))

    return PhantomDataset(
        spec=spec, odf=odf, fa=fa_vol, tensors=tensor_vol, labels=labels,
        keypoints=keypoints_for_grid(dims, affine), fixels_true=fixels_true,
        bundles=bundles, _geometries=geoms,
    )


def _prolate_batch(tangents, fa_targets, mean_diff):
    d = fa_targets / np.sqrt(3.0 - 2.0 * fa_targets**2)
    iso = mean_diff * (1.0 - d)
    axial = 3.0 * mean_diff * d
    t = tangents
    out = np.empty((len(t), 6))
    out[:, 0] = iso + axial * t[:, 0] * t[:, 0]
    out[:, 1] = axial * t[:, 0] * t[:, 1]
    out[:, 2] = axial * t[:, 0] * t[:, 2]
    out[:, 3] = iso + axial * t[:, 1] * t[:, 1]
    out[:, 4] = axial * t[:, 1] * t[:, 2]
    out[:, 5] = iso + axial * t[:, 2] * t[:, 2]
    return out


def _fixel_ground_truth(dims, spacing, affine, weights, tangents) -> FixelMap:
    """Up to two canonical bundle tangents per voxel, dominant first.

    Tangents within 30 degrees (antipodally) merge into one fixel, so
    near-parallel overlaps (e.g. a branching trunk) read as a single
    population, matching what clustering real tracks would produce.
    """
    from .dwimath import canonicalize_sign

    n_vox = weights.shape[1]
    dirs = np.zeros((n_vox, 2, 3), dtype=np.float32)
    support = np.zeros((n_vox, 2), dtype=np.int32)
    order = np.argsort(-weights, axis=0)
    w_first = weights[order[0], np.arange(n_vox)]
    t_first = tangents[order[0], np.arange(n_vox)]
    has_first = w_first > 0
    dirs[has_first, 0] = canonicalize_sign(t_first[has_first])
    support[has_first, 0] = np.maximum(
        np.round(100 * w_first[has_first]).astype(np.int32), 1)
    if weights.shape[0] > 1:
        w_second = weights[order[1], np.arange(n_vox)]
        t_second = tangents[order[1], np.arange(n_vox)]
        cos_between = np.abs(np.einsum("ij,ij->i", t_first, t_second))
        distinct = (w_second > 0) & (cos_between < np.cos(np.radians(30.0)))
        dirs[distinct, 1] = canonicalize_sign(t_second[distinct])
        support[distinct, 1] = np.maximum(
            np.round(100 * w_second[distinct]).astype(np.int32), 1)
        # keep fixel 1 support >= fixel 2 support after the floors
        support[distinct, 0] = np.maximum(support[distinct, 0], support[distinct, 1])
    return FixelMap(
        directions=dirs.reshape(dims + (2, 3)),
        support=support.reshape(dims + (2,)),
        spacing=spacing, affine=affine,
    )


# -- presets -------------------------------------------------------------------

def preset(name: str, seed: int = 0, noise_sigma: float | None = None,
           **overrides) -> PhantomSpec:
    """Named phantom layouts: straight, curved, crossing-90, crossing-60,
    branching. ``seed`` keys the noise realization."""
    dims = overrides.pop("dims", (64, 64, 64))
    spacing = overrides.pop("spacing", (1.2, 1.2, 1.2))
    extent = (np.asarray(dims) - 1.0) * np.asarray(spacing)
    c = extent / 2.0
    lo, hi = 0.18 * extent[0], 0.82 * extent[0]

    if name == "straight":
        bundles = [BundleDef("main", "line",
                             {"p0": [lo, c[1], c[2]], "p1": [hi, c[1], c[2]]})]
    elif name == "curved":
        r = 12 * float(spacing[0])
        bundles = [BundleDef("ufiber", "arc", {
            "center": [c[0], c[1] - 0.28 * extent[1], c[2]],
            "e1": [1.0, 0.0, 0.0], "e2": [0.0, 1.0, 0.0],
            "radius_mm": r, "angle_deg0": 180.0, "angle_deg1": 0.0})]
    elif name in ("crossing-90", "crossing-60"):
        bundles = [BundleDef("across", "line",
                             {"p0": [lo, c[1], c[2]], "p1": [hi, c[1], c[2]]})]
        if name == "crossing-90":
            bundles.append(BundleDef("updown", "line",
                                     {"p0": [c[0], 0.18 * extent[1], c[2]],
                                      "p1": [c[0], 0.82 * extent[1], c[2]]}))
        else:
            ang = np.radians(60.0)
            half = 0.32 * extent[0]
            d = np.array([np.cos(ang), np.sin(ang), 0.0])
            bundles.append(BundleDef("oblique", "line",
                                     {"p0": (c - half * d).tolist(),
                                      "p1": (c + half * d).tolist()}))
    elif name == "branching":
        trunk_end = [c[0] + 0.02 * extent[0], c[1], c[2]]
        start = [lo, c[1], c[2]]
        bundles = [
            BundleDef("upper", "elbow", {
                "p0": start, "corner": trunk_end,
                "p1": [hi, c[1] + 0.24 * extent[1], c[2]], "fillet_mm": 14.0},
                radius_mm=3.6),
            BundleDef("lower", "elbow", {
                "p0": start, "corner": trunk_end,
                "p1": [hi, c[1] - 0.24 * extent[1], c[2]], "fillet_mm": 14.0},
                radius_mm=3.6),
        ]
    else:
        raise ValueError(f"unknown preset {name!r}")

    kwargs = dict(dims=tuple(dims), spacing=tuple(spacing), bundles=bundles, seed=seed)
    if noise_sigma is not None:
        kwargs["noise_sigma"] = noise_sigma
    kwargs.update(overrides)
    return PhantomSpec(**kwargs)
