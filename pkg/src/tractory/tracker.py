"""The streamline engine: GM/WM-interface seeding with position and angle
jitter, iterative direction prediction, vMF sampling of each step,
anatomically constrained accept/reject rules, and multi-alpha merging.

Propagation rules
-----------------
A streamline launches from a (jittered) cortical-GM seed toward a WM
neighbor and holds its launch direction, without querying the predictor or
sampling, until it first reaches a WM-labelled point (bounded by
``max_gm_lead_steps``). From then on each step asks the predictor for a
mean direction mu (sign-aligned with the previous step), samples
mu' ~ vMF(mu, alpha * FA^2) and advances by one step. The label at the
candidate next point decides: WM continues; cortical or subcortical GM
accepts; CSF or leaving the mask rejects; exceeding the length or step
budget rejects.

Determinism
-----------
Each launch owns a counter-based RNG stream keyed by (global seed, seed
index, repeat index, alpha index), and launches are processed in fixed
blocks, so the tractogram is a pure function of (volumes, checkpoint,
config) regardless of thread count or scheduling.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import vmf
from .encoder import FeatureState, fresh_history, push_history
from .rng import stream
from .volume import (
    GM_LABELS,
    LABEL_CORTICAL_GM,
    LABEL_CSF,
    LABEL_WM,
    LabelVolume,
    Volume,
)

ACCEPTED = "accepted"
REJECTED_CSF = "rejected-csf"
REJECTED_OUTSIDE = "rejected-outside"
REJECTED_LENGTH = "rejected-length"
REJECTED_MAXSTEPS = "rejected-maxsteps"
REJECTED_ERROR = "rejected-error"
ALL_STATUSES = (ACCEPTED, REJECTED_CSF, REJECTED_OUTSIDE, REJECTED_LENGTH,
                REJECTED_MAXSTEPS, REJECTED_ERROR)

NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1),
                    (0, 0, -1))


@dataclass(frozen=True)
class TrackerConfig:
    step_mm: float = 0.6
    lookahead_voxels: float = 0.5
    alphas: tuple = (1600.0, 3200.0, 6400.0)
    seeds_per_voxel: int = 5
    position_jitter_mm: float = 0.6
    angle_jitter_deg: float = 30.0
    max_length_mm: float = 130.0
    max_steps: int | None = None
    max_gm_lead_steps: int = 8
    seed: int = 0
    block_size: int = 256

    def __post_init__(self):
        if self.step_mm <= 0:
            raise ValueError("step_mm must be positive")
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ValueError("alpha values must be positive")
        if self.seeds_per_voxel < 1 or self.block_size < 1:
            raise ValueError("seeds_per_voxel and block_size must be >= 1")
        if self.position_jitter_mm < 0 or self.angle_jitter_deg < 0:
            raise ValueError("jitter ranges must be nonnegative (symmetric)")
        if self.max_length_mm <= 0:
            raise ValueError("max_length_mm must be positive")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    @property
    def resolved_max_steps(self) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return math.ceil(self.max_length_mm / self.step_mm)

    def to_dict(self) -> dict:
        return {
            "step_mm": self.step_mm, "lookahead_voxels": self.lookahead_voxels,
            "alphas": list(self.alphas), "seeds_per_voxel": self.seeds_per_voxel,
            "position_jitter_mm": self.position_jitter_mm,
            "angle_jitter_deg": self.angle_jitter_deg,
            "max_length_mm": self.max_length_mm, "max_steps": self.max_steps,
            "max_gm_lead_steps": self.max_gm_lead_steps, "seed": self.seed,
            "block_size": self.block_size,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrackerConfig":
        doc = dict(doc)
        if "alphas" in doc:
            doc["alphas"] = tuple(doc["alphas"])
        return cls(**doc)


@dataclass
class Streamline:
    points: np.ndarray
    status: str
    seed_index: int
    repeat_index: int
    alpha_index: int
    alpha: float

    @property
    def length_mm(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class Tractogram:
    streamlines: list
    config_echo: dict = field(default_factory=dict)

    @property
    def accepted(self) -> list:
        return [s for s in self.streamlines if s.status == ACCEPTED]

    @property
    def launched(self) -> int:
        return len(self.streamlines)

    @property
    def counts(self) -> dict:
        out = {status: 0 for status in ALL_STATUSES}
        for s in self.streamlines:
            out[s.status] += 1
        out["launched"] = len(self.streamlines)
        return out

    @property
    def counts_per_alpha(self) -> dict:
        out = {}
        for s in self.streamlines:
            bucket = out.setdefault(s.alpha, {"launched": 0, "accepted": 0})
            bucket["launched"] += 1
            bucket["accepted"] += s.status == ACCEPTED
        return out

    @property
    def retention(self) -> float:
        if not self.streamlines:
            return 0.0
        return len(self.accepted) / len(self.streamlines)

    @property
    def retention_per_alpha(self) -> dict:
        return {alpha: (b["accepted"] / b["launched"] if b["launched"] else 0.0)
                for alpha, b in self.counts_per_alpha.items()}


@dataclass
class TrackingEnvironment:
    """The read-only volumes every propagation step consults."""

    labels: LabelVolume
    fa: Volume


# -- seeding ---------------------------------------------------------------------

def enumerate_seeds(labels: LabelVolume):
    """Seed launches at every cortical-GM voxel with a 6-connected WM neighbor.

    One entry per (GM voxel, WM neighbor) pair: the launch point is the GM
    voxel center, the direction points at the WM neighbor center. Entries
    are ordered voxel-major (C order), then by the fixed neighbor order
    +x, -x, +y, -y, +z, -z.
    """
    lab = labels.labels
    gm = lab == LABEL_CORTICAL_GM
    wm = lab == LABEL_WM
    entries = []
    dims = lab.shape
    for oi, (dx, dy, dz) in enumerate(NEIGHBOR_OFFSETS):
        shifted = np.zeros_like(wm)
        src = tuple(slice(max(d, 0), dim + min(d, 0)) for d, dim in zip((dx, dy, dz), dims))
        dst = tuple(slice(max(-d, 0), dim + min(-d, 0)) for d, dim in zip((dx, dy, dz), dims))
        shifted[dst] = wm[src]
        hits = np.argwhere(gm & shifted)
        for ijk in hits:
            entries.append((int(np.ravel_multi_index(tuple(ijk), dims)), oi, ijk))
    if not entries:
        warnings.warn("no cortical-GM voxels with WM neighbors; no seeds")
        return np.empty((0, 3)), np.empty((0, 3))
    entries.sort(key=lambda e: (e[0], e[1]))
    ijk = np.array([e[2] for e in entries], dtype=float)
    offs = np.array([NEIGHBOR_OFFSETS[e[1]] for e in entries], dtype=float)
    points = labels.voxel_to_world(ijk)
    targets = labels.voxel_to_world(ijk + offs)
    dirs = targets - points
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return points, dirs


def jitter_seed(point, direction, cfg: TrackerConfig, rng=None, uniforms=None):
    """Jittered launch: position +- U(-j, j) mm per axis; polar and azimuth
    angles each shifted by U(-a, a) degrees. Zero ranges are the identity."""
    if uniforms is None:
        uniforms = rng.random(5)
    point = np.asarray(point, dtype=float)
    direction = np.asarray(direction, dtype=float)
    single = point.ndim == 1
    pts = np.atleast_2d(point).copy()
    dirs = np.atleast_2d(direction)
    u = np.atleast_2d(uniforms)
    pts += (2.0 * u[:, 0:3] - 1.0) * cfg.position_jitter_mm
    a = math.radians(cfg.angle_jitter_deg)
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0)) + (2.0 * u[:, 3] - 1.0) * a
    phi = np.arctan2(dirs[:, 1], dirs[:, 0]) + (2.0 * u[:, 4] - 1.0) * a
    out_dirs = np.column_stack([np.sin(theta) * np.cos(phi),
                                np.sin(theta) * np.sin(phi), np.cos(theta)])
    out_dirs /= np.linalg.norm(out_dirs, axis=1, keepdims=True)
    if single:
        return pts[0], out_dirs[0]
    return pts, out_dirs


# -- predictors --------------------------------------------------------------------

class LearnedPredictor:
    """Direction model over assembled step features."""

    probabilistic = True

    def __init__(self, feature_state: FeatureState, model):
        self.state = feature_state
        self.model = model

    def __call__(self, points, u_prev, history):
        X = self.state.features(points, u_prev, history)
        finite = np.all(np.isfinite(X), axis=1)
        X[~finite] = 0.0
        dirs, _ = self.model.predict_directions(X, last_dirs=u_prev)
        fail = ~finite | ~np.all(np.isfinite(dirs), axis=1)
        stop = np.zeros(len(points), dtype=bool)
        return dirs, stop, fail


class FactPredictor:
    """Fiber Assignment by Continuous Tracking baseline.

    Follows the principal eigenvector of the nearest voxel's tensor,
    sign-aligned with the previous direction; deterministic (no vMF
    sampling). Its classic stop rules — FA below threshold or a turn
    sharper than the angle cap — terminate the streamline where it stands,
    which the engine classifies as rejected-outside (it never reached GM).
    """

    probabilistic = False

    def __init__(self, tensors: Volume, fa: Volume, fa_threshold: float = 0.10,
                 max_turn_deg: float = 45.0):
        from .dwimath import principal_dir

        self.fa_threshold = float(fa_threshold)
        self.min_dot = math.cos(math.radians(max_turn_deg))
        t6 = np.asarray(tensors.data, dtype=float).reshape(-1, 6)
        self.e1 = principal_dir(t6).reshape(tensors.dims[:3] + (3,))
        self.fa_map = np.asarray(fa.scalar, dtype=float)
        self.grid = fa

    def __call__(self, points, u_prev, history):
        idx = self.grid.nearest_index(self.grid.world_to_voxel(points))
        e1 = self.e1[idx[:, 0], idx[:, 1], idx[:, 2]].copy()
        fa_here = self.fa_map[idx[:, 0], idx[:, 1], idx[:, 2]]
        dots = np.einsum("ij,ij->i", e1, u_prev)
        e1[dots < 0] *= -1.0
        stop = (fa_here < self.fa_threshold) | (np.abs(dots) < self.min_dot)
        fail = np.zeros(len(points), dtype=bool)
        return e1, stop, fail


class OraclePredictor:
    """Test predictor returning the phantom's true tangent field."""

    def __init__(self, tangent_fn, probabilistic: bool = True):
        self.tangent_fn = tangent_fn
        self.probabilistic = probabilistic

    def __call__(self, points, u_prev, history):
        dirs, valid = self.tangent_fn(points)
        dirs = np.where(valid[:, None], dirs, u_prev)
        return dirs, np.zeros(len(points), bool), np.zeros(len(points), bool)


# -- propagation --------------------------------------------------------------------

def _track_block(points0, dirs0, uniforms, alphas_row, meta, predictor,
                 env: TrackingEnvironment, cfg: TrackerConfig):
    """Propagate a fixed block of launches in lockstep; returns Streamlines.

    ``uniforms`` is (m, max_steps, 2) pre-drawn per launch, so draw
    consumption never depends on other launches' fates.
    """
    m = len(points0)
    max_steps = cfg.resolved_max_steps
    pts = np.full((m, max_steps + 1, 3), np.nan)
    pts[:, 0] = points0
    n_pts = np.ones(m, dtype=int)
    u_prev = np.array(dirs0, dtype=float)
    hist = fresh_history(dirs0)
    entered = np.zeros(m, dtype=bool)
    lead = np.zeros(m, dtype=int)
    length = np.zeros(m)
    status = np.array([""] * m, dtype=object)
    active = np.ones(m, dtype=bool)

    for step_i in range(max_steps):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        # mean direction: predictor for entered rows, held launch dir in lead-in
        mu_full = u_prev.copy()
        ent_rows = rows[entered[rows]]
        if ent_rows.size:
            cur_ent = pts[ent_rows, n_pts[ent_rows] - 1]
            pred, stop, fail = predictor(cur_ent, u_prev[ent_rows], hist[ent_rows])
            pred = np.array(pred, dtype=float)
            flip = np.einsum("ij,ij->i", pred, u_prev[ent_rows]) < 0
            pred[flip] *= -1.0
            if predictor.probabilistic:
                fa_here = np.clip(
                    env.fa.interp(env.fa.world_to_voxel(cur_ent))[:, 0], 0.0, 1.0)
                kap = np.where(fa_here > 0, alphas_row[ent_rows] * fa_here**2, 0.0)
                xi = uniforms[ent_rows, step_i]
                pred = vmf.sample_from_uniforms(pred, kap, xi[:, 0], xi[:, 1])
            mu_full[ent_rows] = pred
            # rule stops take no step
            if fail.any():
                bad = ent_rows[fail]
                status[bad] = REJECTED_ERROR
                active[bad] = False
            stop_only = stop & ~fail
            if stop_only.any():
                stopped = ent_rows[stop_only]
                status[stopped] = REJECTED_OUTSIDE
                active[stopped] = False

        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        cur = pts[rows, n_pts[rows] - 1]
        mu_step = mu_full[rows]
        nxt = cur + cfg.step_mm * mu_step
        lab = env.labels.label_at_world(nxt)

        pts[rows, n_pts[rows]] = nxt
        n_pts[rows] += 1
        length[rows] += cfg.step_mm
        hist[rows] = push_history(hist[rows], mu_step)
        u_prev[rows] = mu_step

        is_wm = lab == LABEL_WM
        is_gm = np.isin(lab, GM_LABELS)
        is_csf = lab == LABEL_CSF
        was_entered = entered[rows]
        entered[rows[is_wm]] = True
        over_len = length[rows] > cfg.max_length_mm + 1e-9

        verdict = np.array([""] * rows.size, dtype=object)
        verdict[is_gm & was_entered] = ACCEPTED
        lead_gm = is_gm & ~was_entered
        lead[rows[lead_gm]] += 1
        verdict[lead_gm & (lead[rows] > cfg.max_gm_lead_steps)] = REJECTED_OUTSIDE
        verdict[is_csf] = REJECTED_CSF
        verdict[~(is_wm | is_gm | is_csf)] = REJECTED_OUTSIDE
        # the length budget kills anything that would continue or be accepted
        verdict[(is_wm | (is_gm & was_entered)) & over_len] = REJECTED_LENGTH

        done = verdict != ""
        status[rows[done]] = verdict[done]
        active[rows[done]] = False

    leftover = np.flatnonzero(active)
    status[leftover] = REJECTED_MAXSTEPS

    out = []
    for i in range(m):
        seed_idx, repeat_idx, alpha_idx = meta[i]
        out.append(Streamline(points=pts[i, : n_pts[i]].copy(),
                              status=str(status[i]), seed_index=int(seed_idx),
                              repeat_index=int(repeat_idx), alpha_index=int(alpha_idx),
                              alpha=float(alphas_row[i])))
    return out


def propagate(seed_point, seed_dir, predictor, env: TrackingEnvironment,
              cfg: TrackerConfig, alpha: float, rng=None) -> Streamline:
    """Propagate one streamline from a launch point and direction.

    ``rng`` supplies the per-step vMF draws (ignored by deterministic
    predictors); by default a stream keyed by the config seed is used.
    """
    if rng is None:
        rng = stream(cfg.seed, 0, 0, 0)
    uniforms = rng.random((1, cfg.resolved_max_steps, 2))
    out = _track_block(np.atleast_2d(np.asarray(seed_point, dtype=float)),
                       np.atleast_2d(np.asarray(seed_dir, dtype=float)),
                       uniforms, np.array([float(alpha)]),
                       [(0, 0, _alpha_index(cfg, alpha))], predictor, env, cfg)
    return out[0]


def _alpha_index(cfg: TrackerConfig, alpha: float) -> int:
    for i, a in enumerate(cfg.alphas):
        if a == alpha:
            return i
    return 0


def track_whole_brain(env: TrackingEnvironment, predictor, cfg: TrackerConfig,
                      threads: int = 1) -> Tractogram:
    """Full tractography run: jittered launches for every (alpha, seed,
    repeat) triple, merged in canonical order.

    Work is split into fixed blocks consumed by a thread pool; per-launch
    counter-based RNG streams make the result independent of ``threads``.
    """
    seed_pts, seed_dirs = enumerate_seeds(env.labels)
    n_seeds = len(seed_pts)
    launches = [(ai, si, ri)
                for ai in range(len(cfg.alphas))
                for si in range(n_seeds)
                for ri in range(cfg.seeds_per_voxel)]
    max_steps = cfg.resolved_max_steps

    def run_block(block):
        pts0 = np.empty((len(block), 3))
        dirs0 = np.empty((len(block), 3))
        uniforms = np.empty((len(block), max_steps, 2))
        alphas_row = np.empty(len(block))
        meta = []
        for i, (ai, si, ri) in enumerate(block):
            draws = stream(cfg.seed, si, ri, ai).random(5 + 2 * max_steps)
            pts0[i], dirs0[i] = jitter_seed(seed_pts[si], seed_dirs[si], cfg,
                                            uniforms=draws[:5])
            uniforms[i] = draws[5:].reshape(max_steps, 2)
            alphas_row[i] = cfg.alphas[ai]
            meta.append((si, ri, ai))
        return _track_block(pts0, dirs0, uniforms, alphas_row, meta, predictor,
                            env, cfg)

    blocks = [launches[i: i + cfg.block_size]
              for i in range(0, len(launches), cfg.block_size)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    streamlines = [s for block in results for s in block]
    echo = cfg.to_dict()
    echo["predictor"] = type(predictor).__name__
    echo["n_seeds"] = n_seeds
    return Tractogram(streamlines=streamlines, config_echo=echo)


def fact_predictor(tensors: Volume, fa: Volume, fa_threshold: float = 0.10,
                   max_turn_deg: float = 45.0) -> FactPredictor:
    """Build the FACT baseline predictor from tensor and FA volumes."""
    return FactPredictor(tensors, fa, fa_threshold=fa_threshold,
                         max_turn_deg=max_turn_deg)
