import numpy as np
import pytest

from tractory.fixel import FixelMap, build_fixels, fixels_at, load_fixels, save_fixels
from tractory.phantom import generate, preset
from tractory.volume import Volume


def grid(dims=(8, 8, 8), spacing=1.0):
    return Volume(np.zeros(dims + (1,), dtype=np.float32),
                  spacing=(spacing,) * 3)


def line_tracks(direction, n=12, origin=(4.0, 4.0, 4.0), spread=0.05, seed=0):
    """Short straight tracks through one voxel, slightly fanned."""
    rng = np.random.default_rng(seed)
    direction = np.asarray(direction, dtype=float)
    out = []
    for _ in range(n):
        d = direction + rng.normal(scale=spread, size=3)
        d /= np.linalg.norm(d)
        t = np.linspace(-0.4, 0.4, 5)[:, None]
        out.append(np.asarray(origin) + t * d)
    return out


def test_single_cluster_along_x():
    tracks = line_tracks([1.0, 0, 0], n=10, origin=(4.0, 4.0, 4.0))
    fm = build_fixels(tracks, grid(), min_support=5)
    d = fixels_at(fm, (4.0, 4.0, 4.0))
    assert abs(d[0] @ np.array([1.0, 0, 0])) > 0.995
    assert np.allclose(d[1], 0.0)


def test_two_orthogonal_clusters():
    tracks = line_tracks([1.0, 0, 0], n=10) + line_tracks([0, 1.0, 0], n=10, seed=1)
    fm = build_fixels(tracks, grid())
    d = fixels_at(fm, (4.0, 4.0, 4.0))
    axes = np.abs(d @ np.array([[1.0, 0, 0], [0, 1.0, 0]]).T)
    # one slot per axis, in either order
    assert axes.max(axis=0).min() > 0.98


def test_three_groups_keep_top_two():
    # three equal groups at 60 degrees in-plane: only two survive
    d1 = [1.0, 0.0, 0.0]
    d2 = [0.5, np.sqrt(3) / 2, 0.0]
    d3 = [-0.5, np.sqrt(3) / 2, 0.0]
    tracks = (line_tracks(d1, n=8, spread=0.02)
              + line_tracks(d2, n=8, spread=0.02, seed=1)
              + line_tracks(d3, n=8, spread=0.02, seed=2))
    fm = build_fixels(tracks, grid(), angle_thresh_deg=25.0, min_support=5)
    center = fm.world_to_voxel(np.array([4.0, 4.0, 4.0]))
    idx = tuple(np.floor(center + 0.5).astype(int))
    assert (fm.support[idx] > 0).sum() == 2


def test_min_support_drops_small_clusters():
    # the single z-track contributes 4 segments, below the support floor of 5
    tracks = line_tracks([1.0, 0, 0], n=10) + line_tracks([0, 0, 1.0], n=1, seed=4)
    fm = build_fixels(tracks, grid(), min_support=5)
    d = fixels_at(fm, (4.0, 4.0, 4.0))
    assert abs(d[0] @ np.array([1.0, 0, 0])) > 0.99
    assert np.allclose(d[1], 0.0)


def test_support_ordering():
    tracks = line_tracks([1.0, 0, 0], n=20) + line_tracks([0, 1.0, 0], n=8, seed=2)
    fm = build_fixels(tracks, grid())
    assert np.all(fm.support[..., 0] >= fm.support[..., 1])


def test_fixels_at_missing_and_outside():
    fm = build_fixels(line_tracks([1.0, 0, 0]), grid())
    empty = fixels_at(fm, (0.0, 0.0, 0.0))
    assert np.allclose(empty, 0.0)
    outside = fixels_at(fm, (50.0, 0.0, 0.0))
    assert np.allclose(outside, 0.0)


def test_sign_alignment_to_previous_step():
    fm = build_fixels(line_tracks([1.0, 0, 0], n=10), grid())
    q = np.array([4.0, 4.0, 4.0])
    fwd = fixels_at(fm, q, u_prev=np.array([1.0, 0.1, 0]))
    bwd = fixels_at(fm, q, u_prev=np.array([-1.0, 0.1, 0]))
    assert fwd[0] @ np.array([1.0, 0, 0]) > 0.9
    assert bwd[0] @ np.array([1.0, 0, 0]) < -0.9


def test_rotation_equivariance():
    # rotating all input streamlines by an axis-aligned 90-degree rotation
    # rotates every fixel accordingly (grid is symmetric)
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    g = grid(dims=(9, 9, 9))
    center = np.array([4.0, 4.0, 4.0])
    base = line_tracks([0.8, 0.6, 0.0], n=10, origin=center, spread=0.03)
    rotated = [(t - center) @ rot.T + center for t in base]
    fm_a = build_fixels(base, g)
    fm_b = build_fixels(rotated, g)
    d_a = fixels_at(fm_a, center)[0]
    d_b = fixels_at(fm_b, center)[0]
    assert min(abs((rot @ d_a) @ d_b), abs(d_b @ d_b)) > 1 - 1e-6
    assert abs((rot @ d_a) @ d_b) > 1 - 1e-6


def test_reproduces_phantom_fixel_ground_truth():
    ds = generate(preset("crossing-90", seed=0, noise_sigma=0.0, dims=(48, 48, 48)))
    fm = build_fixels(ds.reference_streamlines, ds.fa)
    truth = ds.fixels_true
    built_any = fm.support[..., 0] > 0
    true_any = truth.support[..., 0] > 0
    shared = built_any & true_any
    assert shared.sum() > 500
    ok = 0
    idxs = np.argwhere(shared)
    for i, j, k in idxs:
        t_dirs = truth.directions[i, j, k]
        b_dirs = fm.directions[i, j, k]
        good = True
        for slot in range(2):
            if truth.support[i, j, k, slot] == 0:
                continue
            cos = np.abs(b_dirs @ t_dirs[slot]).max()
            if cos < np.cos(np.radians(5.0)):
                good = False
        ok += good
    assert ok / len(idxs) >= 0.95


def test_empty_tractogram_raises():
    with pytest.raises(ValueError):
        build_fixels([], grid())


def test_save_load_round_trip(tmp_path):
    fm = build_fixels(line_tracks([0.0, 0.6, 0.8], n=10), grid())
    save_fixels(fm, tmp_path / "fx")
    back = load_fixels(tmp_path / "fx")
    assert np.array_equal(back.directions, fm.directions)
    assert np.array_equal(back.support, fm.support)


def test_fixelmap_validation():
    with pytest.raises(ValueError):
        FixelMap(directions=np.zeros((2, 2, 2, 2, 3)),
                 support=np.array([[[(0, 1)] * 2] * 2] * 2, dtype=np.int32))
