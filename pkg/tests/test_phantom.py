from itertools import combinations

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from tractory import dwimath
from tractory.dwimath import GradientScheme, fa, fit_tensor_lls, fit_tensor_volume
from tractory.phantom import (
    PhantomSpec,
    fa_of,
    generate,
    preset,
    prolate_tensor,
    simulate_signals,
)
from tractory.rng import stream
from tractory.volume import LABEL_CSF, LABEL_CORTICAL_GM, LABEL_WM


def small(preset_name, seed=0, noise=0.0, dims=(48, 48, 48)):
    return generate(preset(preset_name, seed=seed, noise_sigma=noise, dims=dims))


# -- building blocks -----------------------------------------------------------


def test_prolate_tensor_has_requested_fa_and_axis():
    t = np.array([0.6, 0.8, 0.0])
    d6 = prolate_tensor(t, 0.3, 1e-3)
    assert fa(d6) == pytest.approx(0.3, abs=1e-12)
    assert dwimath.md(d6) == pytest.approx(1e-3, abs=1e-15)
    e1 = dwimath.principal_dir(d6)
    assert abs(e1 @ t) == pytest.approx(1.0, abs=1e-12)


def test_simulate_signals_noiseless_round_trip():
    rng = stream(3, 1)
    scheme = GradientScheme.uniform(24, 500.0)
    d6 = prolate_tensor(np.array([1.0, 0, 0]), 0.25, 1e-3)
    sig = simulate_signals(d6, scheme, 0.0, rng)
    back = fit_tensor_lls(sig, 1.0, scheme)
    assert np.abs(back - d6).max() < 1e-10


def test_simulate_signals_isotropic_symmetry():
    rng = stream(3, 2)
    scheme = GradientScheme.uniform(30, 500.0)
    iso = np.array([1e-3, 0, 0, 1e-3, 0, 1e-3])
    sig = simulate_signals(iso, scheme, 0.0, rng)
    assert np.ptp(sig) < 1e-12


def test_snr20_refit_fa_bias_bounded():
    # Monte Carlo over 1000 voxels at SNR 20: mean refit FA within 0.05 of truth
    rng = stream(3, 3)
    scheme = GradientScheme.uniform(30, 500.0)
    d6 = prolate_tensor(np.array([0.0, 0, 1.0]), 0.25, 1e-3)
    tensors = np.tile(d6, (1000, 1))
    sig = simulate_signals(tensors, scheme, 0.05, rng)
    refit = fit_tensor_volume(sig, 1.0, scheme)
    assert abs(fa(refit).mean() - 0.25) < 0.05


# -- generated datasets ---------------------------------------------------------


def test_straight_preset_fa_map():
    ds = small("straight")
    wm = ds.labels.labels == LABEL_WM
    assert wm.sum() > 500
    assert np.allclose(ds.fa.scalar[wm], 0.30, atol=1e-6)
    assert np.all(ds.fa.scalar[ds.labels.labels == LABEL_CSF] < 1e-6)


def test_labels_partition_and_priority():
    ds = small("straight")
    lab = ds.labels.labels
    present = set(np.unique(lab).tolist())
    assert present == {0, LABEL_CSF, LABEL_CORTICAL_GM, LABEL_WM}
    # caps sit at both tube ends and touch WM
    for cap in (ds.bundles[0].cap_a, ds.bundles[0].cap_b):
        assert cap.sum() > 20
        assert np.all(lab[cap] == LABEL_CORTICAL_GM)


def test_crossing_overlap_fa_below_target():
    ds = small("crossing-90")
    two = ds.fixels_true.count_map() == 2
    assert two.sum() > 100
    assert ds.fa.scalar[two].max() < 0.30 - 1e-6
    assert ds.fa.scalar[two].min() > 0.10


def test_crossing_fixels_hold_both_tangents():
    ds = small("crossing-90")
    two = ds.fixels_true.count_map() == 2
    dirs = ds.fixels_true.directions[two]
    d1 = np.abs(dirs[:, 0] @ np.array([1.0, 0, 0]))
    d2 = np.abs(dirs[:, 1] @ np.array([0.0, 1.0, 0]))
    both = (np.minimum(d1, d2) > 0.99) | (np.minimum(
        np.abs(dirs[:, 0] @ np.array([0.0, 1.0, 0])),
        np.abs(dirs[:, 1] @ np.array([1.0, 0, 0]))) > 0.99)
    assert both.mean() > 0.95


def test_ground_truth_respects_act_rules():
    for name in ("straight", "curved", "crossing-90"):
        ds = small(name)
        for bundle in ds.bundles:
            for track in bundle.streamlines[::17]:
                labs = ds.labels.label_at_world(track)
                assert labs[0] == LABEL_CORTICAL_GM
                assert labs[-1] == LABEL_CORTICAL_GM
                assert not np.any(labs == LABEL_CSF)
                assert not np.any(labs == 0)


def test_curved_tangent_field_integrates_to_centerline():
    # integrate the tangent field from the arc start; the integral curve must
    # stay within half a voxel of the analytic circle
    ds = small("curved")
    geom = ds._geometries[0]
    lo = np.searchsorted(geom.s, geom.wm_lo)
    hi = np.searchsorted(geom.s, geom.wm_hi)
    start = geom.points[lo]
    arc_center = np.asarray(ds.spec.bundles[0].params["center"], dtype=float)
    arc_r = ds.spec.bundles[0].params["radius_mm"]

    def rhs(_, p):
        d, valid = ds.tangent_at(p[None, :])
        return d[0]

    span = geom.wm_hi - geom.wm_lo - 2.0
    sol = solve_ivp(rhs, (0, span), start, max_step=0.5, rtol=1e-8)
    pts = sol.y.T
    radii = np.linalg.norm(pts[:, :2] - arc_center[:2], axis=1)
    half_voxel = 0.5 * ds.spec.spacing[0]
    assert np.abs(radii - arc_r).max() < half_voxel


def test_keypoints_non_coplanar():
    ds = small("straight")
    assert ds.keypoints.shape == (5, 3)
    for quad in combinations(range(5), 4):
        p = ds.keypoints[list(quad)]
        vol = abs(np.linalg.det(p[1:] - p[0])) / 6.0
        assert vol > 1.0  # mm^3


def test_noise_seed_changes_observations_not_truth():
    a = small("straight", seed=1, noise=0.05)
    b = small("straight", seed=2, noise=0.05)
    assert not np.array_equal(a.fa.data, b.fa.data)
    assert np.array_equal(a.labels.labels, b.labels.labels)
    assert np.array_equal(a.fixels_true.directions, b.fixels_true.directions)
    assert all(np.array_equal(x, y) for x, y in
               zip(a.bundles[0].streamlines, b.bundles[0].streamlines))


def test_save_load_round_trip(tmp_path):
    ds = small("crossing-90", noise=0.05)
    ds.save(tmp_path / "out")
    back = __import__("tractory").PhantomDataset.load(tmp_path / "out")
    assert np.array_equal(back.labels.labels, ds.labels.labels)
    assert np.allclose(back.keypoints, ds.keypoints)
    assert [b.name for b in back.bundles] == [b.name for b in ds.bundles]
    assert np.array_equal(back.bundles[0].mask, ds.bundles[0].mask)
    assert np.array_equal(np.asarray(back.odf.data), np.asarray(ds.odf.data))
    got = back.bundles[0].streamlines[0]
    want = ds.bundles[0].streamlines[0].astype(np.float32)
    assert np.allclose(got, want, atol=1e-6)


def test_bundle_outside_grid_rejected():
    spec = preset("straight", dims=(16, 16, 16))
    with pytest.raises(ValueError):
        generate(spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(bundles=[]).validate()


def test_branching_and_crossing60_generate():
    for name in ("branching", "crossing-60"):
        ds = generate(preset(name, dims=(48, 48, 48)))
        assert (ds.labels.labels == LABEL_WM).sum() > 500
        assert len(ds.bundles) == 2


def test_fa_of_alias_matches():
    d6 = prolate_tensor(np.array([1.0, 0, 0]), 0.22, 1e-3)
    assert fa_of(d6) == pytest.approx(0.22, abs=1e-12)
