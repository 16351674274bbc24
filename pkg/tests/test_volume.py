import numpy as np
import pytest

from tractory.volume import (
    LABEL_WM,
    LabelVolume,
    Volume,
    interp_trilinear,
    neighborhood_values,
    world_to_voxel,
)


def random_volume(rng, dims=(5, 6, 7), channels=2, spacing=(1.0, 1.2, 0.8)):
    data = rng.normal(size=dims + (channels,))
    affine = np.eye(4)
    affine[:3, :3] = np.diag(spacing) @ _random_rotation(rng)
    affine[:3, 3] = rng.normal(scale=5.0, size=3)
    return Volume(data, spacing=spacing, affine=affine)


def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_world_to_voxel_identity_affine():
    v = Volume(np.zeros((4, 4, 4, 1)), spacing=(1, 1, 1))
    assert np.allclose(world_to_voxel(v, (3.0, 4.0, 5.0)), (3, 4, 5))


def test_world_to_voxel_pure_scaling():
    aff = np.diag([1.2, 1.2, 1.2, 1.0])
    v = Volume(np.zeros((4, 4, 4, 1)), spacing=(1.2, 1.2, 1.2), affine=aff)
    assert np.allclose(world_to_voxel(v, (1.2, 0, 0)), (1, 0, 0))


def test_world_voxel_round_trip():
    rng = np.random.default_rng(7)
    v = random_volume(rng)
    pts = rng.normal(scale=10.0, size=(200, 3))
    back = v.voxel_to_world(v.world_to_voxel(pts))
    assert np.abs(back - pts).max() < 1e-9


def test_singular_affine_rejected():
    aff = np.eye(4)
    aff[0, 0] = 0.0
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2, 1)), affine=aff)


def test_interp_exact_at_voxel_centers():
    rng = np.random.default_rng(1)
    v = random_volume(rng, dims=(4, 4, 4), channels=3)
    assert np.allclose(v.interp((2.0, 2.0, 2.0)), v.data[2, 2, 2], atol=0, rtol=0)


def test_interp_midpoint_average():
    data = np.zeros((2, 1, 1, 1))
    data[1, 0, 0, 0] = 1.0
    v = Volume(data)
    assert v.interp((0.5, 0.0, 0.0))[0] == pytest.approx(0.5, abs=1e-15)


def test_interp_reproduces_trilinear_polynomial():
    # trilinear fields a + bx + cy + dz + exy + fxz + gyz + hxyz are exact
    rng = np.random.default_rng(3)
    coef = rng.normal(size=8)

    def field(x, y, z):
        return (coef[0] + coef[1] * x + coef[2] * y + coef[3] * z
                + coef[4] * x * y + coef[5] * x * z + coef[6] * y * z
                + coef[7] * x * y * z)

    dims = (6, 5, 7)
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in dims],
                                indexing="ij"), axis=-1)
    v = Volume(field(grid[..., 0], grid[..., 1], grid[..., 2])[..., None])
    pts = rng.uniform([0, 0, 0], np.asarray(dims) - 1.0, size=(100, 3))
    got = v.interp(pts)[:, 0]
    want = field(pts[:, 0], pts[:, 1], pts[:, 2])
    assert np.abs(got - want).max() < 1e-12


def test_interp_out_of_bounds_clamps_and_flags():
    rng = np.random.default_rng(5)
    v = random_volume(rng, dims=(3, 3, 3), channels=1)
    vals, flag = v.interp((-2.0, 1.0, 1.0), with_flag=True)
    assert flag
    assert np.allclose(vals, v.data[0, 1, 1])
    _, flag_in = v.interp((1.0, 1.0, 1.0), with_flag=True)
    assert not flag_in


def test_neighborhood_interior_order():
    dims = (5, 5, 5)
    idx = np.arange(np.prod(dims)).reshape(dims).astype(float)
    v = Volume(idx[..., None])
    out = neighborhood_values(v, (2.2, 2.0, 1.9))
    # offset index = (dz+1)*9 + (dy+1)*3 + (dx+1), center at rounded (2,2,2)
    expect_first = idx[1, 1, 1]
    expect_last = idx[3, 3, 3]
    assert out.shape == (27, 1)
    assert out[0, 0] == expect_first
    assert out[-1, 0] == expect_last
    assert out[13, 0] == idx[2, 2, 2]
    assert len(np.unique(out)) == 27


def test_neighborhood_corner_clamps():
    rng = np.random.default_rng(2)
    v = random_volume(rng, dims=(4, 4, 4), channels=1)
    out = v.neighborhood((0.0, 0.0, 0.0))
    assert out.shape == (27, 1)
    # clamped duplicates: only 8 distinct voxels reachable from the corner
    assert len(np.unique(out)) == 8


def test_neighborhood_constant_field():
    v = Volume(np.full((4, 4, 4, 2), 3.5))
    out = v.neighborhood((1.7, 2.1, 1.0))
    assert np.all(out == 3.5)


def test_label_volume_rejects_unknown_labels():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 9, dtype=np.int16))


def test_label_lookup_outside_is_background():
    labels = np.full((3, 3, 3), LABEL_WM, dtype=np.int16)
    lv = LabelVolume(labels, spacing=(1, 1, 1))
    assert lv.label_at_voxel((1, 1, 1)) == LABEL_WM
    assert lv.label_at_voxel((10, 1, 1)) == 0
    assert lv.label_at_voxel((-1.2, 1, 1)) == 0


def test_volume_data_is_immutable():
    v = Volume(np.zeros((2, 2, 2, 1)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0
