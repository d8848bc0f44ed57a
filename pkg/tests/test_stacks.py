import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinevox.errors import GeometryError
from spinevox.stacks import (build_mip_stacks, build_raw_stacks, build_stacks, neighbour_indices,
                             pad_resize_planes, save_stacks, stack_centers)
from spinevox.volgrid import LABEL, VoxelGrid, WindowSpec, apply_window, load_vvol


def ramp(z, y=6, x=4):
    return VoxelGrid(np.broadcast_to(np.arange(z, dtype=np.float64)[:, None, None] * 10 + 1200,
                                     (z, y, x)).copy())


def test_centre_examples():
    assert stack_centers(15, 15).tolist() == list(range(15))
    assert stack_centers(29, 15).tolist() == list(range(0, 29, 2))
    assert stack_centers(75, 75).tolist() == list(range(75))
    assert stack_centers(1, 15).tolist() == [0] * 15


def test_neighbours_replicate_border():
    assert neighbour_indices(0, 75).tolist() == [0, 0, 0, 1, 2]
    assert neighbour_indices(74, 75).tolist() == [72, 73, 74, 74, 74]
    assert neighbour_indices(0, 1).tolist() == [0] * 5


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10_000), st.sampled_from([15, 75]))
def test_centres_cover_the_volume(z, n):
    c = stack_centers(z, n)
    assert c[0] == 0 and c[-1] == z - 1
    assert (np.diff(c) >= 0).all()


def test_single_slice_volume_replicates():
    vert = VoxelGrid(np.full((1, 8, 8), 1300.0))
    st_ = build_raw_stacks(vert)
    assert st_.planes.shape == (15, 5, 256, 256)
    np.testing.assert_allclose(st_.planes, 0.25)


def test_raw_stack_planes_are_windowed_neighbours():
    vert = ramp(15, 8, 8)
    st_ = build_raw_stacks(vert)
    for i in range(15):
        for k, zi in enumerate(neighbour_indices(i, 15)):
            expected = np.clip((1200 + 10 * zi - 1200) / 400, 0, 1)
            np.testing.assert_allclose(st_.planes[i, k], expected, atol=1e-6)


def test_mip_of_constant_volume():
    vert = VoxelGrid(np.full((40, 5, 9), 1500.0))
    st_ = build_mip_stacks(vert)
    assert st_.planes.shape == (15, 5, 256, 256)
    # zero padding sits outside the centred 5x9 content, so check the middle row
    np.testing.assert_allclose(st_.planes[:, :, 128, :], np.where(st_.planes[:, :, 128, :] > 0, 0.75, 0))
    assert st_.centers.shape == (15, 5)


def test_mip_dominates_centre_slice():
    rng = np.random.default_rng(0)
    vert = VoxelGrid(rng.normal(1400, 200, (75, 6, 6)))
    mip = build_mip_stacks(vert)
    win = apply_window(vert).voxels
    for s in range(15):
        for k in range(5):
            c = mip.centers[s, k]
            before = win[neighbour_indices(c, 75)].max(axis=0)
            assert (before >= win[c]).all()
    # mini-stack 0 of a 75-slice volume uses slices {0,0,0,1,2}
    assert mip.centers[0, 0] == 0


def test_pad_resize_centres_content():
    plane = np.ones((1, 4, 8))
    out = pad_resize_planes(plane, 16)
    assert out.shape == (1, 16, 16)
    assert out[0, 8, 8] == 1 and out[0, 0, 8] == 0


def test_build_stacks_dispatch_and_errors():
    vert = ramp(5)
    assert build_stacks(vert, "raw").variant == "raw"
    assert build_stacks(vert, "mip").variant == "mip"
    with pytest.raises(ValueError):
        build_stacks(vert, "avg")
    with pytest.raises(GeometryError):
        build_raw_stacks(VoxelGrid(np.zeros((2, 2, 2), np.uint8), kind=LABEL))


def test_stacks_are_deterministic_and_saved(tmp_path):
    vert = VoxelGrid(np.random.default_rng(3).normal(1400, 300, (33, 20, 17)))
    a, b = build_mip_stacks(vert, vertebra=3), build_mip_stacks(vert, vertebra=3)
    assert np.array_equal(a.planes, b.planes)
    save_stacks(a, tmp_path / "s.vvol", WindowSpec())
    back = load_vvol(tmp_path / "s.vvol")
    assert back.dims == (75, 256, 256)
    assert np.array_equal(back.voxels.reshape(15, 5, 256, 256), a.planes)
    index = json.loads((tmp_path / "s.json").read_text())
    assert index["variant"] == "mip" and index["vertebra"] == 3 and len(index["centers"]) == 15
