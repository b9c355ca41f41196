import numpy as np
import pytest
from scipy import ndimage

from heartmorph.errors import ConfigError, DataError
from heartmorph.supervoxel import (
    SlicParams, SupervoxelMap, enforce_connectivity, lattice_centers, load_supervoxels,
    save_supervoxels, slic_segment,
)
from heartmorph.volume import LabelVolume, Volume


def voronoi_oracle(dims, step):
    """Nearest lattice centre per voxel; the lowest id (x fastest) wins ties."""
    axes = [lattice_centers(d, step) for d in dims]
    centres = [(x, y, z) for z in axes[2] for y in axes[1] for x in axes[0]]
    out = np.empty(dims, dtype=np.int32)
    for idx in np.ndindex(*dims):
        d = [sum((a - b) ** 2 for a, b in zip(idx, c)) for c in centres]
        out[idx] = int(np.argmin(d)) + 1
    return out


def test_lattice_centres_are_centred():
    np.testing.assert_allclose(lattice_centers(64, 16), [7.5, 23.5, 39.5, 55.5])
    np.testing.assert_allclose(lattice_centers(10, 4), [2.5, 6.5])
    assert len(lattice_centers(3, 14)) == 1


def test_constant_volume_matches_voronoi_oracle():
    dims = (20, 16, 12)
    sv = slic_segment(Volume(np.zeros(dims)), p=SlicParams(grid_size=4))
    np.testing.assert_array_equal(sv.labels.data, voronoi_oracle(dims, 4))


def test_constant_64_cube_grid_16():
    sv = slic_segment(Volume(np.full((64, 64, 64), 0.3)), p=SlicParams(grid_size=16))
    assert sv.count == 64
    assert np.all(np.abs(sv.sizes - 4096) <= 0.05 * 4096)


def test_two_half_volume_no_straddling():
    img = np.zeros((32, 32, 32))
    img[16:] = 1.0
    sv = slic_segment(Volume(img), p=SlicParams(grid_size=8))
    for lab in sv.ids():
        vals = np.unique(img[sv.labels.data == lab])
        assert len(vals) == 1, f"supervoxel {lab} straddles the boundary"


def test_thread_count_does_not_change_result(rng):
    img = ndimage.gaussian_filter(rng.normal(size=(30, 28, 26)), 2.0)
    a = slic_segment(Volume(img), p=SlicParams(grid_size=6), threads=1)
    b = slic_segment(Volume(img), p=SlicParams(grid_size=6), threads=5)
    np.testing.assert_array_equal(a.labels.data, b.labels.data)


def test_labels_dense_and_connected(rng):
    img = ndimage.gaussian_filter(rng.normal(size=(24, 24, 24)), 1.0)
    sv = slic_segment(Volume(img), p=SlicParams(grid_size=6))
    assert set(np.unique(sv.labels.data)) == set(range(1, sv.count + 1))
    for lab in sv.ids():
        _, n = ndimage.label(sv.labels.data == lab, structure=np.ones((3, 3, 3)))
        assert n == 1


def test_mask_excludes_voxels(rng):
    img = rng.normal(size=(16, 16, 16))
    mask = np.zeros((16, 16, 16), dtype=np.int32)
    mask[4:12, 4:12, 4:12] = 1
    sv = slic_segment(Volume(img), LabelVolume(mask), SlicParams(grid_size=4))
    assert np.all(sv.labels.data[mask == 0] == 0)
    assert np.all(sv.labels.data[mask == 1] > 0)


def test_enforce_connectivity_merges_fragment():
    lab = np.zeros((6, 6, 6), dtype=np.int64)
    lab[3:] = 1
    lab[0, 0, 0] = 1  # stray fragment of label 1 surrounded by label 0
    out = enforce_connectivity(lab)
    assert out[0, 0, 0] == 0
    assert np.all(out[3:] == 1)


def test_enforce_connectivity_keeps_isolated_island():
    lab = np.full((5, 5, 5), -1, dtype=np.int64)
    lab[0, 0, 0] = 0
    lab[4, 4, 4] = 0  # same label, disconnected, no neighbours at all
    out = enforce_connectivity(lab)
    assert out[0, 0, 0] != out[4, 4, 4]


def test_invalid_params():
    with pytest.raises(ConfigError):
        SlicParams(grid_size=1)
    with pytest.raises(ConfigError):
        SlicParams(proximity=0)
    with pytest.raises(ConfigError):
        slic_segment(Volume(np.zeros((4, 4, 4))), p=SlicParams(grid_size=10))


def test_empty_mask_is_data_error():
    with pytest.raises(DataError):
        slic_segment(Volume(np.zeros((8, 8, 8))), LabelVolume(np.zeros((8, 8, 8), dtype=np.int32)),
                     SlicParams(grid_size=4))


def test_supervoxel_map_requires_dense_labels():
    with pytest.raises(DataError):
        SupervoxelMap.from_labels(LabelVolume(np.array([[[1, 3]]])))


def test_save_load_roundtrip(tmp_path):
    sv = slic_segment(Volume(np.zeros((12, 12, 12))), p=SlicParams(grid_size=6))
    sidecar = save_supervoxels(sv, tmp_path / "sv.nrrd")
    assert sidecar.read_text().splitlines()[0] == "label,size"
    back = load_supervoxels(tmp_path / "sv.nrrd")
    np.testing.assert_array_equal(back.labels.data, sv.labels.data)
    np.testing.assert_array_equal(back.sizes, sv.sizes)


def test_load_detects_sidecar_mismatch(tmp_path):
    sv = slic_segment(Volume(np.zeros((12, 12, 12))), p=SlicParams(grid_size=6))
    sidecar = save_supervoxels(sv, tmp_path / "sv.nrrd")
    lines = sidecar.read_text().splitlines()
    lines[1] = "1,1"
    sidecar.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError):
        load_supervoxels(tmp_path / "sv.nrrd")
