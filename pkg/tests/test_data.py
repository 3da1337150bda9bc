"""Generators, solver oracles, and the dataset directory format."""

import json
import math

import numpy as np
import pytest

import mspt.data as da
from mspt.errors import DataFormatError, GenerationError, ShapeError


# ---------------------------------------------------------------------------
# SampleRecord
# ---------------------------------------------------------------------------


def test_sample_record_validation():
    coords = np.zeros((4, 2))
    ok = da.SampleRecord(coords=coords, in_fields=np.ones((4, 1)), targets=np.ones((4, 2)))
    assert ok.n_points == 4
    with pytest.raises(ShapeError):
        da.SampleRecord(coords=coords, in_fields=np.ones((3, 1)), targets=np.ones((4, 1)))
    with pytest.raises(ShapeError):
        da.SampleRecord(coords=coords, in_fields=np.ones((4, 1)), targets=np.ones((4, 1)),
                        grid_shape=(2, 3))
    with pytest.raises(ShapeError):
        da.SampleRecord(coords=coords, in_fields=np.ones((4, 1)), targets=np.ones((4, 1)),
                        groups=np.zeros((5,), dtype=np.uint8))
    bad = np.ones((4, 1))
    bad[2] = np.nan
    with pytest.raises(DataFormatError):
        da.SampleRecord(coords=coords, in_fields=bad, targets=np.ones((4, 1)))


def test_grid_coords_cover_unit_square_row_major():
    c = da.grid_coords(3, 4)
    assert c.shape == (12, 2)
    assert np.array_equal(c[0], [0.0, 0.0])
    assert np.array_equal(c[3], [0.0, 1.0])
    assert np.array_equal(c[-1], [1.0, 1.0])
    # Row-major: the second point advances along the x axis.
    assert c[1][0] == 0.0 and c[1][1] > 0.0


# ---------------------------------------------------------------------------
# Darcy solver and oracle
# ---------------------------------------------------------------------------


def test_darcy_single_interior_point_closed_form():
    u = da.solve_darcy(np.ones((3, 3)))
    assert u[1, 1] == 0.0625
    boundary = u.copy()
    boundary[1, 1] = 0.0
    assert np.all(boundary == 0.0)


def test_darcy_mirror_symmetry():
    rng = np.random.default_rng(0)
    a = rng.uniform(1.0, 10.0, size=(9, 9))
    a_sym = 0.5 * (a + a[:, ::-1])
    u = da.solve_darcy(a_sym)
    assert np.max(np.abs(u - u[:, ::-1])) < 1e-10
    a_sym = 0.5 * (a + a[::-1, :])
    u = da.solve_darcy(a_sym)
    assert np.max(np.abs(u - u[::-1, :])) < 1e-10


def test_darcy_interior_positive():
    rng = np.random.default_rng(1)
    a = np.where(rng.normal(size=(8, 8)) > 0, 10.0, 1.0)
    u = da.solve_darcy(a)
    assert np.all(u[1:-1, 1:-1] > 0.0)


@pytest.mark.parametrize("shape", [(16, 16), (9, 17), (5, 5)])
def test_darcy_residual_bound(shape):
    rng = np.random.default_rng(2)
    a = da.permeability_field(rng, *shape)
    u = da.solve_darcy(a)
    assert da.darcy_residual(a, u) < 1e-8


def test_darcy_residual_detects_wrong_solutions():
    rng = np.random.default_rng(3)
    a = da.permeability_field(rng, 8, 8)
    u = da.solve_darcy(a)
    wrong = u + rng.normal(scale=1e-4, size=u.shape)
    assert da.darcy_residual(a, wrong) > 1e-3


def test_darcy_rejects_invalid_input():
    with pytest.raises(ShapeError):
        da.solve_darcy(np.ones((2, 5)))
    with pytest.raises(GenerationError):
        da.solve_darcy(np.zeros((4, 4)))


def test_permeability_field_is_two_valued_and_balanced():
    rng = np.random.default_rng(4)
    a = da.permeability_field(rng, 16, 16)
    assert set(np.unique(a)) == {1.0, 10.0}
    frac = np.mean(a == 10.0)
    assert 0.3 < frac < 0.7


def test_gen_darcy_samples_and_provenance():
    samples, prov = da.gen_darcy((8, 8), 3, seed=5)
    assert len(samples) == 3
    assert prov["name"] == "darcy" and prov["seed"] == 5
    assert prov["parameters"]["grid"] == [8, 8]
    for s in samples:
        assert s.grid_shape == (8, 8)
        assert set(np.unique(s.in_fields)) == {1.0, 10.0}
        u = s.targets.reshape(8, 8)
        assert np.all(u[0] == 0) and np.all(u[-1] == 0)
        assert da.darcy_residual(s.in_fields.reshape(8, 8), u) < 1e-8


def test_gen_darcy_deterministic():
    s1, _ = da.gen_darcy((6, 6), 2, seed=9)
    s2, _ = da.gen_darcy((6, 6), 2, seed=9)
    s3, _ = da.gen_darcy((6, 6), 2, seed=10)
    for a, b in zip(s1, s2):
        assert np.array_equal(a.in_fields, b.in_fields)
        assert np.array_equal(a.targets, b.targets)
    assert not np.array_equal(s1[0].in_fields, s3[0].in_fields)


def test_gen_darcy_rejects_bad_requests():
    with pytest.raises(GenerationError):
        da.gen_darcy((2, 5), 1, seed=0)
    with pytest.raises(GenerationError):
        da.gen_darcy((5, 5), -1, seed=0)


# ---------------------------------------------------------------------------
# Point-cloud kernel operator
# ---------------------------------------------------------------------------


def test_kernel_peak_at_source():
    coords = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.4]])
    amp = 2.5
    source = np.array([[amp], [0.0], [0.0]])
    t = da.kernel_smooth(coords, source, sigma=0.25)
    assert t[0, 0] == amp  # exp(0) is exactly 1
    assert abs(t[1, 0] - amp * math.exp(-0.09 / 0.125)) < 1e-14


def test_kernel_linearity():
    rng = np.random.default_rng(6)
    coords = rng.uniform(size=(20, 2))
    s = rng.normal(size=(20, 1))
    assert np.array_equal(da.kernel_smooth(coords, 2.0 * s), 2.0 * da.kernel_smooth(coords, s))
    s2 = rng.normal(size=(20, 1))
    lhs = da.kernel_smooth(coords, s + s2)
    rhs = da.kernel_smooth(coords, s) + da.kernel_smooth(coords, s2)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_pointcloud_targets_match_direct_summation():
    samples, _ = da.gen_pointcloud_operator(24, 2, seed=7)
    sigma = da.POINTCLOUD_SIGMA
    for s in samples:
        n = s.n_points
        expected = np.zeros((n, 1))
        for i in range(n):
            acc = 0.0
            for j in range(n):
                d2 = np.sum((s.coords[i] - s.coords[j]) ** 2)
                acc += math.exp(-d2 / (2.0 * sigma * sigma)) * s.in_fields[j, 0]
            expected[i, 0] = acc
        assert np.max(np.abs(s.targets - expected)) < 1e-12


def test_pointcloud_deterministic_and_validated():
    s1, prov = da.gen_pointcloud_operator(16, 2, seed=8)
    s2, _ = da.gen_pointcloud_operator(16, 2, seed=8)
    assert prov["name"] == "pointcloud"
    for a, b in zip(s1, s2):
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.targets, b.targets)
    with pytest.raises(GenerationError):
        da.gen_pointcloud_operator(8, 1, seed=0)


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------


def make_mixed_samples():
    samples, _ = da.gen_darcy((5, 5), 2, seed=11)
    groups = np.ones(25, dtype=np.uint8)
    groups[:5] = 2
    tagged = da.SampleRecord(
        coords=samples[0].coords,
        in_fields=samples[0].in_fields,
        targets=samples[0].targets,
        groups=groups,
        grid_shape=(5, 5),
    )
    return [samples[0], tagged, samples[1]]


def test_dataset_round_trip_bit_exact(tmp_path):
    samples = make_mixed_samples()
    da.write_dataset(tmp_path / "d", samples, generator={"name": "darcy", "seed": 11})
    loaded, manifest = da.read_dataset(tmp_path / "d")
    assert manifest["n_samples"] == 3
    assert manifest["precision"] == "f32"
    assert manifest["generator"]["name"] == "darcy"
    assert len(manifest["in_mean"]) == 1 and len(manifest["in_std"]) == 1
    offs = [e["offset"] for e in manifest["samples"]]
    assert all(b > a for a, b in zip(offs, offs[1:]))

    for orig, got in zip(samples, loaded):
        assert got.coords.dtype == np.float32
        assert np.array_equal(got.coords, orig.coords.astype(np.float32))
        assert np.array_equal(got.in_fields, orig.in_fields.astype(np.float32))
        assert np.array_equal(got.targets, orig.targets.astype(np.float32))
        assert got.grid_shape == orig.grid_shape
        if orig.groups is None:
            assert got.groups is None
        else:
            assert np.array_equal(got.groups, orig.groups)


def test_dataset_rewrite_is_identical(tmp_path):
    samples = make_mixed_samples()
    da.write_dataset(tmp_path / "a", samples)
    loaded, manifest = da.read_dataset(tmp_path / "a")
    da.write_dataset(tmp_path / "b", loaded, generator=manifest["generator"])
    assert (tmp_path / "a" / "data.bin").read_bytes() == (tmp_path / "b" / "data.bin").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (
        tmp_path / "b" / "manifest.json"
    ).read_bytes()


def test_dataset_empty_round_trip(tmp_path):
    da.write_dataset(tmp_path / "d", [])
    loaded, manifest = da.read_dataset(tmp_path / "d")
    assert loaded == []
    assert manifest["n_samples"] == 0


def test_dataset_corruption_detected(tmp_path):
    samples = make_mixed_samples()
    da.write_dataset(tmp_path / "d", samples)
    path = tmp_path / "d" / "data.bin"
    blob = bytearray(path.read_bytes())
    blob[10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        da.read_dataset(tmp_path / "d")


def test_dataset_truncation_detected(tmp_path):
    samples = make_mixed_samples()
    da.write_dataset(tmp_path / "d", samples)
    path = tmp_path / "d" / "data.bin"
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(DataFormatError):
        da.read_dataset(tmp_path / "d")


def test_dataset_missing_or_broken_manifest(tmp_path):
    with pytest.raises(DataFormatError):
        da.read_dataset(tmp_path / "nothing")
    d = tmp_path / "d"
    d.mkdir()
    (d / "manifest.json").write_text("{not json")
    with pytest.raises(DataFormatError):
        da.read_dataset(d)
    (d / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(DataFormatError):
        da.read_dataset(d)


def test_dataset_feeds_training(tmp_path):
    import mspt.model as mdl
    import mspt.training as tr

    samples, prov = da.gen_darcy((5, 5), 8, seed=12)
    da.write_dataset(tmp_path / "d", samples, generator=prov)
    loaded, _ = da.read_dataset(tmp_path / "d")
    cfg = mdl.ModelConfig(
        in_dim=3, out_dim=1, n_blocks=1, f_dim=8, n_heads=2,
        k_patches=2, partitioning="grid",
    )
    t = tr.TrainConfig(epochs=2, batch_size=4, peak_lr=1e-3, final_lr=1e-5, seed=0)
    result = tr.train(cfg, t, loaded, tmp_path / "run")
    assert math.isfinite(result.best_val)
