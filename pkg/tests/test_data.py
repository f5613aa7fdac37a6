import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from pcdistill import data
from pcdistill.data import Mesh, OFFError, Split

TETRA = b"""OFF
# a tetrahedron
4 4 6
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


# -- synthetic ---------------------------------------------------------------

def test_split_counts_80_20():
    ds = data.generate_synthetic(["sphere", "cube"], 50, 256, seed=7)
    assert len(ds.train) == 80 and len(ds.test) == 20
    assert ds.counts("train") == [40, 40] and ds.counts("test") == [10, 10]


def test_generation_is_deterministic():
    a = data.generate_synthetic(["torus", "plane", "cylinder"], 6, 32, seed=3)
    b = data.generate_synthetic(["torus", "plane", "cylinder"], 6, 32, seed=3)
    assert np.array_equal(a.train.points, b.train.points)
    assert np.array_equal(a.test.labels, b.test.labels)


def test_splits_are_disjoint():
    ds = data.generate_synthetic(["sphere", "cube"], 10, 16, seed=1)
    tr = {p.tobytes() for p in ds.train.points}
    assert not tr & {p.tobytes() for p in ds.test.points}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_sphere_norms_before_normalization(seed):
    pts = data.sample_shape("sphere", 200, np.random.default_rng(seed))
    norms = np.linalg.norm(pts, axis=1)
    assert norms.min() >= 0.8 - 1e-12 and norms.max() <= 1.2 + 1e-12


def test_generated_clouds_are_normalized():
    ds = data.generate_synthetic(list(data.SHAPE_FAMILIES), 5, 64, seed=0)
    for pc in ds.train.points:
        assert np.abs(pc.mean(axis=0)).max() < 1e-9
        assert abs(np.linalg.norm(pc, axis=1).max() - 1) < 1e-9


@pytest.mark.parametrize("kwargs", [
    dict(families=["sphere"], samples_per_class=10),
    dict(families=["sphere", "cube"], samples_per_class=4),
    dict(families=["sphere", "blob"], samples_per_class=10),
    dict(families=["sphere", "cube"], samples_per_class=10, n_points=7),
])
def test_generation_errors(kwargs):
    with pytest.raises(ValueError):
        data.generate_synthetic(**kwargs)


# -- OFF ---------------------------------------------------------------------

def test_parse_tetrahedron():
    mesh = data.parse_off(TETRA)
    assert mesh.vertices.shape == (4, 3) and mesh.faces.shape == (4, 3)


def test_empty_mesh():
    mesh = data.parse_off(b"OFF\n0 0 0")
    assert mesh.vertices.shape == (0, 3) and mesh.faces.shape == (0, 3)


def test_quad_fan_triangulation():
    mesh = data.parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_counts_on_header_line():
    mesh = data.parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n")
    assert len(mesh.vertices) == 4 and len(mesh.faces) == 1


@pytest.mark.parametrize("text,line", [
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n", 5),  # truncated vertices
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),  # index out of range
    ("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n", 4),  # non-numeric
    ("PLY\n", 1),
])
def test_off_errors_report_line(text, line):
    with pytest.raises(OFFError) as info:
        data.parse_off(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_off_round_trip():
    mesh = data.parse_off(TETRA)
    again = data.parse_off(data.serialize_off(mesh))
    assert np.array_equal(mesh.vertices, again.vertices)
    assert np.array_equal(mesh.faces, again.faces)
    assert data.serialize_off(again) == data.serialize_off(mesh)


# -- surface sampling ----------------------------------------------------------

RIGHT_TRIANGLE = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_triangle_centroid():
    pts = data.sample_surface(RIGHT_TRIANGLE, 10_000, seed=0)
    assert np.abs(pts.mean(axis=0) - [1 / 3, 1 / 3, 0]).max() < 0.02


def _two_triangles():
    # areas 1 and 3, disjoint
    v = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]])
    return Mesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


def test_area_weighting():
    mesh = _two_triangles()
    np.testing.assert_allclose(data.triangle_areas(mesh), [1, 3])
    pts = data.sample_surface(mesh, 10_000, seed=1)
    share = np.mean(pts[:, 0] >= 5)
    assert abs(share - 0.75) < 0.03


def test_sampling_density_chi_square():
    mesh = _two_triangles()
    pts = data.sample_surface(mesh, 10_000, seed=2)
    counts = np.array([np.sum(pts[:, 0] < 5), np.sum(pts[:, 0] >= 5)])
    assert chisquare(counts, 10_000 * np.array([0.25, 0.75])).pvalue > 0.01


def test_single_point_inside_triangle():
    (p,) = data.sample_surface(RIGHT_TRIANGLE, 1, seed=5)
    assert p[0] >= 0 and p[1] >= 0 and p[0] + p[1] <= 1 and p[2] == 0


def test_degenerate_mesh_rejected():
    flat = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        data.sample_surface(flat, 10, seed=0)


def test_surface_sampling_deterministic():
    a = data.sample_surface(_two_triangles(), 50, seed=9)
    assert np.array_equal(a, data.sample_surface(_two_triangles(), 50, seed=9))


# -- augmentation and normalization --------------------------------------------

def test_zero_offsets_give_identical_cloud():
    pc = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(data.augment(pc, seed=0, translate=0.0), pc)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_translation_bounded_and_rigid(seed):
    pc = data.normalize(np.random.default_rng(1).normal(size=(30, 3)))
    out = data.augment(pc, seed)
    delta = out - pc
    assert np.abs(delta).max() <= 0.1
    np.testing.assert_allclose(delta, np.broadcast_to(delta[0], delta.shape), atol=1e-15)


def test_different_seeds_differ():
    pc = np.zeros((4, 3))
    assert not np.array_equal(data.augment(pc, 1), data.augment(pc, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_normalize_idempotent(seed):
    pc = np.random.default_rng(seed).normal(loc=3, scale=2, size=(50, 3))
    once = data.normalize(pc)
    np.testing.assert_allclose(data.normalize(once), once, rtol=0, atol=1e-12)


def test_batching_is_pure_reshape():
    ds = data.generate_synthetic(["sphere", "cube"], 10, 16, seed=4)
    batches = list(data.iter_batches(ds.train, 3))
    assert [len(b.labels) for b in batches] == [3] * 5 + [1]
    assert np.array_equal(np.concatenate([b.coords for b in batches]), ds.train.points)
    assert np.array_equal(np.concatenate([b.labels for b in batches]), ds.train.labels)


def test_shuffled_batches_cover_every_sample_once():
    ds = data.generate_synthetic(["sphere", "cube"], 10, 16, seed=4)
    labels = np.concatenate([b.labels for b in data.iter_batches(ds.train, 5, np.random.default_rng(0))])
    assert sorted(labels.tolist()) == sorted(ds.train.labels.tolist())


# -- persistence -------------------------------------------------------------

def test_pcd_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    split = Split(rng.normal(size=(7, 5, 3)), np.array([2, 0, 1, 0, 2, 2, 1]))
    data.write_pcd(split, 3, tmp_path / "x.pcd")
    back, c = data.read_pcd(tmp_path / "x.pcd")
    order = np.argsort(split.labels, kind="stable")
    assert c == 3
    assert np.array_equal(back.points, split.points[order])
    assert np.array_equal(back.labels, split.labels[order])
    raw = (tmp_path / "x.pcd").read_bytes()
    assert raw[:4] == b"PCD1"


def test_pcd_truncated_rejected(tmp_path):
    split = Split(np.zeros((2, 4, 3)), np.array([0, 1]))
    data.write_pcd(split, 2, tmp_path / "x.pcd")
    p = tmp_path / "x.pcd"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        data.read_pcd(p)


def test_dataset_save_load(tmp_path):
    ds = data.generate_synthetic(["sphere", "cube", "torus"], 5, 16, seed=2)
    data.save_dataset(ds, tmp_path)
    back = data.load_dataset(tmp_path)
    assert back.class_names == ds.class_names
    assert back.counts("train") == ds.counts("train")
    assert np.array_equal(back.test.points, ds.test.points)


def test_mesh_dir_collects_errors(tmp_path):
    for cls in ("box", "wedge"):
        (tmp_path / cls).mkdir()
        for i in range(5):
            (tmp_path / cls / f"{cls}_{i}.off").write_bytes(TETRA)
    (tmp_path / "box" / "bad.off").write_text("OFF\n3 1 0\n0 0 0\n")
    ds, errors = data.load_mesh_dir(tmp_path, n_points=32, seed=0)
    assert ds.class_names == ["box", "wedge"]
    assert len(ds.train) + len(ds.test) == 10
    assert len(errors) == 1 and "bad.off" in errors[0][0] and "line" in errors[0][1]
