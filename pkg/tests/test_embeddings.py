import numpy as np
import pytest

from camrefine.embeddings import (
    EmbeddingParseError,
    EmbeddingSet,
    SyntheticSpec,
    generate_synthetic,
    l2_normalize,
    load_embeddings,
    save_embeddings,
    split_by_camera,
)


def small_set(with_ids=True):
    feats = l2_normalize(np.array([[1.0, 0.5], [0.2, -1.0], [-0.3, 0.4]]))
    ids = np.array([5, 5, 9]) if with_ids else None
    return EmbeddingSet(feats, np.array([0, 1, 0]), 2, ids)


def test_l2_normalize_unit_rows():
    rng = np.random.default_rng(0)
    out = l2_normalize(rng.normal(size=(40, 9)))
    assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-9


def test_l2_normalize_rejects_zero_row():
    with pytest.raises(ValueError, match="zero-norm"):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_embedding_set_validation():
    feats = l2_normalize(np.ones((3, 2)))
    with pytest.raises(ValueError, match="camera ids"):
        EmbeddingSet(feats, np.array([0, 1, 2]), 2)
    with pytest.raises(ValueError, match="no items"):
        EmbeddingSet(feats, np.array([0, 0, 2]), 3)
    with pytest.raises(ValueError, match="identities"):
        EmbeddingSet(feats, np.array([0, 0, 1]), 2, np.array([1, 2]))


def test_csv_round_trip(tmp_path):
    original = small_set()
    path = tmp_path / "d.csv"
    save_embeddings(original, path, "csv")
    loaded = load_embeddings(path, "csv")
    assert loaded.n == 3 and loaded.dim == 2
    assert loaded.identities is not None
    assert np.array_equal(loaded.camera_ids, original.camera_ids)
    assert np.array_equal(loaded.identities, original.identities)
    assert np.abs(loaded.features - original.features).max() < 1e-6


def test_csv_header_parsing(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,camera,label,f0,f1\n0,0,3,1.0,0.0\n1,1,3,0.0,1.0\n2,0,4,1.0,0.0\n")
    loaded = load_embeddings(path, "csv")
    assert loaded.n == 3 and loaded.dim == 2 and loaded.identities is not None


def test_csv_without_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,camera,f0,f1\n0,0,1.0,0.0\n1,1,0.0,1.0\n")
    loaded = load_embeddings(path, "csv")
    assert loaded.identities is None and loaded.num_cameras == 2


def test_csv_row_width_error_names_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,camera,f0,f1\n0,0,1.0,0.0\n1,1,0.0,1.0,0.5\n")
    with pytest.raises(EmbeddingParseError, match="line 3"):
        load_embeddings(path, "csv")


def test_csv_malformed_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("camera,id,f0\n0,0,1.0\n")
    with pytest.raises(EmbeddingParseError, match="line 1.*header"):
        load_embeddings(path, "csv")


def test_csv_non_finite_value(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,camera,f0,f1\n0,0,1.0,0.0\n1,1,nan,1.0\n")
    with pytest.raises(EmbeddingParseError, match="line 3.*non-finite"):
        load_embeddings(path, "csv")


def test_bin_round_trip_bit_exact(tmp_path):
    original = generate_synthetic(SyntheticSpec(6, 2, 3, 5, seed=3))
    path = tmp_path / "d.bin"
    save_embeddings(original, path, "bin")
    loaded = load_embeddings(path, "bin")
    assert loaded.features.tobytes() == original.features.tobytes()
    assert np.array_equal(loaded.camera_ids, original.camera_ids)
    assert np.array_equal(loaded.identities, original.identities)
    assert loaded.num_cameras == original.num_cameras
    # and a second trip stays identical
    path2 = tmp_path / "d2.bin"
    save_embeddings(loaded, path2, "bin")
    assert path2.read_bytes() == path.read_bytes()


def test_bin_bad_magic(tmp_path):
    path = tmp_path / "d.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(EmbeddingParseError, match="byte 0"):
        load_embeddings(path, "bin")


def test_bin_truncated(tmp_path):
    original = small_set()
    path = tmp_path / "d.bin"
    save_embeddings(original, path, "bin")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(EmbeddingParseError, match="truncated"):
        load_embeddings(path, "bin")


def test_bin_camera_out_of_range(tmp_path):
    original = small_set()
    path = tmp_path / "d.bin"
    save_embeddings(original, path, "bin")
    blob = bytearray(path.read_bytes())
    blob[17] = 7  # first camera id (u16 little-endian) -> 7 >= C=2
    path.write_bytes(bytes(blob))
    with pytest.raises(EmbeddingParseError, match="byte 17.*camera id 7"):
        load_embeddings(path, "bin")


def test_save_to_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_embeddings(small_set(), tmp_path / "missing" / "d.bin", "bin")


def test_generate_shapes_and_determinism():
    spec = SyntheticSpec(10, 3, 4, 8, seed=7)
    ds = generate_synthetic(spec)
    assert ds.n == 120 and ds.dim == 8 and ds.num_cameras == 3
    assert ds.identities is not None
    again = generate_synthetic(spec)
    assert ds.features.tobytes() == again.features.tobytes()
    assert np.array_equal(ds.camera_ids, again.camera_ids)


def test_generate_zero_noise_collapses_identities():
    spec = SyntheticSpec(4, 3, 2, 6, identity_spread=0.0, camera_shift_strength=0.0, seed=1)
    ds = generate_synthetic(spec)
    for ident in range(4):
        rows = ds.features[ds.identities == ident]
        assert np.all(rows == rows[0])


def test_generate_rejects_bad_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(0, 3, 2, 6)
    with pytest.raises(ValueError):
        SyntheticSpec(3, 3, 2, 6, identity_spread=-0.1)


def test_split_by_camera_single_camera():
    ds = EmbeddingSet(l2_normalize(np.eye(3)), np.zeros(3, dtype=int), 1)
    views = split_by_camera(ds)
    assert len(views) == 1
    assert np.array_equal(views[0].indices, np.arange(3))
    assert np.array_equal(views[0].subset.features, ds.features)


def test_split_by_camera_index_lists():
    ds = small_set()
    views = split_by_camera(ds)
    assert np.array_equal(views[0].indices, [0, 2])
    assert np.array_equal(views[1].indices, [1])
    assert np.array_equal(views[0].subset.identities, [5, 9])


def test_split_partitions_synthetic():
    ds = generate_synthetic(SyntheticSpec(5, 4, 3, 6, seed=2))
    views = split_by_camera(ds)
    all_indices = np.concatenate([v.indices for v in views])
    assert sorted(all_indices.tolist()) == list(range(ds.n))
    assert sum(v.indices.size for v in views) == ds.n
