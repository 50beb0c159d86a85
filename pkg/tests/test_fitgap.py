import numpy as np
import pytest

from sketchret.datagen import generate_shape, random_spec
from sketchret.deformer import DeformConfig
from sketchret.errors import DegenerateBatchError, IncompleteMatrixError, StaleCacheError
from sketchret.fitgap import (
    KIND_NAMES,
    FitGapKind,
    FitGapMatrix,
    build_matrices,
    build_matrix,
    fit_gap,
    max_gap_to_negatives,
)
from sketchret.geometry import chamfer_distance

FAST = DeformConfig(iterations=60)


@pytest.fixture(scope="module")
def chairs():
    return [generate_shape(random_spec("chair", s), 512) for s in range(6)]


@pytest.fixture(scope="module")
def all_kinds(chairs):
    return build_matrices(chairs, KIND_NAMES, FAST)


def test_kind_validation():
    with pytest.raises(ValueError):
        FitGapKind("l1")
    with pytest.raises(ValueError):
        FitGapKind("asym_f", tau=0.0)
    assert FitGapKind("sym_f").is_f and FitGapKind("sym_f").symmetric
    assert not FitGapKind("asym_cd").symmetric


@pytest.mark.parametrize("kind, expected", [("asym_cd", 0.0), ("sym_cd", 0.0), ("asym_f", 100.0), ("sym_f", 100.0)])
def test_identity_gap(chairs, kind, expected):
    assert fit_gap(chairs[0], chairs[0], kind, FAST) == expected


def test_asym_not_above_chamfer(chairs, all_kinds):
    m = all_kinds["asym_cd"].values
    cd = all_kinds["cd"].values
    assert np.all(m <= cd)
    assert np.all(all_kinds["sym_cd"].values <= cd)
    for i in range(len(chairs)):
        for j in range(len(chairs)):
            assert cd[i, j] == chamfer_distance(chairs[j], chairs[i])


def test_sym_kinds_symmetric(all_kinds):
    for kind in ("sym_cd", "sym_f", "cd"):
        v = all_kinds[kind].values
        assert np.array_equal(v, v.T)


def test_diagonals(all_kinds):
    for kind, m in all_kinds.items():
        assert np.all(np.diag(m.values) == m.kind.identity_value)
        assert m.complete


def test_entries_equal_fresh_calls(chairs, all_kinds):
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, j = rng.choice(len(chairs), 2, replace=False)
        for kind in ("asym_cd", "sym_cd", "asym_f", "sym_f"):
            assert all_kinds[kind].values[i, j] == fit_gap(chairs[i], chairs[j], kind, FAST)


def test_identical_shapes_give_zero_matrix(chairs):
    m = build_matrix([chairs[0]] * 3, "asym_cd", FAST)
    assert np.array_equal(m.values, np.zeros((3, 3)))


def test_cache_roundtrip_and_resume(tmp_path, chairs, monkeypatch):
    path = tmp_path / "asym.txt"
    ids = [f"c{i}" for i in range(4)]
    m = build_matrix(chairs[:4], "asym_cd", FAST, cache_path=path, ids=ids)
    back = FitGapMatrix.load(path)
    assert back.shape_ids == ids
    assert np.array_equal(back.values, m.values)

    import sketchret.fitgap as fg

    def boom(*args, **kwargs):
        raise AssertionError("deformation ran on a complete cache")

    monkeypatch.setattr(fg, "deform_to", boom)
    again = build_matrix(chairs[:4], "asym_cd", FAST, cache_path=path, ids=ids)
    assert np.array_equal(again.values, m.values)


def test_partial_cache_is_completed(tmp_path, chairs):
    path = tmp_path / "asym.txt"
    full = build_matrix(chairs[:4], "asym_cd", FAST)
    partial = FitGapMatrix(full.shape_ids, full.values.copy(), full.kind, full.deform_config_hash, full.data_hash)
    partial.values[1:, :] = np.nan
    partial.save(path)
    resumed = build_matrix(chairs[:4], "asym_cd", FAST, cache_path=path)
    assert np.array_equal(resumed.values, full.values)


def test_stale_cache_rejected(tmp_path, chairs):
    path = tmp_path / "asym.txt"
    build_matrix(chairs[:3], "asym_cd", FAST, cache_path=path)
    with pytest.raises(StaleCacheError):
        build_matrix(chairs[:3], "asym_cd", DeformConfig(iterations=61), cache_path=path)
    with pytest.raises(StaleCacheError):
        build_matrix(chairs[1:4], "asym_cd", FAST, cache_path=path)


def test_corrupted_cache_rejected(tmp_path, chairs):
    path = tmp_path / "asym.txt"
    build_matrix(chairs[:3], "asym_cd", FAST, cache_path=path)
    path.write_text(path.read_text()[:-20])
    with pytest.raises(StaleCacheError):
        FitGapMatrix.load(path)


def test_threads_match_serial(chairs):
    serial = build_matrix(chairs[:4], "sym_cd", FAST)
    pooled = build_matrix(chairs[:4], "sym_cd", FAST, threads=2)
    assert np.array_equal(serial.values, pooled.values)


def test_max_gap_examples():
    ids = ["p", "a", "b", "c"]
    v = np.zeros((4, 4))
    v[0, 1:] = [0.5, 1.2, 0.3]
    m = FitGapMatrix(ids, v, FitGapKind("asym_cd"), "h")
    assert max_gap_to_negatives(0, [1, 2, 3], m) == 1.2
    v2 = np.zeros((4, 4))
    v2[0, 1] = 0.7
    assert max_gap_to_negatives(0, [1], FitGapMatrix(ids, v2, FitGapKind("asym_cd"), "h")) == 0.7
    f = np.full((4, 4), 100.0)
    f[0, 1:3] = [90.0, 60.0]
    assert max_gap_to_negatives(0, [1, 2], FitGapMatrix(ids, f, FitGapKind("asym_f"), "h")) == 40.0


def test_max_gap_errors():
    m = FitGapMatrix(["a", "b"], np.zeros((2, 2)), FitGapKind("asym_cd"), "h")
    with pytest.raises(ValueError):
        max_gap_to_negatives(0, [], m)
    with pytest.raises(DegenerateBatchError):
        max_gap_to_negatives(0, [1], m)


def test_missing_entries():
    v = np.full((2, 2), np.nan)
    m = FitGapMatrix(["a", "b"], v, FitGapKind("asym_cd"), "h")
    with pytest.raises(IncompleteMatrixError):
        m.value("a", "b")
    with pytest.raises(IncompleteMatrixError):
        m.value("a", "zz")
