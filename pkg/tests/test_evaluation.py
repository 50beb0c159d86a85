import json

import numpy as np
import pytest

from sketchret.errors import IncompleteMatrixError
from sketchret.evaluation import (
    Ranking,
    avg_metric_at_k,
    build_report,
    format_table,
    rank_gallery,
    rank_queries,
    report_json,
    top_k_accuracy,
)
from sketchret.fitgap import FitGapKind, FitGapMatrix


def unit_rows(rng, n, d=8):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_query_in_gallery_ranks_first():
    g = unit_rows(np.random.default_rng(0), 10)
    ranked = rank_gallery(g[4], g)
    assert ranked[0] == (4, 0.0)


def test_two_item_order():
    q = np.array([1.0, 0.0])
    g = np.array([[1.0 - 0.5, 0.0], [1.0 - 0.3, 0.0]])
    assert [i for i, _ in rank_gallery(q, g, ["first", "second"])] == ["second", "first"]


def test_ties_go_to_lowest_id():
    q = np.array([1.0, 0.0])
    g = np.array([[0.0, 1.0], [0.0, -1.0], [1.0, 0.0]])
    assert [i for i, _ in rank_gallery(q, g, ["b", "a", "c"])] == ["c", "a", "b"]


def test_random_gallery_matches_full_sort():
    rng = np.random.default_rng(1)
    g = unit_rows(rng, 64)
    q = unit_rows(rng, 1)[0]
    ids = [f"s{i:02d}" for i in range(64)]
    ranked = rank_gallery(q, g, ids)
    oracle = sorted((float(np.sqrt(((q - row) ** 2).sum())), sid) for sid, row in zip(ids, g))
    assert [(sid, d) for d, sid in oracle] == ranked
    d = [x for _, x in ranked]
    assert d == sorted(d)


def test_empty_gallery():
    with pytest.raises(ValueError):
        rank_gallery(np.ones(3), np.zeros((0, 3)))


def rankings_with_gt_at(ranks, size=12):
    out, gts = [], []
    for q, r in enumerate(ranks):
        ids = [f"x{q}_{i}" for i in range(size)]
        gt = ids[r - 1]
        out.append(Ranking(f"q{q}", ids, np.arange(size, dtype=float)))
        gts.append(gt)
    return out, gts


def test_accuracy_examples():
    r, gt = rankings_with_gt_at([1, 1, 1])
    assert all(top_k_accuracy(r, gt, k) == 100.0 for k in (1, 5, 10))
    r, gt = rankings_with_gt_at([6, 6])
    assert top_k_accuracy(r, gt, 5) == 0.0 and top_k_accuracy(r, gt, 10) == 100.0
    r, gt = rankings_with_gt_at([1, 2, 7, 11])
    assert top_k_accuracy(r, gt, 5) == 50.0
    accs = [top_k_accuracy(r, gt, k) for k in range(1, 13)]
    assert accs == sorted(accs)


def test_accuracy_missing_ground_truth():
    r, _ = rankings_with_gt_at([1])
    with pytest.raises(ValueError):
        top_k_accuracy(r, ["nope"], 1)


def gap_matrix(ids, values, kind="asym_cd"):
    return FitGapMatrix(ids, np.asarray(values, dtype=float), FitGapKind(kind), "h")


def test_avg_metric_examples():
    ids = ["g", "a", "b"]
    v = np.zeros((3, 3))
    v[0, 1], v[0, 2] = 0.01, 0.03
    m = gap_matrix(ids, v)
    assert avg_metric_at_k([["g", "a", "b"]], ["g"], 1, m) == 0.0
    assert avg_metric_at_k([["a", "b", "g"]], ["g"], 2, m) == pytest.approx(2.0)
    f = np.full((3, 3), 100.0)
    f[0, 1] = 80.0
    assert avg_metric_at_k([["a", "g", "b"]], ["g"], 2, gap_matrix(ids, f, "asym_f")) == 90.0


def test_avg_metric_random_oracle():
    rng = np.random.default_rng(2)
    ids = [f"s{i}" for i in range(8)]
    v = rng.uniform(0, 0.05, size=(8, 8))
    np.fill_diagonal(v, 0.0)
    m = gap_matrix(ids, v)
    rankings = [list(rng.permutation(ids)) for _ in range(5)]
    gts = [ids[int(i)] for i in rng.integers(0, 8, 5)]
    expected = np.mean([np.mean([v[ids.index(g), ids.index(r)] for r in rk[:3]]) for rk, g in zip(rankings, gts)])
    assert avg_metric_at_k(rankings, gts, 3, m) == pytest.approx(100 * expected, rel=1e-12)


def test_k_clamped(caplog):
    r, gt = rankings_with_gt_at([3], size=4)
    assert top_k_accuracy(r, gt, 10) == 100.0
    assert "clamping" in caplog.text


def test_missing_matrix_entry():
    m = gap_matrix(["g", "a"], [[0.0, np.nan], [0.0, 0.0]])
    with pytest.raises(IncompleteMatrixError):
        avg_metric_at_k([["a", "g"]], ["g"], 1, m)


def test_report_outputs_deterministic():
    rng = np.random.default_rng(3)
    ids = [f"s{i}" for i in range(6)]
    q, g = unit_rows(rng, 6), unit_rows(rng, 6)
    v = rng.uniform(0, 0.05, size=(6, 6))
    np.fill_diagonal(v, 0.0)
    mats = {"cd": FitGapMatrix(ids, v, FitGapKind("cd"), "h"), "asym_cd": gap_matrix(ids, v * 0.5)}
    rep = build_report("adaptive", rank_queries(q, ids, g, ids), ids, mats)
    rep2 = build_report("adaptive", rank_queries(q, ids, g, ids), ids, mats)
    assert report_json([rep]) == report_json([rep2])
    table = format_table([rep])
    assert "Avg CD" in table and "Avg dA_CD" in table and "Avg dS_F" not in table
    lines = table.splitlines()
    assert len({len(line) for line in lines}) == 1
    doc = json.loads(report_json([rep]))
    assert {r["metric"] for r in doc["records"]} == {"acc", "avg_CD", "avg_dA_CD"}
    assert all(0 <= r["value"] <= 100 for r in doc["records"] if r["metric"] == "acc")
