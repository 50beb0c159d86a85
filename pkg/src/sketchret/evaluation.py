"""Gallery ranking, top-k accuracy, Avg-X@k criteria and report output."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)
# report label -> fit-gap matrix kind
CRITERIA = {
    "CD": "cd",
    "dA_CD": "asym_cd",
    "dS_CD": "sym_cd",
    "dA_F": "asym_f",
    "dS_F": "sym_f",
}
F_CRITERIA = ("dA_F", "dS_F")


@dataclass
class Ranking:
    query_id: str
    ids: list
    distances: np.ndarray

    def rank_of(self, shape_id) -> int:
        """1-based rank of ``shape_id``."""
        return self.ids.index(shape_id) + 1


def embedding_distances(query, gallery) -> np.ndarray:
    g = np.asarray(gallery, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    return np.sqrt(((g - q) ** 2).sum(axis=1))


def rank_gallery(query, gallery, ids=None) -> list:
    """Gallery ``(id, distance)`` pairs by ascending Euclidean distance, ties by lowest id."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    ids = list(range(len(gallery))) if ids is None else list(ids)
    if len(ids) != len(gallery):
        raise ValueError("ids and gallery differ in length")
    dist = embedding_distances(query, gallery)
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    return [(ids[i], float(dist[i])) for i in order]


def rank_queries(query_embeddings, query_ids, gallery_embeddings, gallery_ids) -> list:
    out = []
    for qid, q in zip(query_ids, query_embeddings):
        ranked = rank_gallery(q, gallery_embeddings, gallery_ids)
        out.append(Ranking(qid, [r[0] for r in ranked], np.array([r[1] for r in ranked])))
    return out


def _ids(ranking):
    return ranking.ids if isinstance(ranking, Ranking) else [r[0] if isinstance(r, tuple) else r for r in ranking]


def clamp_k(k: int, gallery_size: int) -> int:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > gallery_size:
        log.warning("k=%d exceeds gallery size %d; clamping", k, gallery_size)
        return gallery_size
    return k


def top_k_accuracy(rankings, ground_truth, k: int) -> float:
    """Percentage of queries whose ground-truth id is within the first ``k`` results."""
    if len(rankings) != len(ground_truth) or not rankings:
        raise ValueError("need one ground-truth id per query and at least one query")
    k = clamp_k(k, len(_ids(rankings[0])))
    hits = 0
    for ranking, gt in zip(rankings, ground_truth):
        ids = _ids(ranking)
        if gt not in ids:
            raise ValueError(f"ground truth {gt!r} not in gallery")
        hits += gt in ids[:k]
    return 100.0 * hits / len(rankings)


def avg_metric_at_k(rankings, ground_truth, k: int, matrix, scale: bool = True) -> float:
    """Mean over queries of the mean criterion value between ground truth and each top-k result.

    ``matrix`` is a ``FitGapMatrix`` whose rows contain the ground-truth ids.
    CD-based kinds are multiplied by 1e2 unless ``scale`` is false; F kinds
    stay on their 0-100 scale.
    """
    if len(rankings) != len(ground_truth) or not rankings:
        raise ValueError("need one ground-truth id per query and at least one query")
    k = clamp_k(k, len(_ids(rankings[0])))
    per_query = []
    for ranking, gt in zip(rankings, ground_truth):
        top = _ids(ranking)[:k]
        vals = [matrix.value(gt, rid) for rid in top]
        per_query.append(sum(vals) / len(vals))
    mean = sum(per_query) / len(per_query)
    if scale and not matrix.kind.is_f:
        mean *= 1e2
    return mean


@dataclass
class RetrievalReport:
    label: str
    rankings: list
    ground_truth: list
    acc_at: dict = field(default_factory=dict)
    avg_metric: dict = field(default_factory=dict)  # (criterion, k) -> value

    def records(self) -> list:
        rows = [{"model": self.label, "metric": "acc", "k": k, "value": v} for k, v in sorted(self.acc_at.items())]
        for (crit, k), v in self.avg_metric.items():
            rows.append({"model": self.label, "metric": f"avg_{crit}", "k": k, "value": v})
        return rows


def build_report(label, rankings, ground_truth, matrices: dict, ks=DEFAULT_KS) -> RetrievalReport:
    """Accuracy at every ``k`` plus Avg-X@k for each criterion whose matrix is supplied.

    ``matrices`` maps matrix kind names (``cd``, ``asym_cd``...) to ``FitGapMatrix``.
    """
    report = RetrievalReport(label, rankings, list(ground_truth))
    size = len(_ids(rankings[0]))
    # keys keep the requested k; values use the clamped one
    effective = {k: clamp_k(k, size) for k in ks}
    for k in ks:
        report.acc_at[k] = top_k_accuracy(rankings, ground_truth, effective[k])
    for crit, kind in CRITERIA.items():
        m = matrices.get(kind)
        if m is None:
            continue
        for k in ks:
            report.avg_metric[(crit, k)] = avg_metric_at_k(rankings, ground_truth, effective[k], m)
    return report


def _fmt(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def format_table(reports, ks=DEFAULT_KS) -> str:
    """Aligned text table: accuracy block, then one Avg block per criterion present."""
    crits = [c for c in CRITERIA if any((c, k) in r.avg_metric for r in reports for k in ks)]
    groups = [("Acc", None)] + [(f"Avg {c}", c) for c in crits]
    label_w = max([len("model")] + [len(r.label) for r in reports])
    cell_w = 7
    group_w = len(ks) * (cell_w + 1) - 1
    line1 = " " * label_w + " | " + " | ".join(g.center(group_w) for g, _ in groups)
    sub = " ".join(f"@{k}".rjust(cell_w) for k in ks)
    line2 = "model".ljust(label_w) + " | " + " | ".join(sub for _ in groups)
    out = [line1, line2, "-" * len(line2)]
    for r in reports:
        cells = []
        for _, crit in groups:
            if crit is None:
                vals = [r.acc_at.get(k) for k in ks]
            else:
                vals = [r.avg_metric.get((crit, k)) for k in ks]
            cells.append(" ".join(_fmt(v).rjust(cell_w) for v in vals))
        out.append(r.label.ljust(label_w) + " | " + " | ".join(cells))
    return "\n".join(out) + "\n"


def report_json(reports) -> str:
    """One record per (model, metric, k), values as exact decimal reprs."""
    records = [rec for r in reports for rec in r.records()]
    return json.dumps({"records": records}, indent=1, sort_keys=True) + "\n"


def require_rows(matrix, gt_ids, gallery_ids) -> None:
    """Raise ``IncompleteMatrixError`` unless every (gt, gallery) entry is present."""
    for g in gt_ids:
        for n in gallery_ids:
            matrix.value(g, n)

