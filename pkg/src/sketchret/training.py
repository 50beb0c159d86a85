"""Siamese triplet training with fixed or fit-gap-adaptive margins, and a regression baseline.

Within a batch of N sketch/shape pairs, anchor i is sketch i, its positive is
shape i and its negatives are the other N-1 shapes. Hinge terms are averaged
over an anchor's negatives first and then over anchors.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .encoder import EncoderDims, _backward, _forward_batch, encode_batch, init_params, save_checkpoint
from .errors import ConfigError, DegenerateBatchError, DivergenceError
from .evaluation import avg_metric_at_k, rank_queries, top_k_accuracy
from .fitgap import KIND_NAMES, FitGapKind, max_gap_to_negatives
from .geometry import PointCloud, normalize_unit_box
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("fixed", "adaptive", "regression")
LOG_COLUMNS = ("epoch", "loss", "val_acc@1", "val_acc@5", "val_acc@10", "val_avg_cd@5", "val_avg_delta@5")


@dataclass(frozen=True)
class TripletConfig:
    mode: str = "adaptive"
    fixed_margin: float = 0.6
    alpha: float = 0.3
    beta: float = 1.2
    batch_size: int = 16
    epochs: int = 100
    learning_rate: float = 1e-3
    augment: bool = False
    seed: int = 0
    gap_kind: str = "asym_cd"
    tau: float = 0.01
    regression_scale: float = 1.0
    embed_dim: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.alpha < self.beta:
            raise ConfigError(f"need 0 < alpha < beta, got alpha={self.alpha} beta={self.beta}")
        if not self.fixed_margin > 0:
            raise ConfigError("fixed margin must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning rate must be finite and non-negative")
        if self.gap_kind not in KIND_NAMES:
            raise ConfigError(f"unknown gap kind {self.gap_kind!r}")
        if not self.regression_scale > 0:
            raise ConfigError("regression scale must be positive")
        if self.embed_dim < 2:
            raise ConfigError("embedding dimension must be at least 2")

    @property
    def kind(self) -> FitGapKind:
        return FitGapKind(self.gap_kind, self.tau)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TripletConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            raw = raw.strip()
            if types[key] == "str":
                values[key] = raw.strip("'\"")
            elif types[key] == "bool":
                values[key] = raw == "True"
            elif types[key] == "int":
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        return cls(**values)


@dataclass
class PairSet:
    """Aligned sketch and shape clouds for a list of shape ids."""

    ids: list
    sketches: list
    shapes: list

    def __post_init__(self):
        if not (len(self.ids) == len(self.sketches) == len(self.shapes)):
            raise ValueError("ids, sketches and shapes differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("shape ids must be distinct")

    def __len__(self):
        return len(self.ids)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _sq(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def triplet_loss_fixed(s, t_p, negatives, m: float) -> float:
    """Mean over negatives of max(0, d(s,t_p)^2 - d(s,t_n)^2 + m)."""
    if len(negatives) == 0:
        raise ValueError("negative set is empty")
    pos = _sq(s, t_p)
    return sum(max(0.0, pos - _sq(s, t_n) + m) for t_n in negatives) / len(negatives)


def adaptive_margin(p_index, n_index, negative_indices, matrix, alpha, beta) -> float:
    """alpha + (beta - alpha) * delta(p, n) / M, with M the largest gap from p to the negatives."""
    worst = max_gap_to_negatives(p_index, negative_indices, matrix)
    return alpha + (beta - alpha) * (matrix.distance(p_index, n_index) / worst)


def gap_ratios(rows, matrix) -> np.ndarray:
    """delta(p_i, n_j) / M_i for a batch whose shapes sit at ``rows`` of ``matrix``; diagonal is NaN."""
    rows = list(rows)
    delta = np.array([[matrix.distance(i, j) for j in rows] for i in rows])
    np.fill_diagonal(delta, np.nan)
    worst = np.nanmax(delta, axis=1)
    bad = np.flatnonzero(~(worst > 0))
    if len(bad):
        raise DegenerateBatchError(f"all negatives identical to shape {matrix.shape_ids[rows[bad[0]]]!r}")
    return delta / worst[:, None]


def margin_matrix(rows, matrix, alpha, beta) -> np.ndarray:
    """Per-pair adaptive margins; entry (i, j) is anchor i against negative j."""
    return alpha + (beta - alpha) * gap_ratios(rows, matrix)


def normalized_targets(rows, matrix, scale) -> np.ndarray:
    return scale * gap_ratios(rows, matrix)


def batch_triplet_loss(S, T, margins):
    """Loss and gradients with respect to sketch and shape embeddings.

    ``margins[i, j]`` is the margin for anchor ``i`` against negative shape ``j``.
    """
    n = len(S)
    diff = S[:, None, :] - T[None, :, :]
    d2 = (diff**2).sum(axis=2)
    pos = np.diag(d2)
    hinge = pos[:, None] - d2 + margins
    off = ~np.eye(n, dtype=bool)
    active = (hinge > 0) & off
    per_anchor = np.where(active, hinge, 0.0).sum(axis=1) / (n - 1)
    loss = float(per_anchor.sum() / n)

    w = active / ((n - 1) * n)
    # d pos / d s_i = 2(s_i - t_i); d d2_ij / d s_i = 2(s_i - t_j)
    dS = 2.0 * (w.sum(axis=1)[:, None] * (S - T) - (w[:, :, None] * diff).sum(axis=1))
    dT = -2.0 * w.sum(axis=1)[:, None] * (S - T)
    dT += 2.0 * (w[:, :, None] * diff).sum(axis=0)
    return loss, dS, dT


def triplet_loss_adaptive(embeddings_s, embeddings_t, rows, matrix, alpha, beta) -> float:
    """Batch triplet loss with per-pair margins from fitting gaps."""
    S = np.asarray(embeddings_s, dtype=np.float64)
    T = np.asarray(embeddings_t, dtype=np.float64)
    return batch_triplet_loss(S, T, margin_matrix(rows, matrix, alpha, beta))[0]


def batch_regression_loss(S, T, targets):
    """Squared error between embedding distances and targets, plus the positive-pair distance."""
    n = len(S)
    diff = S[:, None, :] - T[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    off = ~np.eye(n, dtype=bool)
    resid = np.where(off, d - np.where(off, targets, 0.0), 0.0)
    pos = np.diag(d) ** 2
    loss = float((resid**2).sum() / (n * (n - 1)) + pos.sum() / n)

    safe = np.where(d > 0, d, 1.0)
    coef = np.where(off & (d > 0), 2.0 * resid / safe, 0.0) / (n * (n - 1))
    dS = (coef[:, :, None] * diff).sum(axis=1)
    dT = -(coef[:, :, None] * diff).sum(axis=0)
    dS += 2.0 * (S - T) / n
    dT -= 2.0 * (S - T) / n
    return loss, dS, dT


def regression_loss(embeddings_s, embeddings_t, rows, matrix, scale: float = 1.0) -> float:
    S = np.asarray(embeddings_s, dtype=np.float64)
    T = np.asarray(embeddings_t, dtype=np.float64)
    return batch_regression_loss(S, T, normalized_targets(rows, matrix, scale))[0]


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def augment_cloud(
    cloud: PointCloud,
    seed,
    scale_range=(0.8, 1.25),
    max_angle_deg: float = 10.0,
    jitter: float | None = None,
    scale=None,
    angle_deg=None,
) -> PointCloud:
    """Anisotropic scale, rotation about the up (y) axis, sketch jitter, then renormalize.

    ``scale`` and ``angle_deg`` override the random draws; ``jitter`` defaults
    to 0.01 for sketches and 0 for shapes.
    """
    rng = np.random.default_rng(seed)
    s = rng.uniform(*scale_range, size=3)
    a = rng.uniform(-max_angle_deg, max_angle_deg)
    if scale is not None:
        s = np.asarray(scale, dtype=np.float64)
    if angle_deg is not None:
        a = float(angle_deg)
    if jitter is None:
        jitter = 0.01 if cloud.kind == "sketch" else 0.0
    t = math.radians(a)
    c, sn = math.cos(t), math.sin(t)
    rot = np.array([[c, 0.0, sn], [0.0, 1.0, 0.0], [-sn, 0.0, c]])
    pts = (cloud.points * s) @ rot.T
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    return normalize_unit_box(cloud.with_points(pts))


def _epoch_order(n, batch_size, seed, epoch, attempt):
    rng = np.random.default_rng([seed, epoch, attempt])
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def epoch_batches(n, batch_size, seed, epoch, rows=None, matrix=None):
    """Shuffled index batches for one epoch.

    When a matrix is given every batch must have a positive max gap for each
    anchor; a failing shuffle is redrawn once and then rejected.
    """
    if n < 2:
        raise ValueError("need at least two training pairs")
    for attempt in range(2):
        batches = _epoch_order(n, batch_size, seed, epoch, attempt)
        if matrix is None or all(_batch_ok(b, rows, matrix) for b in batches):
            return batches
        log.warning("degenerate batch in epoch %d; reshuffling", epoch)
    raise DegenerateBatchError(f"epoch {epoch}: could not draw batches with non-zero fitting gaps")


def _batch_ok(batch, rows, matrix):
    r = [rows[i] for i in batch]
    for a in r:
        if max(matrix.distance(a, b) for b in r if b != a) <= 0:
            return False
    return True


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: object
    log_rows: list

    def log_text(self) -> str:
        return format_log(self.log_rows)


def format_log(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def validation_metrics(params, val: PairSet, matrices: dict, gap_kind: str):
    """Acc@1/5/10 and Avg CD@5, Avg gap@5 of val sketches against the val shapes."""
    q = encode_batch(params, val.sketches)
    g = encode_batch(params, val.shapes)
    rankings = rank_queries(q, val.ids, g, val.ids)
    accs = [top_k_accuracy(rankings, val.ids, min(k, len(val))) for k in (1, 5, 10)]
    k5 = min(5, len(val))
    cd = matrices.get("cd")
    gap = matrices.get(gap_kind)
    avg_cd = avg_metric_at_k(rankings, val.ids, k5, cd) if cd is not None else None
    avg_gap = avg_metric_at_k(rankings, val.ids, k5, gap) if gap is not None else None
    return accs + [avg_cd, avg_gap]


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump_state(dump_path, params, epoch, batch_ids, loss):
    if dump_path is None:
        return
    save_checkpoint(params, dump_path)
    _write(Path(str(dump_path) + ".info"), f"epoch={epoch}\nloss={loss!r}\nbatch={' '.join(batch_ids)}\n")


def train(
    data: PairSet,
    config: TripletConfig,
    matrix=None,
    val: PairSet | None = None,
    val_matrices: dict | None = None,
    checkpoint_path=None,
    log_path=None,
    dims: EncoderDims | None = None,
    progress=None,
) -> TrainResult:
    """Train an encoder; writes the checkpoint and the epoch log when paths are given.

    ``matrix`` must cover every training id unless ``config.mode == "fixed"``.
    """
    dims = dims or EncoderDims(embed_dim=config.embed_dim)
    params = init_params(config.seed, dims)
    params.lineage = f"train:{config.mode}:seed={config.seed}"
    n = len(data)
    rows = None
    if config.mode != "fixed":
        if matrix is None:
            raise ConfigError(f"{config.mode} mode needs a fit-gap matrix")
        if matrix.kind.name != config.gap_kind:
            raise ConfigError(f"matrix kind {matrix.kind.name} does not match config gap kind {config.gap_kind}")
        rows = [matrix.index(sid) for sid in data.ids]
    opt = Adam([a.shape for a in params.arrays()], config.learning_rate)
    dump_path = Path(str(checkpoint_path) + ".diverged") if checkpoint_path is not None else None
    log_rows = []

    for epoch in range(1, config.epochs + 1):
        batches = epoch_batches(n, config.batch_size, config.seed, epoch, rows, matrix if rows else None)
        total = 0.0
        for b_index, batch in enumerate(batches):
            sketches = [data.sketches[i] for i in batch]
            shapes = [data.shapes[i] for i in batch]
            if config.augment:
                sketches = [augment_cloud(c, [config.seed, epoch, int(i), 0]) for c, i in zip(sketches, batch)]
                shapes = [augment_cloud(c, [config.seed, epoch, int(i), 1]) for c, i in zip(shapes, batch)]
            cs = _forward_batch(params, sketches)
            ct = _forward_batch(params, shapes)
            S = np.stack([c.embedding for c in cs])
            T = np.stack([c.embedding for c in ct])
            batch_rows = [rows[i] for i in batch] if rows else None
            if config.mode == "fixed":
                margins = np.full((len(batch),) * 2, config.fixed_margin)
                loss, dS, dT = batch_triplet_loss(S, T, margins)
            elif config.mode == "adaptive":
                loss, dS, dT = batch_triplet_loss(S, T, margin_matrix(batch_rows, matrix, config.alpha, config.beta))
            else:
                targets = normalized_targets(batch_rows, matrix, config.regression_scale)
                loss, dS, dT = batch_regression_loss(S, T, targets)
            if not math.isfinite(loss):
                batch_ids = [data.ids[i] for i in batch]
                _dump_state(dump_path, params, epoch, batch_ids, loss)
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b_index}; state dumped to {dump_path}")
            grads = params.zeros_like()
            for cache, g in zip(cs, dS):
                _backward(params, cache, g, grads)
            for cache, g in zip(ct, dT):
                _backward(params, cache, g, grads)
            opt.step(params.arrays(), grads.arrays())
            total += loss * len(batch)
        params.epoch = epoch
        row = [epoch, total / n]
        if val is not None and len(val) > 0:
            row += validation_metrics(params, val, val_matrices or {}, config.gap_kind)
        else:
            row += [None] * 5
        log_rows.append(row)
        if progress is not None:
            progress(row)
        if log_path is not None:
            _write(log_path, format_log(log_rows))
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return TrainResult(params, log_rows)


def load_pairs(manifest, split: str) -> PairSet:
    """Sketch/shape pairs of one manifest split (or ``"all"``), in manifest order."""
    entries = manifest.entries if split == "all" else manifest.split(split)
    return PairSet([e.id for e in entries], [manifest.sketch(e) for e in entries], [manifest.shape(e) for e in entries])
