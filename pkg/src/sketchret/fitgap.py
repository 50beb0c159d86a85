"""Fitting gaps between shapes and the cached pairwise gap matrix.

For a ground-truth shape ``p`` and a gallery shape ``n``:

* ``asym_cd``: CD(D(n; p), p), Chamfer after deforming ``n`` onto ``p``
* ``sym_cd``: mean of the above and CD(n, D(p; n))
* ``asym_f`` / ``sym_f``: the same with F-score at ``tau`` (higher is more similar)
* ``cd``: plain Chamfer distance, no deformation (an evaluation baseline)

Matrix entry ``(i, j)`` holds the gap with shape ``i`` in the role of ``p``.
For the F kinds the margin and evaluation code use ``100 - F`` as a distance.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deformer import DeformConfig, deform_to
from .errors import DegenerateBatchError, IncompleteMatrixError, StaleCacheError
from .geometry import PointCloud, chamfer_distance, f_score

log = logging.getLogger(__name__)

KIND_NAMES = ("asym_cd", "sym_cd", "asym_f", "sym_f", "cd")
CACHE_MAGIC = "# fitgap-matrix v1"


@dataclass(frozen=True)
class FitGapKind:
    name: str = "asym_cd"
    tau: float = 0.01

    def __post_init__(self):
        if self.name not in KIND_NAMES:
            raise ValueError(f"unknown fit-gap kind {self.name!r}; expected one of {KIND_NAMES}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def is_f(self) -> bool:
        return self.name.endswith("_f")

    @property
    def symmetric(self) -> bool:
        return self.name in ("sym_cd", "sym_f", "cd")

    @property
    def identity_value(self) -> float:
        return 100.0 if self.is_f else 0.0


def fit_gap(p: PointCloud, n: PointCloud, kind: FitGapKind | str = "asym_cd", config: DeformConfig | None = None) -> float:
    kind = _kind(kind)
    config = config or DeformConfig()
    if kind.name == "cd":
        return chamfer_distance(n, p)
    forward = deform_to(n, p, config)
    if kind.name == "asym_cd":
        return forward.final_cd
    if kind.name == "asym_f":
        return f_score(forward.deformed, p, kind.tau)
    backward = deform_to(p, n, config)
    if kind.name == "sym_cd":
        return 0.5 * (forward.final_cd + chamfer_distance(n, backward.deformed))
    return 0.5 * (f_score(forward.deformed, p, kind.tau) + f_score(n, backward.deformed, kind.tau))


def _kind(kind) -> FitGapKind:
    return kind if isinstance(kind, FitGapKind) else FitGapKind(kind)


class FitGapMatrix:
    """Dense gap values over an ordered list of shape ids.

    Entries not yet computed are NaN.
    """

    def __init__(self, shape_ids, values, kind: FitGapKind, deform_config_hash: str, data_hash: str = ""):
        self.shape_ids = list(shape_ids)
        self.values = np.asarray(values, dtype=np.float64)
        self.kind = _kind(kind)
        self.deform_config_hash = deform_config_hash
        self.data_hash = data_hash
        self._index = {sid: i for i, sid in enumerate(self.shape_ids)}
        if len(self._index) != len(self.shape_ids):
            raise ValueError("shape ids must be unique")
        if self.values.shape != (len(self.shape_ids),) * 2:
            raise ValueError("matrix shape does not match id list")

    def __len__(self):
        return len(self.shape_ids)

    def index(self, shape_id) -> int:
        try:
            return self._index[shape_id]
        except KeyError:
            raise IncompleteMatrixError(f"shape {shape_id!r} not in fit-gap matrix") from None

    def value(self, p_id, n_id) -> float:
        v = self.values[self.index(p_id), self.index(n_id)]
        if math.isnan(v):
            raise IncompleteMatrixError(f"fit gap ({p_id!r}, {n_id!r}) not computed")
        return float(v)

    def distance(self, i: int, j: int) -> float:
        """Entry ``(i, j)`` as a dissimilarity: the gap itself, or ``100 - F``."""
        v = float(self.values[i, j])
        if math.isnan(v):
            raise IncompleteMatrixError(f"fit gap ({self.shape_ids[i]!r}, {self.shape_ids[j]!r}) not computed")
        return 100.0 - v if self.kind.is_f else v

    def distances(self) -> np.ndarray:
        return 100.0 - self.values if self.kind.is_f else self.values.copy()

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def header(self) -> dict:
        return {
            "kind": self.kind.name,
            "tau": repr(self.kind.tau),
            "deform_config_hash": self.deform_config_hash,
            "data_hash": self.data_hash,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [CACHE_MAGIC]
        lines += [f"# {k}={v}" for k, v in self.header().items()]
        lines.append("# ids=" + " ".join(self.shape_ids))
        lines += [" ".join(repr(float(v)) for v in row) for row in self.values]
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "FitGapMatrix":
        path = Path(path)
        try:
            text = path.read_text()
            lines = text.splitlines()
            if not lines or lines[0] != CACHE_MAGIC:
                raise ValueError("missing cache header")
            header = {}
            body_start = 1
            for body_start in range(1, len(lines)):
                line = lines[body_start]
                if not line.startswith("# "):
                    break
                key, _, value = line[2:].partition("=")
                header[key] = value
            else:
                body_start = len(lines)
            ids = header["ids"].split()
            rows = [[float(v) for v in line.split()] for line in lines[body_start:] if line.strip()]
            values = np.array(rows, dtype=np.float64).reshape(len(ids), len(ids))
            kind = FitGapKind(header["kind"], float(header["tau"]))
            return cls(ids, values, kind, header["deform_config_hash"], header.get("data_hash", ""))
        except StaleCacheError:
            raise
        except Exception as exc:
            raise StaleCacheError(f"unreadable fit-gap cache {path}: {exc}") from exc


def data_digest(shapes) -> str:
    h = hashlib.blake2b(digest_size=8)
    for cloud in shapes:
        h.update(np.ascontiguousarray(cloud.points).tobytes())
    return h.hexdigest()


def max_gap_to_negatives(p_index: int, negative_indices, matrix: FitGapMatrix) -> float:
    """Largest dissimilarity from shape ``p_index`` to the negatives (the margin normalizer)."""
    negs = list(negative_indices)
    if not negs:
        raise ValueError("negative set is empty")
    if p_index in negs:
        raise ValueError("negative set must exclude the positive shape")
    worst = max(matrix.distance(p_index, j) for j in negs)
    if worst <= 0.0:
        raise DegenerateBatchError(f"all negatives identical to shape {matrix.shape_ids[p_index]!r}")
    return worst


# ---------------------------------------------------------------------------
# matrix construction
# ---------------------------------------------------------------------------

_WORKER_SHAPES = None


def _set_shapes(shapes):
    global _WORKER_SHAPES
    _WORKER_SHAPES = shapes


def _init_worker(shapes):
    from threadpoolctl import threadpool_limits

    _set_shapes(shapes)
    threadpool_limits(1)


def _directional(job):
    """Deform shape ``j`` onto shape ``i``; returns (i, j, chamfer, F-score)."""
    i, j, config, tau = job
    p, n = _WORKER_SHAPES[i], _WORKER_SHAPES[j]
    res = deform_to(n, p, config)
    return i, j, res.final_cd, f_score(res.deformed, p, tau)


def _needed_pairs(matrices):
    needed = set()
    for m in matrices:
        if m.kind.name == "cd":
            continue
        missing = np.argwhere(np.isnan(m.values))
        for i, j in missing:
            needed.add((int(i), int(j)))
            if m.kind.symmetric:
                needed.add((int(j), int(i)))
    return sorted(needed)


def _fill(matrices, shapes, directional):
    for m in matrices:
        v = m.values
        n = len(shapes)
        for i in range(n):
            for j in range(n):
                if not math.isnan(v[i, j]):
                    continue
                name = m.kind.name
                if i == j:
                    v[i, j] = m.kind.identity_value
                elif name == "cd":
                    v[i, j] = chamfer_distance(shapes[j], shapes[i])
                elif name in ("asym_cd", "asym_f"):
                    if (i, j) in directional:
                        v[i, j] = directional[(i, j)][0 if name == "asym_cd" else 1]
                elif (i, j) in directional and (j, i) in directional:
                    k = 0 if name == "sym_cd" else 1
                    v[i, j] = 0.5 * (directional[(i, j)][k] + directional[(j, i)][k])


def build_matrices(
    shapes,
    kinds,
    config: DeformConfig | None = None,
    ids=None,
    cache_paths=None,
    threads: int = 1,
    checkpoint_every: int = 200,
):
    """Compute several gap matrices over ``shapes`` sharing one deformation per ordered pair.

    ``cache_paths`` maps kind name to a cache file. Existing caches are resumed
    when their header matches and rejected with ``StaleCacheError`` otherwise.
    """
    config = config or DeformConfig()
    kinds = [_kind(k) for k in kinds]
    ids = list(ids) if ids is not None else [f"shape_{i:04d}" for i in range(len(shapes))]
    if len(ids) != len(shapes):
        raise ValueError("ids and shapes differ in length")
    cache_paths = {k: Path(v) for k, v in (cache_paths or {}).items()}
    chash = config.digest()
    dhash = data_digest(shapes)

    matrices = []
    for kind in kinds:
        path = cache_paths.get(kind.name)
        if path is not None and path.exists():
            m = FitGapMatrix.load(path)
            expected = FitGapMatrix(ids, np.zeros((len(ids),) * 2), kind, chash, dhash)
            if m.header() != expected.header() or m.shape_ids != ids:
                raise StaleCacheError(f"cache {path} was built for a different configuration or shape set")
        else:
            m = FitGapMatrix(ids, np.full((len(ids),) * 2, np.nan), kind, chash, dhash)
        matrices.append(m)

    tau_f = [k.tau for k in kinds if k.is_f]
    tau = tau_f[0] if tau_f else 0.01
    if len(set(tau_f)) > 1:
        raise ValueError("all F kinds in one build must share tau")

    def save_all():
        for m in matrices:
            path = cache_paths.get(m.kind.name)
            if path is not None:
                m.save(path)

    pairs = [(i, j) for i, j in _needed_pairs(matrices) if i != j]
    directional = {}
    if pairs:
        log.info("computing %d deformations over %d shapes", len(pairs), len(shapes))
        jobs = [(i, j, config, tau) for i, j in pairs]
        if threads > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(list(shapes),)) as pool:
                results = pool.map(_directional, jobs, chunksize=16)
                for done, (i, j, cd, f) in enumerate(results, start=1):
                    directional[(i, j)] = (cd, f)
                    if done % checkpoint_every == 0:
                        _fill(matrices, shapes, directional)
                        save_all()
        else:
            _set_shapes(list(shapes))
            for done, job in enumerate(jobs, start=1):
                i, j, cd, f = _directional(job)
                directional[(i, j)] = (cd, f)
                if done % checkpoint_every == 0:
                    _fill(matrices, shapes, directional)
                    save_all()
    _fill(matrices, shapes, directional)
    save_all()
    return {m.kind.name: m for m in matrices}


def build_matrix(shapes, kind="asym_cd", config: DeformConfig | None = None, cache_path=None, ids=None, threads: int = 1):
    kind = _kind(kind)
    paths = {kind.name: cache_path} if cache_path is not None else None
    return build_matrices(shapes, [kind], config, ids, paths, threads)[kind.name]
