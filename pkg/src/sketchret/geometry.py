"""Point clouds, unit-box normalization, resampling, Chamfer distance and F-score.

Distances are exact: nearest neighbours come from a k-d tree and every
reported distance is recomputed from the winning coordinates, so results are
bit-identical to an all-pairs scan.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, PointCloudParseError

KINDS = ("shape", "sketch")
DEFAULT_SIZE = 1024


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points tagged as a shape or a sketch."""

    points: np.ndarray
    kind: str = "shape"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.kind)

    def equals(self, other: "PointCloud") -> bool:
        return self.kind == other.kind and np.array_equal(self.points, other.points)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a non-empty (n, 3) point array")
    return pts


def normalize_unit_box(cloud: PointCloud) -> PointCloud:
    """Center on the bounding-box center and scale the longest edge to 1."""
    pts = cloud.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0.0:
        raise DegenerateGeometryError("cloud has zero extent; cannot normalize")
    center = (lo + hi) / 2.0
    return cloud.with_points((pts - center) / extent)


def resample_uniform(cloud: PointCloud, n: int, seed: int, passthrough: bool = False) -> PointCloud:
    """Draw ``n`` points uniformly with replacement.

    With ``passthrough`` and ``n == cloud.size`` the cloud is returned as is.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if passthrough and n == cloud.size:
        return cloud
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, cloud.size, size=n)
    return cloud.with_points(cloud.points[idx])


def nearest_neighbors(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Index into ``b`` of the nearest point for every point of ``a``, and its squared distance.

    Equidistant candidates resolve to their lowest index.
    """
    pa = _as_points(a)
    pb = _as_points(b)
    tree = cKDTree(pb)
    if len(pb) == 1:
        idx = np.zeros(len(pa), dtype=np.int64)
    else:
        dist, nn = tree.query(pa, k=2)
        idx = nn[:, 0].astype(np.int64)
        # a second neighbour at (nearly) the same distance means a possible tie
        for i in np.flatnonzero(dist[:, 1] <= dist[:, 0] * (1 + 1e-9) + 1e-300):
            cand = np.array(tree.query_ball_point(pa[i], dist[i, 0] * (1 + 1e-9) + 1e-300))
            sq = ((pa[i] - pb[cand]) ** 2).sum(axis=1)
            idx[i] = cand[sq == sq.min()].min()
    diff = pa - pb[idx]
    sq = (diff**2).sum(axis=1)
    return idx, sq


def nearest_neighbor_distances(a, b) -> np.ndarray:
    """Euclidean distance from each point of ``a`` to its nearest point of ``b``."""
    _, sq = nearest_neighbors(a, b)
    return np.sqrt(sq)


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    _, sq_ab = nearest_neighbors(a, b)
    _, sq_ba = nearest_neighbors(b, a)
    return float(sq_ab.mean() + sq_ba.mean())


def f_score(a, b, tau: float = 0.01) -> float:
    """F-score in percent at distance threshold ``tau``.

    Precision counts points of ``a`` within ``tau`` of ``b``; recall the reverse.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    d_ab = nearest_neighbor_distances(a, b)
    d_ba = nearest_neighbor_distances(b, a)
    return _f_from_distances(d_ab, d_ba, tau)


def _f_from_distances(d_ab, d_ba, tau):
    precision = 100.0 * np.count_nonzero(d_ab <= tau) / len(d_ab)
    recall = 100.0 * np.count_nonzero(d_ba <= tau) / len(d_ba)
    if precision + recall == 0.0:
        return 0.0
    # P*R and P+R are both commutative, so swapping the clouds gives the same bits
    return float(2.0 * (precision * recall) / (precision + recall))


def farthest_point_subsample(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of ``k`` points, kept in original order.

    The start index is drawn from ``seed``; ``k == 0`` or ``k >= n`` returns all points.
    """
    n = len(points)
    if not k or n <= k:
        return points
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = np.random.default_rng(seed).integers(n)
    dist = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        j = int(np.argmax(dist))
        chosen[i] = j
        np.minimum(dist, ((points - points[j]) ** 2).sum(axis=1), out=dist)
    return points[np.sort(chosen)]


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def write_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    lines = [f"# n={cloud.size} kind={cloud.kind}"]
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_cloud(path, kind: str | None = None) -> PointCloud:
    """Read the plain-text format; the ``# n=.. kind=..`` header is optional."""
    path = Path(path)
    header = {}
    rows = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if rows or header:
                    raise PointCloudParseError(path, line_no, "unexpected comment line")
                for token in line[1:].split():
                    key, sep, value = token.partition("=")
                    if not sep:
                        raise PointCloudParseError(path, line_no, f"bad header token {token!r}")
                    header[key] = value
                continue
            fields = line.split()
            if len(fields) != 3:
                raise PointCloudParseError(path, line_no, f"expected 3 values, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise PointCloudParseError(path, line_no, f"not a number in {line!r}") from None
            if not all(np.isfinite(rows[-1])):
                raise PointCloudParseError(path, line_no, "non-finite coordinate")
    if not rows:
        raise PointCloudParseError(path, 0, "no points")
    if "n" in header:
        try:
            expected = int(header["n"])
        except ValueError:
            raise PointCloudParseError(path, 1, f"bad count {header['n']!r}") from None
        if expected != len(rows):
            raise PointCloudParseError(path, 1, f"header says n={expected} but file has {len(rows)} points")
    file_kind = header.get("kind", kind or "shape")
    if file_kind not in KINDS:
        raise PointCloudParseError(path, 1, f"unknown kind {file_kind!r}")
    return PointCloud(np.array(rows), kind if kind is not None else file_kind)
