"""Structure-preserving deformation by optimizing a coarse trilinear cage.

``deform_to(source, target)`` warps ``source`` toward ``target`` by moving the
vertices of a low-resolution lattice enclosing the unit box. The energy is

    chamfer(apply_cage(source), target)
      + lambda_smooth    * mean over vertices of squared per-axis second differences
      + lambda_magnitude * mean over vertices of squared offset norms

Second differences vanish on affine offset fields, so global stretches and
shears are free while bending the lattice is penalized. Nearest-neighbour
correspondences are recomputed every iteration and held fixed for the
gradient.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ConfigError, CoverageError, DivergenceError
from .geometry import PointCloud, chamfer_distance, farthest_point_subsample
from .optim import Adam

CAGE_PADDING = 0.1
# absolute floor on the denominator so exactly-zero gradients do not amplify roundoff
_REL_FLOOR = 1e-6


@dataclass(frozen=True)
class DeformConfig:
    iterations: int = 300
    step_size: float = 0.05
    lambda_smooth: float = 0.1
    lambda_magnitude: float = 0.01
    seed: int = 0
    resolution: int = 4
    # optimize on at most this many points per cloud; 0 disables subsampling
    max_points: int = 256
    # stop after this many iterations without a 0.01% Chamfer improvement; 0 disables
    patience: int = 40

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.lambda_smooth < 0 or self.lambda_magnitude < 0:
            raise ConfigError("regularizer weights must be non-negative")
        if self.resolution < 2:
            raise ConfigError("cage resolution must be >= 2")
        if self.max_points < 0 or self.patience < 0:
            raise ConfigError("max_points and patience must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "DeformConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown DeformConfig key {key!r}")
            kwargs[key] = float(value) if types[key] == "float" else int(value)
        return cls(**kwargs)

    def digest(self) -> str:
        """Stable 64-bit hex digest of the canonical serialization."""
        return hashlib.blake2b(self.to_text().encode(), digest_size=8).hexdigest()


@dataclass
class Cage:
    resolution: tuple = (4, 4, 4)
    lo: float = -0.5 - CAGE_PADDING
    hi: float = 0.5 + CAGE_PADDING
    offsets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.offsets is None:
            self.offsets = np.zeros(self.resolution + (3,))
        else:
            self.offsets = np.array(self.offsets, dtype=np.float64).reshape(self.resolution + (3,))

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def rest_vertices(self) -> np.ndarray:
        axes = [np.linspace(self.lo, self.hi, r) for r in self.resolution]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    def trilinear(self, points: np.ndarray):
        """Flat vertex indices ``(n, 8)`` and weights ``(n, 8)`` for each point."""
        res = np.array(self.resolution)
        u = (points - self.lo) / (self.hi - self.lo) * (res - 1)
        if np.any(u < 0) or np.any(u > res - 1):
            raise CoverageError("point outside the cage lattice")
        cell = np.minimum(np.floor(u).astype(np.int64), res - 2)
        t = u - cell
        ry, rz = self.resolution[1], self.resolution[2]
        idx = np.empty((len(points), 8), dtype=np.int64)
        w = np.empty((len(points), 8))
        c = 0
        for di in (0, 1):
            wx = t[:, 0] if di else 1.0 - t[:, 0]
            for dj in (0, 1):
                wy = t[:, 1] if dj else 1.0 - t[:, 1]
                for dk in (0, 1):
                    wz = t[:, 2] if dk else 1.0 - t[:, 2]
                    idx[:, c] = ((cell[:, 0] + di) * ry + (cell[:, 1] + dj)) * rz + (cell[:, 2] + dk)
                    w[:, c] = wx * wy * wz
                    c += 1
        return idx, w


@dataclass
class DeformResult:
    deformed: PointCloud
    final_cd: float
    cage: Cage
    iterations_run: int


def _displace(points, idx, w, flat_offsets):
    return points + np.einsum("nk,nkc->nc", w, flat_offsets[idx])


def apply_cage(cage: Cage, cloud: PointCloud) -> PointCloud:
    idx, w = cage.trilinear(cloud.points)
    return cloud.with_points(_displace(cloud.points, idx, w, cage.offsets.reshape(-1, 3)))


def _second_difference_adjoint(r, axis, n):
    shape = list(r.shape)
    shape[axis] = n
    g = np.zeros(shape)
    sl = [slice(None)] * r.ndim

    def at(start, stop):
        s = list(sl)
        s[axis] = slice(start, stop)
        return tuple(s)

    g[at(0, n - 2)] += r
    g[at(1, n - 1)] -= 2.0 * r
    g[at(2, n)] += r
    return g


def smoothness_energy(offsets: np.ndarray):
    """Mean squared per-axis second difference of a ``(rx, ry, rz, 3)`` field, and its gradient."""
    n_vert = np.prod(offsets.shape[:3])
    energy = 0.0
    grad = np.zeros_like(offsets)
    for axis in range(3):
        n = offsets.shape[axis]
        if n < 3:
            continue
        r = np.diff(offsets, n=2, axis=axis)
        energy += float((r**2).sum())
        grad += 2.0 * _second_difference_adjoint(r, axis, n)
    return energy / n_vert, grad / n_vert


def magnitude_energy(offsets: np.ndarray):
    n_vert = np.prod(offsets.shape[:3])
    return float((offsets**2).sum()) / n_vert, 2.0 * offsets / n_vert


class _Problem:
    """Energy and gradient of one (source, target) pair over flat cage offsets."""

    def __init__(self, src, tgt, cage, config):
        self.src = src
        self.tgt = tgt
        self.config = config
        self.shape = cage.offsets.shape
        n_vert = cage.n_vertices
        idx, w = cage.trilinear(src)
        rows = np.repeat(np.arange(len(src)), 8)
        self.interp = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(len(src), n_vert))
        self.interp_t = self.interp.T.tocsr()
        self.tgt_tree = cKDTree(tgt)
        self.n_vert = n_vert
        # quadratic form of the regularizers: energy = sum(o * (reg @ o))
        self.reg = config.lambda_smooth * smoothness_operator(self.shape[:3]) + (
            config.lambda_magnitude / n_vert
        ) * np.eye(n_vert)

    def correspondences(self, offsets):
        x = self.src + self.interp @ offsets.reshape(-1, 3)
        _, fwd = self.tgt_tree.query(x)
        _, bwd = cKDTree(x).query(self.tgt)
        return fwd, bwd

    def evaluate(self, offsets, corr=None):
        """Return (chamfer term, total energy, gradient) with correspondences ``corr``."""
        flat = offsets.reshape(-1, 3)
        x = self.src + self.interp @ flat
        if corr is None:
            _, fwd = self.tgt_tree.query(x)
            _, bwd = cKDTree(x).query(self.tgt)
        else:
            fwd, bwd = corr
        n, m = len(x), len(self.tgt)
        d_fwd = x - self.tgt[fwd]
        d_bwd = self.tgt - x[bwd]
        cd = float((d_fwd * d_fwd).sum(axis=1).mean() + (d_bwd * d_bwd).sum(axis=1).mean())

        gx = (2.0 / n) * d_fwd
        for c in range(3):
            gx[:, c] -= (2.0 / m) * np.bincount(bwd, weights=d_bwd[:, c], minlength=n)
        reg_flat = self.reg @ flat
        energy = cd + float((flat * reg_flat).sum())
        grad = self.interp_t @ gx + 2.0 * reg_flat
        return cd, energy, grad.reshape(self.shape)


def smoothness_operator(resolution) -> np.ndarray:
    """Matrix ``Q`` with ``smoothness_energy(o)[0] == sum(o * (Q @ o))`` for flat offsets ``o``."""
    n_vert = int(np.prod(resolution))
    basis = np.eye(n_vert).reshape(tuple(resolution) + (n_vert,))
    cols = []
    for axis in range(3):
        n = resolution[axis]
        if n < 3:
            continue
        r = np.diff(basis, n=2, axis=axis)
        cols.append(r.reshape(-1, n_vert))
    if not cols:
        return np.zeros((n_vert, n_vert))
    d = np.concatenate(cols)
    return d.T @ d / n_vert


def deform_to(source: PointCloud, target: PointCloud, config: DeformConfig | None = None) -> DeformResult:
    """Warp ``source`` toward ``target``; returns the best iterate by Chamfer distance.

    The result never has a larger Chamfer distance to ``target`` than
    ``source`` itself.
    """
    config = config or DeformConfig()
    res = (config.resolution,) * 3
    start_cd = chamfer_distance(source, target)
    if start_cd == 0.0:
        return DeformResult(source, 0.0, Cage(res), 0)

    src = farthest_point_subsample(source.points, config.max_points, config.seed)
    tgt = farthest_point_subsample(target.points, config.max_points, config.seed)
    problem = _Problem(src, tgt, Cage(res), config)
    # full-resolution coverage check up front
    Cage(res).trilinear(source.points)

    offsets = np.zeros(res + (3,))
    best_cd = np.inf
    best = offsets.copy()
    stale = 0
    iterations_run = 0
    opt = Adam([offsets.shape], config.step_size)
    for _ in range(config.iterations):
        cd, energy, grad = problem.evaluate(offsets)
        if not np.isfinite(energy) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite deformation energy {energy!r}; retry with a smaller step_size")
        stale = 0 if cd < best_cd * (1.0 - 1e-4) else stale + 1
        if cd < best_cd:
            best_cd = cd
            best = offsets.copy()
        if config.patience and stale >= config.patience:
            break
        opt.step([offsets], [grad])
        iterations_run += 1
    cd, energy, _ = problem.evaluate(offsets)
    if not np.isfinite(energy):
        raise DivergenceError(f"non-finite deformation energy {energy!r}; retry with a smaller step_size")
    if cd < best_cd:
        best = offsets.copy()

    cage = Cage(res, offsets=best)
    deformed = apply_cage(cage, source)
    final_cd = chamfer_distance(deformed, target)
    if final_cd > start_cd:
        # the subsampled optimum did not carry over to the full clouds
        return DeformResult(source, start_cd, Cage(res), iterations_run)
    return DeformResult(deformed, final_cd, cage, iterations_run)


def analytic_and_numeric_gradient(source, target, config, offsets, step=1e-4):
    """Analytic energy gradient and its central finite-difference estimate.

    Correspondences are taken at ``offsets`` and held fixed for every
    perturbed evaluation.
    """
    src = _as_array(source)
    tgt = _as_array(target)
    res = (config.resolution,) * 3
    problem = _Problem(src, tgt, Cage(res), config)
    offsets = np.array(offsets, dtype=np.float64).reshape(res + (3,))
    corr = problem.correspondences(offsets)
    _, _, grad = problem.evaluate(offsets, corr)
    numeric = np.zeros_like(offsets)
    flat = offsets.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        e_plus = problem.evaluate(offsets, corr)[1]
        flat[i] = orig - step
        e_minus = problem.evaluate(offsets, corr)[1]
        flat[i] = orig
        num_flat[i] = (e_plus - e_minus) / (2.0 * step)
    return grad, numeric


def max_relative_error(analytic, numeric, floor=_REL_FLOOR) -> float:
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def grad_check_deformer(source, target, config: DeformConfig | None = None, offsets=None, step=1e-4) -> float:
    """Max relative error between analytic and finite-difference energy gradients.

    ``offsets`` defaults to a small random field drawn from ``config.seed``.
    """
    config = config or DeformConfig()
    res = (config.resolution,) * 3
    if offsets is None:
        offsets = np.random.default_rng(config.seed).uniform(-0.05, 0.05, size=res + (3,))
    analytic, numeric = analytic_and_numeric_gradient(source, target, config, offsets, step)
    return max_relative_error(analytic, numeric)


def _as_array(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
