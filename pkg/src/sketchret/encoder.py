"""Shared-weight max-pool point encoder with a hand-written backward pass.

Per-point affine+ReLU layers lift every point to a feature vector; a
coordinatewise maximum over points pools them; an affine head (ReLU between
layers, none after the last) maps the pooled vector to an embedding that is
L2-normalized. Max-pool ties go to the lowest point index.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError
from .geometry import PointCloud

CHECKPOINT_MAGIC = "# sketchret-encoder v1"


@dataclass(frozen=True)
class EncoderDims:
    point_widths: tuple = (64, 128, 256)
    head_widths: tuple = (256,)
    embed_dim: int = 128

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        if not self.point_widths:
            raise ValueError("at least one per-point layer is required")
        if any(w < 1 for w in self.point_widths + self.head_widths):
            raise ValueError("layer widths must be positive")

    def layer_shapes(self):
        point = list(zip((3,) + self.point_widths[:-1], self.point_widths))
        head_in = (self.point_widths[-1],) + self.head_widths
        head = list(zip(head_in, self.head_widths + (self.embed_dim,)))
        return point, head


@dataclass
class EncoderParams:
    dims: EncoderDims
    point: list  # [(W, b), ...]
    head: list
    seed: int = 0
    epoch: int = 0
    lineage: str = ""

    def arrays(self):
        """Flat list of parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        return [a for layer in self.point + self.head for a in layer]

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(
            self.dims,
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.point],
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.head],
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.dims,
            [(w.copy(), b.copy()) for w, b in self.point],
            [(w.copy(), b.copy()) for w, b in self.head],
            self.seed,
            self.epoch,
            self.lineage,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_params(seed: int, dims: EncoderDims | None = None) -> EncoderParams:
    """Uniform weights with standard deviation 1/sqrt(fan_in); zero biases."""
    dims = dims or EncoderDims()
    rng = np.random.default_rng(seed)
    point_shapes, head_shapes = dims.layer_shapes()

    def layer(fan_in, fan_out):
        bound = math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    point = [layer(i, o) for i, o in point_shapes]
    head = [layer(i, o) for i, o in head_shapes]
    return EncoderParams(dims, point, head, seed=seed, lineage=f"init:{seed}")


@dataclass
class _Cache:
    x: np.ndarray  # (n, 3)
    acts: list  # per-point layer outputs after ReLU
    masks: list  # per-point ReLU masks
    argmax: np.ndarray  # (C,)
    pooled: np.ndarray
    head_acts: list  # inputs to each head layer
    head_masks: list
    z: np.ndarray
    norm: float
    embedding: np.ndarray
    pattern: dict = field(default=None)


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _point_stage(params, x, pattern=None):
    acts, masks = [], []
    h = x
    for k, (w, b) in enumerate(params.point):
        pre = h @ w + b
        mask = pre > 0 if pattern is None else pattern["point_masks"][k]
        h = pre * mask
        acts.append(h)
        masks.append(mask)
    return acts, masks


def _head_stage(params, pooled, pattern=None):
    head_acts, head_masks = [], []
    h = pooled
    last = len(params.head) - 1
    for k, (w, b) in enumerate(params.head):
        head_acts.append(h)
        # vector-matrix products keep single and batched encodes bit-identical
        pre = h @ w + b
        if k < last:
            mask = pre > 0 if pattern is None else pattern["head_masks"][k]
            h = pre * mask
            head_masks.append(mask)
        else:
            h = pre
    return h, head_acts, head_masks


def _finish(params, x, acts, masks, argmax, pattern):
    feats = acts[-1]
    pooled = feats[argmax, np.arange(feats.shape[1])]
    z, head_acts, head_masks = _head_stage(params, pooled, pattern)
    norm = float(np.sqrt(z @ z))
    if not np.isfinite(norm) or not np.all(np.isfinite(z)):
        raise NumericError("non-finite activations in encoder")
    if norm == 0.0:
        raise NumericError("encoder output has zero norm")
    return _Cache(x, acts, masks, argmax, pooled, head_acts, head_masks, z, norm, z / norm, pattern)


def _forward(params: EncoderParams, cloud, pattern=None) -> _Cache:
    x = _points(cloud)
    acts, masks = _point_stage(params, x, pattern)
    argmax = np.argmax(acts[-1], axis=0) if pattern is None else pattern["argmax"]
    return _finish(params, x, acts, masks, argmax, pattern)


def _forward_batch(params: EncoderParams, clouds) -> list:
    """Forward many clouds with one stacked per-point pass when sizes agree."""
    xs = [_points(c) for c in clouds]
    sizes = {len(x) for x in xs}
    if len(sizes) != 1 or len(xs) == 1 or next(iter(sizes)) == 1:
        return [_forward(params, x) for x in xs]
    n = len(xs[0])
    acts, masks = _point_stage(params, np.concatenate(xs))
    out = []
    for i, x in enumerate(xs):
        sl = slice(i * n, (i + 1) * n)
        a = [h[sl] for h in acts]
        m = [k[sl] for k in masks]
        out.append(_finish(params, x, a, m, np.argmax(a[-1], axis=0), None))
    return out


def encode(params: EncoderParams, cloud) -> np.ndarray:
    """Unit-length embedding of one cloud."""
    return _forward(params, cloud).embedding


def encode_batch(params: EncoderParams, clouds) -> np.ndarray:
    """Embeddings ``(len(clouds), D)``; identical to calling ``encode`` per cloud."""
    return np.stack([c.embedding for c in _forward_batch(params, clouds)])


def _backward(params: EncoderParams, cache: _Cache, upstream, grads: EncoderParams) -> None:
    """Accumulate d(upstream . embedding)/d(params) into ``grads``."""
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != cache.embedding.shape:
        raise ValueError(f"upstream gradient shape {u.shape} != embedding shape {cache.embedding.shape}")
    e = cache.embedding
    dz = (u - e * (e @ u)) / cache.norm

    g = dz
    for k in range(len(params.head) - 1, -1, -1):
        w, _ = params.head[k]
        gw, gb = grads.head[k]
        gw += np.outer(cache.head_acts[k], g)
        gb += g
        g = w @ g
        if k > 0:
            g = g * cache.head_masks[k - 1]

    # max-pool: only the winning point of each channel receives gradient
    rows, inverse = np.unique(cache.argmax, return_inverse=True)
    c = len(cache.argmax)
    g_rows = np.zeros((len(rows), c))
    g_rows[inverse, np.arange(c)] = g
    for k in range(len(params.point) - 1, -1, -1):
        g_rows = g_rows * cache.masks[k][rows]
        h_in = cache.x[rows] if k == 0 else cache.acts[k - 1][rows]
        w, _ = params.point[k]
        gw, gb = grads.point[k]
        gw += h_in.T @ g_rows
        gb += g_rows.sum(axis=0)
        if k > 0:
            g_rows = g_rows @ w.T


def encode_backward(params: EncoderParams, cloud, upstream_gradient) -> EncoderParams:
    """Gradient of ``upstream_gradient . encode(params, cloud)`` for every parameter."""
    grads = params.zeros_like()
    _backward(params, _forward(params, cloud), upstream_gradient, grads)
    return grads


def activation_pattern(params: EncoderParams, cloud) -> dict:
    """ReLU masks and max-pool winners at the current parameters."""
    cache = _forward(params, cloud)
    return {"point_masks": cache.masks, "argmax": cache.argmax, "head_masks": cache.head_masks}


def encode_with_pattern(params: EncoderParams, cloud, pattern) -> np.ndarray:
    """Embedding with ReLU masks and max-pool selections frozen to ``pattern``."""
    return _forward(params, cloud, pattern).embedding


def grad_check_encoder(params: EncoderParams, cloud, upstream, step: float = 3e-5) -> tuple:
    """Analytic and central-difference gradients of ``upstream . embedding``.

    The activation pattern is frozen at ``params`` for all perturbed evaluations.
    The default step balances truncation error against roundoff in the
    normalization.
    Returns two flat vectors in ``params.arrays()`` order.
    """
    pattern = activation_pattern(params, cloud)
    analytic = encode_backward(params, cloud, upstream)
    u = np.asarray(upstream, dtype=np.float64)
    numeric = []
    probe = params.copy()
    for arr in probe.arrays():
        flat = arr.reshape(-1)
        est = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = u @ encode_with_pattern(probe, cloud, pattern)
            flat[i] = orig - step
            f_minus = u @ encode_with_pattern(probe, cloud, pattern)
            flat[i] = orig
            est[i] = (f_plus - f_minus) / (2.0 * step)
        numeric.append(est)
    return np.concatenate([a.ravel() for a in analytic.arrays()]), np.concatenate(numeric)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: EncoderParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = params.dims
    lines = [
        CHECKPOINT_MAGIC,
        "# point_widths=" + ",".join(map(str, d.point_widths)),
        "# head_widths=" + ",".join(map(str, d.head_widths)),
        f"# embed_dim={d.embed_dim}",
        f"# seed={params.seed}",
        f"# epoch={params.epoch}",
        f"# lineage={params.lineage}",
    ]
    names = [f"point{k}" for k in range(len(params.point))] + [f"head{k}" for k in range(len(params.head))]
    for name, (w, b) in zip(names, params.point + params.head):
        lines.append(f"{name}.W {w.shape[0]} {w.shape[1]}")
        lines.append(" ".join(map(repr, w.ravel().tolist())))
        lines.append(f"{name}.b {b.shape[0]}")
        lines.append(" ".join(map(repr, b.tolist())))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> EncoderParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint")
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition("=")
        header[key] = value
        i += 1

    def widths(text):
        return tuple(int(v) for v in text.split(",") if v)

    dims = EncoderDims(widths(header["point_widths"]), widths(header["head_widths"]), int(header["embed_dim"]))
    arrays = []
    while i < len(lines):
        shape = tuple(int(v) for v in lines[i].split()[1:])
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        arrays.append(values.reshape(shape))
        i += 2
    n_point = len(dims.point_widths)
    layers = list(zip(arrays[0::2], arrays[1::2]))
    point_shapes, head_shapes = dims.layer_shapes()
    for (w, _), expected in zip(layers, point_shapes + head_shapes):
        if w.shape != expected:
            raise ValueError(f"{path}: layer shape {w.shape} does not match dims {expected}")
    if len(layers) != len(point_shapes) + len(head_shapes):
        raise ValueError(f"{path}: wrong number of layers")
    return EncoderParams(
        dims, layers[:n_point], layers[n_point:], int(header["seed"]), int(header["epoch"]), header.get("lineage", "")
    )
