"""Synthetic shape families, sparse sketch synthesis and dataset manifests.

Shapes are unions of boxes and cylinders in a y-up model frame with the floor
at y = 0. Shapes are sampled area-uniformly on part surfaces; sketches are
sampled along part edges and then distorted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .geometry import DEFAULT_SIZE, PointCloud, normalize_unit_box, read_cloud, resample_uniform, write_cloud

FAMILIES = ("chair", "lamp", "table")
SPLITS = ("train", "val", "test")
CIRCLE_SEGMENTS = 32

# (low, high) for every continuous parameter; discrete ones listed separately
PARAM_RANGES = {
    "chair": {
        "seat_width": (0.40, 0.60),
        "seat_depth": (0.38, 0.58),
        "seat_height": (0.36, 0.52),
        "seat_thickness": (0.03, 0.08),
        "back_height": (0.25, 0.65),
        "back_thickness": (0.03, 0.07),
        "back_tilt": (0.0, 20.0),
        "leg_thickness": (0.025, 0.07),
        "base_frac": (0.6, 0.85),
        "arm_height": (0.12, 0.25),
    },
    "table": {
        "top_width": (0.6, 1.2),
        "top_depth": (0.4, 0.8),
        "height": (0.4, 0.75),
        "top_thickness": (0.02, 0.06),
        "leg_thickness": (0.03, 0.08),
        "base_frac": (0.4, 0.7),
        "shelf_frac": (0.2, 0.45),
    },
    "lamp": {
        "base_radius": (0.08, 0.18),
        "base_thickness": (0.02, 0.05),
        "pole_radius": (0.01, 0.025),
        "pole_height": (0.3, 0.8),
        "shade_radius": (0.1, 0.25),
        "shade_height": (0.1, 0.25),
        "arm_length": (0.15, 0.35),
    },
}
DISCRETE = {
    "chair": {"leg_style": ("four", "pedestal"), "armrests": (False, True)},
    "table": {"leg_style": ("four", "pedestal"), "shelf": (False, True)},
    "lamp": {"arm": (False, True)},
}


@dataclass
class ShapeSpec:
    family: str
    params: dict
    seed: int = 0

    def __post_init__(self):
        validate_spec(self)


def validate_spec(spec: ShapeSpec) -> None:
    if spec.family not in FAMILIES:
        raise InvalidSpecError(f"unknown family {spec.family!r}")
    ranges = PARAM_RANGES[spec.family]
    discrete = DISCRETE[spec.family]
    for name, (lo, hi) in ranges.items():
        if name not in spec.params:
            raise InvalidSpecError(f"{spec.family}: missing parameter {name!r}")
        value = spec.params[name]
        if not lo <= value <= hi:
            raise InvalidSpecError(f"{spec.family}.{name}={value} outside [{lo}, {hi}]")
    for name, choices in discrete.items():
        if spec.params.get(name) not in choices:
            raise InvalidSpecError(f"{spec.family}.{name} must be one of {choices}")
    extra = set(spec.params) - set(ranges) - set(discrete)
    if extra:
        raise InvalidSpecError(f"{spec.family}: unknown parameters {sorted(extra)}")


def random_spec(family: str, seed: int) -> ShapeSpec:
    rng = np.random.default_rng(seed)
    params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES[family].items()}
    for name, choices in DISCRETE[family].items():
        choice = choices[int(rng.integers(len(choices)))]
        params[name] = choice.item() if hasattr(choice, "item") else choice
    return ShapeSpec(family, params, seed)


# ---------------------------------------------------------------------------
# parts
# ---------------------------------------------------------------------------


def _rot_x(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def area(self):
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def sample(self, rng, k):
        hx, hy, hz = self.half
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        faces = rng.choice(6, size=k, p=face_areas / face_areas.sum())
        local = rng.uniform(-1.0, 1.0, size=(k, 3)) * self.half
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -1.0, 1.0)
        local[np.arange(k), axis] = sign * self.half[axis]
        return local @ self.rotation.T + self.center

    def curves(self):
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        corners = (corners * self.half) @ self.rotation.T + self.center
        edges = []
        for i in range(8):
            for j in range(i + 1, 8):
                # corners differ in exactly one sign bit
                if bin(i ^ j).count("1") == 1:
                    edges.append(np.stack([corners[i], corners[j]]))
        return edges


@dataclass
class Cylinder:
    """Vertical (y-axis) cylinder."""

    center: np.ndarray
    radius: float
    half_height: float
    caps: bool = True

    def area(self):
        lateral = 2.0 * math.pi * self.radius * 2.0 * self.half_height
        return lateral + (2.0 * math.pi * self.radius**2 if self.caps else 0.0)

    def sample(self, rng, k):
        r, h = self.radius, self.half_height
        lateral = 2.0 * math.pi * r * 2.0 * h
        cap = math.pi * r * r if self.caps else 0.0
        which = rng.choice(3, size=k, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(0.0, 2.0 * math.pi, size=k)
        rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=k)))
        y = np.where(which == 0, rng.uniform(-h, h, size=k), np.where(which == 1, -h, h))
        return np.stack([rad * np.cos(theta), y, rad * np.sin(theta)], axis=1) + self.center

    def curves(self):
        theta = np.linspace(0.0, 2.0 * math.pi, CIRCLE_SEGMENTS + 1)
        ring = np.stack([self.radius * np.cos(theta), np.zeros_like(theta), self.radius * np.sin(theta)], axis=1)
        out = [ring + self.center + [0, -self.half_height, 0], ring + self.center + [0, self.half_height, 0]]
        for a in (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi):
            foot = np.array([self.radius * math.cos(a), 0.0, self.radius * math.sin(a)]) + self.center
            out.append(np.stack([foot - [0, self.half_height, 0], foot + [0, self.half_height, 0]]))
        return out


def _box(cx, cy, cz, sx, sy, sz, rotation=None):
    return Box(np.array([cx, cy, cz]), np.array([sx, sy, sz]) / 2.0, np.eye(3) if rotation is None else rotation)


def _chair_parts(p):
    sw, sd, sh, st = p["seat_width"], p["seat_depth"], p["seat_height"], p["seat_thickness"]
    lt = p["leg_thickness"]
    parts = [_box(0.0, sh + st / 2, 0.0, sw, st, sd)]
    if p["leg_style"] == "four":
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(_box(sx * (sw - lt) / 2, sh / 2, sz * (sd - lt) / 2, lt, sh, lt))
    else:
        base_r = p["base_frac"] * min(sw, sd) / 2
        parts.append(Cylinder(np.array([0.0, sh / 2, 0.0]), lt, sh / 2))
        parts.append(Cylinder(np.array([0.0, 0.015, 0.0]), base_r, 0.015))
    bh, bt = p["back_height"], p["back_thickness"]
    rot = _rot_x(-p["back_tilt"])
    # back rests on the rear edge of the seat, leaning backwards about x
    pivot = np.array([0.0, sh + st, -sd / 2 + bt / 2])
    center = pivot + rot @ np.array([0.0, bh / 2, 0.0])
    parts.append(Box(center, np.array([sw, bh, bt]) / 2.0, rot))
    if p["armrests"]:
        ah = p["arm_height"]
        for sx in (-1, 1):
            x = sx * (sw / 2 - 0.02)
            parts.append(_box(x, sh + st + ah, 0.0, 0.04, 0.03, sd * 0.9))
            parts.append(_box(x, sh + st + ah / 2, sd * 0.35, 0.03, ah, 0.03))
    return parts


def _table_parts(p):
    w, d, h, t = p["top_width"], p["top_depth"], p["height"], p["top_thickness"]
    lt = p["leg_thickness"]
    parts = [_box(0.0, h - t / 2, 0.0, w, t, d)]
    if p["leg_style"] == "four":
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(_box(sx * (w - lt) / 2, (h - t) / 2, sz * (d - lt) / 2, lt, h - t, lt))
        if p["shelf"]:
            parts.append(_box(0.0, p["shelf_frac"] * h, 0.0, w - 2 * lt, 0.02, d - 2 * lt))
    else:
        parts.append(Cylinder(np.array([0.0, (h - t) / 2, 0.0]), lt, (h - t) / 2))
        parts.append(Cylinder(np.array([0.0, 0.015, 0.0]), p["base_frac"] * min(w, d) / 2, 0.015))
        if p["shelf"]:
            parts.append(Cylinder(np.array([0.0, p["shelf_frac"] * h, 0.0]), 0.6 * min(w, d) / 2, 0.01))
    return parts


def _lamp_parts(p):
    br, bt = p["base_radius"], p["base_thickness"]
    pr, ph = p["pole_radius"], p["pole_height"]
    sr, sh = p["shade_radius"], p["shade_height"]
    parts = [Cylinder(np.array([0.0, bt / 2, 0.0]), br, bt / 2)]
    parts.append(Cylinder(np.array([0.0, bt + ph / 2, 0.0]), pr, ph / 2))
    top = bt + ph
    if p["arm"]:
        al = p["arm_length"]
        parts.append(_box(al / 2, top, 0.0, al, 2 * pr, 2 * pr))
        parts.append(Cylinder(np.array([al, top - sh / 2, 0.0]), sr, sh / 2, caps=False))
    else:
        parts.append(Cylinder(np.array([0.0, top + sh / 2, 0.0]), sr, sh / 2, caps=False))
    return parts


_BUILDERS = {"chair": _chair_parts, "table": _table_parts, "lamp": _lamp_parts}


def shape_parts(spec: ShapeSpec):
    return _BUILDERS[spec.family](spec.params)


def _spec_seed(spec, stream):
    return np.random.SeedSequence([spec.seed, stream])


def shape_points(spec: ShapeSpec, n_points: int = DEFAULT_SIZE) -> np.ndarray:
    """Area-weighted uniform samples on the union of part surfaces, in model space."""
    validate_spec(spec)
    parts = shape_parts(spec)
    rng = np.random.default_rng(_spec_seed(spec, 0))
    areas = np.array([part.area() for part in parts])
    counts = np.bincount(rng.choice(len(parts), size=n_points, p=areas / areas.sum()), minlength=len(parts))
    chunks = [part.sample(rng, int(k)) for part, k in zip(parts, counts) if k]
    return np.concatenate(chunks)


def generate_shape(spec: ShapeSpec, n_points: int = DEFAULT_SIZE) -> PointCloud:
    return normalize_unit_box(PointCloud(shape_points(spec, n_points), "shape"))


def _sample_curves(curves, k, rng):
    segments = np.concatenate([np.stack([c[:-1], c[1:]], axis=1) for c in curves])
    lengths = np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1)
    pick = rng.choice(len(segments), size=k, p=lengths / lengths.sum())
    t = rng.uniform(0.0, 1.0, size=(k, 1))
    return segments[pick, 0] + t * (segments[pick, 1] - segments[pick, 0])


def sketch_points(
    spec: ShapeSpec,
    style_seed: int,
    sparse_points: int = 256,
    dropout: float = 0.1,
    scale_range=(0.7, 1.4),
    shear: float = 0.1,
) -> np.ndarray:
    """Edge samples with curve dropout and global distortion, in model space (no jitter)."""
    validate_spec(spec)
    curves = [c for part in shape_parts(spec) for c in part.curves()]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, style_seed]))
    keep = rng.uniform(size=len(curves)) >= dropout
    if not keep.any():
        keep[:] = True
    pts = _sample_curves([c for c, k in zip(curves, keep) if k], sparse_points, rng)
    lo, hi = scale_range
    distort = np.diag(rng.uniform(lo, hi, size=3))
    distort += (1.0 - np.eye(3)) * rng.uniform(-shear, shear, size=(3, 3))
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    return (pts - center) @ distort.T + center


def generate_sketch(
    spec: ShapeSpec,
    style_seed: int,
    n_points: int = DEFAULT_SIZE,
    sparse_points: int = 256,
    dropout: float = 0.1,
    jitter: float = 0.02,
    scale_range=(0.7, 1.4),
    shear: float = 0.1,
) -> PointCloud:
    """Sparse distorted edge sketch of ``spec``, resampled to ``n_points``.

    Pass ``dropout=0, jitter=0, scale_range=(1, 1), shear=0`` for a clean
    edge sketch.
    """
    raw = sketch_points(spec, style_seed, sparse_points, dropout, scale_range, shear)
    cloud = normalize_unit_box(PointCloud(raw, "sketch"))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, style_seed]))
    if jitter:
        cloud = cloud.with_points(cloud.points + rng.normal(0.0, jitter, size=cloud.points.shape))
    cloud = resample_uniform(cloud, n_points, int(rng.integers(2**31)), passthrough=True)
    return normalize_unit_box(cloud)


def clean_sketch(spec: ShapeSpec, style_seed: int = 0, n_points: int = DEFAULT_SIZE) -> PointCloud:
    return generate_sketch(spec, style_seed, n_points, dropout=0.0, jitter=0.0, scale_range=(1.0, 1.0), shear=0.0)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    family: str
    split: str
    shape: str
    sketch: str
    spec: ShapeSpec


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    family_mix: dict
    n_points: int
    entries: list

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def ids(self, split=None):
        return [e.id for e in self.entries if split is None or e.split == split]

    def shape(self, entry):
        return read_cloud(self.root / entry.shape, "shape")

    def sketch(self, entry):
        return read_cloud(self.root / entry.sketch, "sketch")

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "family_mix": self.family_mix,
            "n_points": self.n_points,
            "entries": [
                {
                    "id": e.id,
                    "family": e.family,
                    "split": e.split,
                    "shape": e.shape,
                    "sketch": e.sketch,
                    "spec_seed": e.spec.seed,
                    "params": e.spec.params,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self):
        (self.root / "manifest.json").write_text(self.to_json())

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        doc = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                e["id"], e["family"], e["split"], e["shape"], e["sketch"], ShapeSpec(e["family"], e["params"], e["spec_seed"])
            )
            for e in doc["entries"]
        ]
        return cls(path.parent, doc["seed"], doc["family_mix"], doc["n_points"], entries)


def split_sizes(count: int):
    """Floor the val/test fractions; the remainder goes to train."""
    val = int(math.floor(0.1 * count))
    test = int(math.floor(0.2 * count))
    return count - val - test, val, test


def _family_counts(count, family_mix):
    names = sorted(family_mix)
    total = sum(family_mix[f] for f in names)
    counts = {f: int(math.floor(count * family_mix[f] / total)) for f in names}
    counts[names[0]] += count - sum(counts.values())
    return counts


def build_dataset(count: int, family_mix, seed: int, out_dir, n_points: int = DEFAULT_SIZE, threads: int = 1) -> DatasetManifest:
    """Generate shapes, sketches and a manifest under ``out_dir``."""
    if count < 10:
        raise ValueError("count must be >= 10")
    if isinstance(family_mix, str):
        family_mix = parse_family_mix(family_mix)
    for fam in family_mix:
        if fam not in FAMILIES:
            raise InvalidSpecError(f"unknown family {fam!r}")
    root = Path(out_dir)
    (root / "shapes").mkdir(parents=True, exist_ok=True)
    (root / "sketches").mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).generate_state(count + 1)
    specs = []
    i = 0
    for fam, k in _family_counts(count, family_mix).items():
        for _ in range(k):
            specs.append((f"{fam}_{i:04d}", random_spec(fam, int(seeds[i]))))
            i += 1
    order = np.random.default_rng(int(seeds[count])).permutation(count)
    n_train, n_val, _ = split_sizes(count)
    split_of = {}
    for rank, j in enumerate(order):
        split_of[int(j)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    entries = [
        ManifestEntry(sid, spec.family, split_of[j], f"shapes/{sid}.txt", f"sketches/{sid}.txt", spec)
        for j, (sid, spec) in enumerate(specs)
    ]
    jobs = [(root, e, n_points) for e in entries]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as pool:
            list(pool.map(_write_pair, jobs))
    else:
        for job in jobs:
            _write_pair(job)
    manifest = DatasetManifest(root, seed, dict(sorted(family_mix.items())), n_points, entries)
    manifest.write()
    return manifest


def _write_pair(job):
    root, entry, n_points = job
    write_cloud(generate_shape(entry.spec, n_points), root / entry.shape)
    write_cloud(generate_sketch(entry.spec, entry.spec.seed, n_points), root / entry.sketch)


def parse_family_mix(text: str) -> dict:
    """``"chair=0.6,lamp=0.4"`` or a bare family name."""
    mix = {}
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        name, sep, weight = token.partition("=")
        mix[name.strip()] = float(weight) if sep else 1.0
    if not mix or any(w <= 0 for w in mix.values()):
        raise InvalidSpecError(f"bad family mix {text!r}")
    return mix
