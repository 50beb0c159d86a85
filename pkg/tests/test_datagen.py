import json

import numpy as np
import pytest

from sketchret.datagen import (
    PARAM_RANGES,
    DatasetManifest,
    ShapeSpec,
    build_dataset,
    clean_sketch,
    generate_shape,
    generate_sketch,
    parse_family_mix,
    random_spec,
    shape_parts,
    shape_points,
    sketch_points,
    split_sizes,
)
from sketchret.errors import InvalidSpecError
from sketchret.geometry import chamfer_distance, normalize_unit_box


def pedestal_chair():
    spec = random_spec("chair", 0)
    params = dict(spec.params, leg_style="pedestal")
    return ShapeSpec("chair", params, 11)


def test_invalid_specs():
    spec = random_spec("chair", 1)
    with pytest.raises(InvalidSpecError):
        ShapeSpec("sofa", spec.params)
    with pytest.raises(InvalidSpecError):
        ShapeSpec("chair", dict(spec.params, seat_width=2.0))
    with pytest.raises(InvalidSpecError):
        ShapeSpec("chair", dict(spec.params, leg_style="three"))
    with pytest.raises(InvalidSpecError):
        ShapeSpec("chair", dict(spec.params, colour=1.0))


@pytest.mark.parametrize("family", sorted(PARAM_RANGES))
def test_random_specs_valid_and_normalized(family):
    for seed in range(5):
        spec = random_spec(family, seed)
        cloud = generate_shape(spec, 512)
        pts = cloud.points
        ext = pts.max(axis=0) - pts.min(axis=0)
        assert ext.max() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(normalize_unit_box(cloud).points, pts, atol=1e-12)
        sk = generate_sketch(spec, seed, 512)
        assert sk.kind == "sketch" and sk.size == 512
        np.testing.assert_allclose(normalize_unit_box(sk).points, sk.points, atol=1e-12)


def test_pedestal_chair_has_empty_leg_corners():
    spec = pedestal_chair()
    pts = shape_points(spec, 4000)
    p = spec.params
    below = pts[(pts[:, 1] > 0.031) & (pts[:, 1] < p["seat_height"] - 1e-9)]
    assert len(below) > 0
    # only the central column occupies the space between base and seat
    assert np.hypot(below[:, 0], below[:, 2]).max() <= p["leg_thickness"] + 1e-9


def test_same_spec_same_cloud():
    spec = random_spec("table", 4)
    assert generate_shape(spec).equals(generate_shape(spec))
    assert generate_sketch(spec, 2).equals(generate_sketch(spec, 2))
    assert not generate_sketch(spec, 2).equals(generate_sketch(spec, 3))


def seg_distance(points, curves):
    segs = np.concatenate([np.stack([c[:-1], c[1:]], axis=1) for c in curves])
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    best = np.full(len(points), np.inf)
    for i in range(len(segs)):
        t = np.clip(((points - a[i]) @ ab[i]) / max(ab[i] @ ab[i], 1e-30), 0, 1)
        best = np.minimum(best, np.linalg.norm(points - (a[i] + t[:, None] * ab[i]), axis=1))
    return best


@pytest.mark.parametrize("family", sorted(PARAM_RANGES))
def test_clean_sketch_points_lie_on_edges(family):
    spec = random_spec(family, 7)
    pts = sketch_points(spec, 0, dropout=0.0, scale_range=(1.0, 1.0), shear=0.0)
    curves = [c for part in shape_parts(spec) for c in part.curves()]
    assert seg_distance(pts, curves).max() < 1e-12


def test_corrupted_sketch_closer_to_own_shape():
    rng = np.random.default_rng(0)
    wins = 0
    for trial in range(100):
        fam = ["chair", "table", "lamp"][trial % 3]
        spec = random_spec(fam, 1000 + trial)
        other = random_spec(fam, 5000 + trial)
        sk = generate_sketch(spec, int(rng.integers(1000)), 512)
        own = chamfer_distance(sk, generate_shape(spec, 512))
        assert own > 0
        wins += own < chamfer_distance(sk, generate_shape(other, 512))
    assert wins >= 90


def test_clean_sketch_pairing_on_fifty_shapes():
    specs = [random_spec("chair", 300 + i) for i in range(50)]
    shapes = [generate_shape(s, 512) for s in specs]
    sketches = [clean_sketch(s, n_points=512) for s in specs]
    cd = np.array([[chamfer_distance(sk, sh) for sh in shapes] for sk in sketches])
    diag = np.diag(cd)[:, None]
    off = ~np.eye(50, dtype=bool)
    frac = np.mean((diag < cd)[off])
    assert frac >= 0.95


def test_split_sizes():
    assert split_sizes(100) == (70, 10, 20)
    assert split_sizes(15) == (11, 1, 3)
    assert sum(split_sizes(37)) == 37


def test_family_mix_parsing():
    assert parse_family_mix("chair") == {"chair": 1.0}
    assert parse_family_mix("chair=0.6, lamp=0.4") == {"chair": 0.6, "lamp": 0.4}


def test_build_dataset(tmp_path):
    m = build_dataset(20, "chair=0.5,table=0.25,lamp=0.25", 3, tmp_path / "a", n_points=128)
    ids = m.ids()
    assert len(ids) == len(set(ids)) == 20
    splits = {s: set(m.ids(s)) for s in ("train", "val", "test")}
    assert [len(splits[s]) for s in ("train", "val", "test")] == [14, 2, 4]
    assert not (splits["train"] & splits["val"]) and not (splits["train"] & splits["test"]) and not (splits["val"] & splits["test"])
    for e in m.entries:
        assert (m.root / e.shape).exists() and (m.root / e.sketch).exists()
    fams = json.loads((tmp_path / "a" / "manifest.json").read_text())["family_mix"]
    assert fams == {"chair": 0.5, "lamp": 0.25, "table": 0.25}

    back = DatasetManifest.read(tmp_path / "a")
    assert back.to_json() == m.to_json()
    assert back.shape(back.entries[0]).equals(m.shape(m.entries[0]))

    m2 = build_dataset(20, "chair=0.5,table=0.25,lamp=0.25", 3, tmp_path / "b", n_points=128, threads=2)
    for rel in ["manifest.json"] + [e.shape for e in m.entries] + [e.sketch for e in m.entries]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_build_dataset_rejects_small_count(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(5, "chair", 0, tmp_path)
