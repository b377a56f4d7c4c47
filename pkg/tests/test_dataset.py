import json
import warnings

import numpy as np
import pytest

from p23d.geometry import PointCloud, look_at_camera, make_view_ring, sample_surface
from p23d.latent import ModelConfig, OccupancyAutoencoder, encode_ss
from p23d.numcore import Rng
from p23d.dataset import (
    MANIFEST,
    DatasetError,
    TrainingPair,
    build_pairs,
    gen_synthetic_shapes,
    grid_config_hash,
    load_corpus,
    load_pair,
    make_corpus,
    read_manifest,
    save_pair,
    write_manifest,
)
from p23d.shapes import box_mesh, uv_sphere
from p23d.visibility import EmptyViewWarning, visible_points
from p23d.voxel import downsample_mask, voxelize

CFG = ModelConfig(N=16, r=4, c_s=2, vae_hidden=4, width=8, blocks=1, cond_dim=16)


@pytest.fixture(scope="module")
def vae():
    return OccupancyAutoencoder(CFG, Rng(0))


# ------------------------------------------------------------------ shapes

def test_sphere_points_on_radius():
    shape = gen_synthetic_shapes(1, "spheres", Rng(0))[0]
    pts = sample_surface(shape.mesh, 5000, Rng(1)).points
    rad = np.linalg.norm(pts, axis=1)
    v = np.linalg.norm(shape.mesh.vertices, axis=1)
    assert np.allclose(v, 0.5, atol=1e-12)
    # flat facets sit inside the circumsphere by at most the chord sag
    assert rad.max() <= 0.5 + 1e-6
    assert rad.min() >= 0.5 * np.cos(np.pi / 8) - 1e-6


def test_box_family_has_twelve_triangles():
    for s in gen_synthetic_shapes(6, "boxes", Rng(2)):
        assert len(s.mesh.triangles) == 12
        assert s.family == "boxes"


@pytest.mark.parametrize("seed", range(4))
def test_union_voxelization_is_or_of_parts(seed):
    shape = gen_synthetic_shapes(1, "unions", Rng(seed))[0]
    assert len(shape.mesh.triangles) == 24
    cloud, faces = sample_surface(shape.mesh, 4000, Rng(seed + 10), return_faces=True)
    first = faces < 12
    whole = voxelize(cloud, 16).occ
    a = voxelize(PointCloud(cloud.points[first]), 16).occ
    b = voxelize(PointCloud(cloud.points[~first]), 16).occ
    np.testing.assert_array_equal(whole, a | b)


def test_shapes_normalized_and_deterministic():
    a = gen_synthetic_shapes(8, rng=Rng(5))
    b = gen_synthetic_shapes(8, rng=Rng(5))
    assert [s.family for s in a] == ["boxes", "spheres", "unions", "l-shapes"] * 2
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.mesh.vertices, t.mesh.vertices)
        np.testing.assert_array_equal(s.cond, t.cond)
        ext = s.mesh.vertices.max(0) - s.mesh.vertices.min(0)
        assert ext.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        gen_synthetic_shapes(0)


# ------------------------------------------------------------------- pairs

def test_build_pairs_counts_and_mask_identity(vae):
    shape = gen_synthetic_shapes(1, "boxes", Rng(3))[0]
    cams = make_view_ring(24, 30.0, 1.8, H=32, W=32)
    pairs = build_pairs(shape.mesh, vae, cams, S=3000, rng=Rng(4), cond=shape.cond, asset="a")
    assert len(pairs) == 24
    assert [p.view for p in pairs] == list(range(24))
    # rebuild the visible sets and check the mask construction
    rng = Rng(4)
    cloud = sample_surface(shape.mesh, 3000, rng)
    full = voxelize(cloud, 16)
    q_gt = encode_ss(full, vae)
    gt_cells = downsample_mask(full, 4)
    for p in pairs:
        vis, _ = visible_points(shape.mesh, cloud, cams[p.view])
        m = downsample_mask(voxelize(vis, 16), 4).astype(float)
        np.testing.assert_array_equal(p.m_s, m)
        np.testing.assert_array_equal(p.q_gt, q_gt)
        assert not (p.m_s.astype(bool) & ~gt_cells).any()
        keep = p.m_s.astype(bool)
        np.testing.assert_array_equal(p.q_comb[keep], p.q_vis[keep])


def test_empty_view_is_skipped_with_warning(vae):
    mesh = box_mesh([0.5, 0.5, 0.5])
    toward = look_at_camera([1.8, 0, 0], [0, 0, 0], 16, 16)
    away = look_at_camera([1.8, 0, 0], [3.6, 0, 0], 16, 16)
    with pytest.warns(EmptyViewWarning):
        pairs = build_pairs(mesh, vae, [toward, away], S=500, rng=Rng(0))
    assert [p.view for p in pairs] == [0]


def test_camera_inside_sphere_sees_inner_wall(vae):
    # no back-face culling: the inside of a closed sphere is a valid surface
    mesh = uv_sphere(0.5)
    cam = look_at_camera([0, 0, 0], [1, 0, 0], 16, 16)
    with warnings.catch_warnings():
        warnings.simplefilter("error", EmptyViewWarning)
        assert len(build_pairs(mesh, vae, [cam], S=2000, rng=Rng(0))) == 1


def test_pair_file_round_trip(tmp_path, vae):
    g = np.random.default_rng(0)
    pair = TrainingPair(q_comb=g.normal(size=(4, 4, 4, 2)), m_s=np.ones((4, 4, 4)), cond=g.normal(size=16),
                        q_gt=g.normal(size=(4, 4, 4, 2)), q_vis=g.normal(size=(4, 4, 4, 2)), asset="x", view=3)
    h = grid_config_hash(16, 4)
    save_pair(pair, tmp_path / "p.p23d", h)
    back = load_pair(tmp_path / "p.p23d", h)
    assert back.asset == "x" and back.view == 3
    np.testing.assert_array_equal(back.q_comb, pair.q_comb.astype(np.float32))
    with pytest.raises(DatasetError):
        load_pair(tmp_path / "p.p23d", grid_config_hash(32, 4))
    save_pair(pair, tmp_path / "q.p23d", h)
    assert (tmp_path / "p.p23d").read_bytes() == (tmp_path / "q.p23d").read_bytes()


# ----------------------------------------------------------------- corpus

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    make_corpus(out, 3, views=4, N=16, r=4, S=1500, image_size=24, seed=2)
    return out


def test_corpus_layout_and_manifest(corpus):
    recs = read_manifest(corpus, grid_config_hash(16, 4))
    assert {r["asset"] for r in recs} == {"asset_0000", "asset_0001", "asset_0002"}
    first = json.loads((corpus / MANIFEST).read_text().splitlines()[0])
    assert list(first) == ["asset", "view", "files", "cond", "config_hash"]
    c = load_corpus(corpus, 16, 4)
    assert c.assets == ["asset_0000", "asset_0001", "asset_0002"]
    assert all(g.N == 16 for g in c.full.values())


def test_corpus_rebuild_is_byte_identical(corpus, tmp_path):
    make_corpus(tmp_path, 3, views=4, N=16, r=4, S=1500, image_size=24, seed=2, threads=3)
    for f in sorted(corpus.rglob("*")):
        if f.is_file():
            assert (tmp_path / f.relative_to(corpus)).read_bytes() == f.read_bytes(), f


def test_manifest_round_trip_and_refusals(corpus, tmp_path):
    recs = [json.loads(x) for x in (corpus / MANIFEST).read_text().splitlines()]
    write_manifest(tmp_path / MANIFEST, recs)
    assert (tmp_path / MANIFEST).read_text() == (corpus / MANIFEST).read_text()
    # tampered hash
    bad = [dict(r, config_hash="0" * 16) for r in recs]
    write_manifest(corpus / "bad.jsonl", bad)
    with pytest.raises(DatasetError, match="hash"):
        read_manifest(corpus / "bad.jsonl", grid_config_hash(16, 4))
    with pytest.raises(DatasetError):
        load_corpus(corpus, 32, 4)
    # files referenced relative to the manifest must exist
    with pytest.raises(DatasetError, match="missing"):
        read_manifest(tmp_path / MANIFEST)
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(DatasetError, match="no records"):
        read_manifest(tmp_path / "empty.jsonl")
    (tmp_path / "junk.jsonl").write_text("{\"asset\": 1}\n")
    with pytest.raises(DatasetError, match="malformed"):
        read_manifest(tmp_path / "junk.jsonl")
    with pytest.raises(DatasetError, match="not found"):
        read_manifest(tmp_path / "nothing.jsonl")
