import numpy as np
import pytest

from hiermatch.core import FeatureMap
from hiermatch.features import FeatureHierarchy, LevelConfig
from hiermatch.match import (
    MatchConfig,
    coarse_match,
    concat_match,
    dense_match,
    hierarchical_match,
    read_matches,
    refine_match,
    write_matches,
)

from instances import match_case
from oracles import bilinear, match_oracle, nearest_row_major, unit


def test_coarse_finds_planted_copy(rng):
    ref = FeatureMap(rng.normal(size=(4, 4, 6)), 1, 4)
    tgt_data = rng.normal(size=(10, 10, 6))
    tgt_data[7, 5] = ref.data[2, 1]
    (x, y), d = coarse_match(ref, FeatureMap(tgt_data, 1, 4), (1, 2))
    assert (x, y) == (5.0, 7.0)
    assert d == 0.0


def test_coarse_constant_target_picks_first_cell(rng):
    ref = FeatureMap(rng.normal(size=(4, 4, 3)), 1, 4)
    tgt = FeatureMap(np.ones((5, 6, 3)), 1, 4)
    (x, y), _ = coarse_match(ref, tgt, (1.5, 2.25))
    assert (x, y) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_coarse_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    ref = FeatureMap(r.normal(size=(6, 6, 4)), 1, 2)
    tgt = FeatureMap(r.normal(size=(6, 6, 4)), 1, 2)
    p = r.uniform(0, 5, 2)
    (x, y), d = coarse_match(ref, tgt, p)
    want, want_d = nearest_row_major(tgt.data, unit(bilinear(ref.data, p[0], p[1])))
    assert (x, y) == want
    assert d == pytest.approx(want_d, abs=1e-12)


def test_refine_radius_zero_returns_projection(rng):
    ref = FeatureMap(rng.normal(size=(16, 16, 3)), 0, 1)
    tgt = FeatureMap(rng.normal(size=(16, 16, 3)), 0, 1)
    (x, y), _ = refine_match(ref, tgt, (3.5, 2.0), (2, 3), 4, MatchConfig(refine_radius=0))
    assert (x, y) == (8.0, 12.0)
    # projections outside the map are clipped onto it
    (x, y), _ = refine_match(ref, tgt, (3.5, 2.0), (5, 9), 4, MatchConfig(refine_radius=0))
    assert (x, y) == (15.0, 15.0)


def test_refine_finds_copy_within_radius(rng):
    ref = FeatureMap(rng.normal(size=(16, 16, 5)), 0, 1)
    tgt_data = rng.normal(size=(16, 16, 5))
    tgt_data[10, 9] = ref.data[4, 4]
    tgt = FeatureMap(tgt_data, 0, 1)
    (x, y), d = refine_match(ref, tgt, (4, 4), (2, 2), 4, MatchConfig(refine_radius=3))
    assert (x, y) == (9.0, 10.0)
    assert d == 0.0
    # a radius of 2 cannot reach it
    (x, y), _ = refine_match(ref, tgt, (4, 4), (2, 2), 4, MatchConfig(refine_radius=2))
    assert (x, y) != (9.0, 10.0)


@pytest.mark.parametrize("seed", range(10))
def test_refine_never_worse_than_center(seed):
    r = np.random.default_rng(seed)
    ref = FeatureMap(r.normal(size=(12, 12, 3)), 0, 1)
    tgt = FeatureMap(r.normal(size=(12, 12, 3)), 0, 1)
    p_s = r.uniform(0, 11, 2)
    (_, _), d = refine_match(ref, tgt, p_s, (1, 2), 4, MatchConfig(refine_radius=float(r.uniform(0, 6))))
    center = np.linalg.norm(unit(tgt.data[8, 4]) - unit(bilinear(ref.data, *p_s)))
    assert d <= center + 1e-12


def test_scale_mapping_of_query():
    cfgs = [LevelConfig(0, 1), LevelConfig(1, 4)]
    # deep reference map whose only distinctive cell is (16, 8); the target copies it to (3, 2)
    deep_ref = np.ones((20, 20, 2)) * [1.0, 0.0]
    deep_ref[8, 16] = [0.0, 1.0]
    deep_tgt = np.ones((20, 20, 2)) * [1.0, 0.0]
    deep_tgt[2, 3] = [0.0, 1.0]
    shallow = np.ones((80, 80, 2))
    ref = FeatureHierarchy(cfgs, [FeatureMap(shallow, 0, 1), FeatureMap(deep_ref, 1, 4)])
    tgt = FeatureHierarchy(cfgs, [FeatureMap(shallow, 0, 1), FeatureMap(deep_tgt, 1, 4)])
    (res,) = hierarchical_match(ref, tgt, [(64, 32)], MatchConfig(refine_radius=0))
    assert res.coarse == (3.0, 2.0)
    assert res.d_coarse == 0.0
    assert res.refined == (12.0, 8.0)


@pytest.mark.parametrize("seed", range(20))
def test_hierarchical_matches_composed_oracle(seed):
    r = np.random.default_rng(seed)
    ref, tgt, q = match_case(r)
    radius = float(r.choice([0.0, 1.5, 4.0, 8.0]))
    (res,) = hierarchical_match(ref, tgt, [q], MatchConfig(refine_radius=radius))
    coarse, dc, refined, df = match_oracle(ref.maps, tgt.maps, q, radius)
    assert res.coarse == coarse
    assert res.refined == refined
    assert res.d_coarse == pytest.approx(dc, abs=1e-12)
    assert res.d_fine == pytest.approx(df, abs=1e-12)
    assert res.valid


def test_self_match_is_identity(rng):
    ref, _, _ = match_case(rng, size=16, f=4, dim=8)
    # queries on the deep grid hit their own coarse cell exactly
    pts = [(float(x), float(y)) for x in range(0, 13, 4) for y in range(0, 13, 4)]
    for res in hierarchical_match(ref, ref, pts, MatchConfig(refine_radius=8)):
        assert res.refined == res.query
        assert res.d_fine == 0.0


def test_out_of_range_query_is_flagged(rng):
    ref, tgt, _ = match_case(rng, size=16, f=4)
    (res,) = hierarchical_match(ref, tgt, [(14.0, 3.0)])
    assert not res.valid


@pytest.mark.parametrize("stride, count", [(1, 16 * 16), (4, 16), (3, 25)])
def test_dense_match_counts(rng, stride, count):
    ref, tgt, _ = match_case(rng, size=16, f=4)
    dm = dense_match(ref, tgt, MatchConfig(refine_radius=4, dense_stride=stride))
    assert dm.matches.reshape(-1, 2).shape[0] == count
    assert dm.displacement.shape == dm.points.shape


def test_concat_single_level_equals_coarse(rng):
    ref = FeatureMap(rng.normal(size=(6, 6, 4)), 1, 4)
    tgt = FeatureMap(rng.normal(size=(6, 6, 4)), 1, 4)
    queries = rng.uniform(0, 20, (10, 2))
    for q, res in zip(queries, concat_match([ref], [tgt], queries)):
        (x, y), d = coarse_match(ref, tgt, q / 4)
        assert res.coarse == (x, y)
        assert res.refined == (4 * x, 4 * y)
        assert res.d_fine == pytest.approx(d, abs=1e-12)


def test_concat_finds_planted_copy(rng):
    ref, tgt, _ = match_case(rng, size=16, f=4, dim=4)
    for lvl, fmap in enumerate(tgt.maps):
        f = fmap.scale_factor
        fmap.data[8 // f, 12 // f] = ref.maps[lvl].data[4 // f, 4 // f]
    (res,) = concat_match(ref, tgt, [(4.0, 4.0)])
    assert res.refined == (12.0, 8.0)
    assert res.d_fine == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_concat_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    ref, tgt, q = match_case(r, size=16, f=4)

    def desc(maps, x, y):
        parts = []
        for m in maps:
            f = m.scale_factor
            parts.append(unit(bilinear(m.data, min(x / f, m.width - 1), min(y / f, m.height - 1))))
        return np.concatenate(parts) / np.sqrt(len(maps))

    qd = desc(ref.maps, *q)
    best, best_d = None, np.inf
    for y in range(16):
        for x in range(16):
            d = np.linalg.norm(desc(tgt.maps, x, y) - qd)
            if d < best_d:
                best, best_d = (float(x), float(y)), d
    (res,) = concat_match(ref, tgt, [q])
    assert res.refined == best
    assert res.d_fine == pytest.approx(best_d, abs=1e-12)


def test_concat_invariant_to_channel_permutation(rng):
    ref, tgt, _ = match_case(rng, size=16, f=4, dim=6)
    perm = rng.permutation(6)

    def permuted(h):
        return FeatureHierarchy(h.configs, [FeatureMap(m.data[..., perm], m.level_id, m.scale_factor) for m in h.maps])

    qs = rng.uniform(0, 12, (8, 2))
    a = concat_match(ref, tgt, qs)
    b = concat_match(permuted(ref), permuted(tgt), qs)
    assert [r.refined for r in a] == [r.refined for r in b]


def test_matches_file_round_trip(tmp_path, rng):
    ref, tgt, _ = match_case(rng, size=16, f=4)
    results = hierarchical_match(ref, tgt, rng.uniform(0, 12, (6, 2)), MatchConfig(refine_radius=3))
    write_matches(results, tmp_path / "m.txt")
    arr = read_matches(tmp_path / "m.txt")
    assert arr.shape == (6, 7)
    for row, r in zip(arr, results):
        np.testing.assert_array_equal(row, [*r.query, *r.refined, r.d_coarse, r.d_fine, r.valid])
